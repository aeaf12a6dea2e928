#pragma once

#include <map>
#include <string>
#include <vector>

#include "adapter.hpp"
#include "analysis.hpp"
#include "toynet.hpp"

namespace blora {

inline constexpr const char* kToolVersion = "0.1.0";

// fnv1a64 over the canonical serialized form, so scheme-translated twins of
// the same adapter share a digest.
std::string content_digest(const tensor_file& file);

std::string inspect_json(const lora_adapter& adapter);
std::string probe_json(const probe_report& report);
std::string eval_json(const eval_report& report);
std::string pair_grid_json(const pair_grid_result& grid, const train_spec& spec);
std::string train_json(const train_report& report, const toy_config& config,
                       const synthetic_sample& sample, const train_spec& spec);

} // namespace blora
