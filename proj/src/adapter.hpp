#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "safetensors.hpp"
#include "tensor.hpp"
#include "topology.hpp"

namespace blora {

// One low-rank factor pair: delta = up (m x r) times down (r x n), scaled by
// network_alpha / rank when the checkpoint carries a per-pair alpha scalar.
struct lora_pair {
    tensor up;
    tensor down;
    std::optional<double> network_alpha;

    int64_t rank() const { return up.rank() == 2 ? up.dim(1) : 0; }
    int64_t rows() const { return up.dim(0); }
    int64_t cols() const { return down.dim(1); }
    double effective_scale() const;
    void validate(const std::string& stem) const;
};

// Keyed collection of factor pairs. Stems use the dot naming scheme; stems
// that do not resolve against the attention topology (text-encoder adapters
// and the like) are carried verbatim and reported as out-of-topology.
struct lora_adapter {
    std::map<std::string, lora_pair> pairs;
    std::map<std::string, std::string> metadata;

    std::set<int> blocks_present() const;
    std::vector<std::string> out_of_topology_stems() const;
    void validate() const;
};

enum class blora_role { content, style };
const char* role_name(blora_role role);
blora_role role_from_name(const std::string& name);

// An adapter confined to a single block. Extraction never includes
// out-of-topology stems; when wrapping a loaded file, such stems (e.g.
// text-encoder adapters) ride along and are preserved by combine.
struct b_lora {
    lora_adapter adapter;
    int block = 0;
    blora_role role = blora_role::content;
};

// Validates block purity over the topology stems. When the adapter lacks
// blora.block metadata the block is inferred from the stems (which must then
// span exactly one block).
b_lora as_blora(const lora_adapter& adapter, std::optional<blora_role> role_override = std::nullopt);

// delta = up x down, scaled by network_alpha / rank when present.
tensor lora_delta(const lora_pair& pair);

// base + alpha * delta. alpha == 0 returns base bit-exactly.
tensor merge(const tensor& base, const lora_pair& pair, double alpha);

// New adapter holding exactly the stems of `block`, tagged with blora.block
// and blora.role metadata. The source is untouched.
b_lora extract_blora(const lora_adapter& adapter, int block, blora_role role);

// Key-union of a content and a style B-LoRA occupying disjoint blocks.
// Records provenance and the suggested inference prompt "A [c] in [s] style".
// Out-of-topology stems riding on either input are preserved; a note per
// preserved stem is appended to `warnings` when given.
lora_adapter combine_bloras(const b_lora& content, const b_lora& style,
                            std::vector<std::string>* warnings = nullptr);

// Folds alpha into each pair's effective scale (via network_alpha), so
// deltas scale linearly. The cumulative user alpha is recorded in the
// blora.alpha metadata key.
lora_adapter scale_adapter(const lora_adapter& adapter, double alpha);

// Adapter file layout: "<stem>.lora.up.weight" / "<stem>.lora.down.weight"
// pairs plus optional "<stem>.alpha" scalars. Kohya-style names
// ("lora_unet_..._to_q.lora_up.weight") are accepted on load and rewritten
// to the dot scheme; writes are always canonical dot-scheme files.
lora_adapter load_adapter(const tensor_file& file);
tensor_file save_adapter(const lora_adapter& adapter);

// Applies every pair onto the dense weight tensor of the same name in
// `base`; remaining base tensors pass through untouched.
tensor_file merge_adapter_into_weights(const tensor_file& base, const lora_adapter& adapter, double alpha);

} // namespace blora
