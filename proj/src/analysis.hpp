#pragma once

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmat.hpp"
#include "safetensors.hpp"
#include "toynet.hpp"

namespace blora {

// Test thresholds for the planted-signal stub: construction targets > 0.9
// cosine between an encoded grid and its label, detection uses 0.5, and the
// cross-label noise floor stays below 0.2.
inline constexpr double kPlantedSignalTarget = 0.9;
inline constexpr double kPlantedSignalThreshold = 0.5;
inline constexpr double kNoiseFloor = 0.2;

// Reference scores reported for B-LoRA style transfer with real DINO ViT-B/8
// embeddings (style 0.881 +/- 0.05, content 0.790 +/- 0.05). Shown for
// comparison only; stub embedders cannot reproduce them.
inline constexpr double kReferenceStyleMean = 0.881;
inline constexpr double kReferenceStyleStd = 0.05;
inline constexpr double kReferenceContentMean = 0.790;
inline constexpr double kReferenceContentStd = 0.05;

// Pluggable image/text embedder. Outputs are unit-norm and deterministic.
class embedder {
public:
    virtual ~embedder() = default;
    virtual int dimension() const = 0;
    virtual std::vector<double> embed_text(const std::string& label) const = 0;
    virtual std::vector<double> embed_image(const dmat& grid) const = 0;
};

// Deterministic stand-in for CLIP/DINO. Text embeddings are seeded unit
// vectors; images are pooled over tokens and decoded through a fixed
// semi-orthogonal codec, so a grid encoded under a label correlates > 0.9
// with that label's text embedding by construction.
class stub_embedder : public embedder {
public:
    stub_embedder(uint64_t seed, int dimension);

    int dimension() const override { return dimension_; }
    std::vector<double> embed_text(const std::string& label) const override;
    std::vector<double> embed_image(const dmat& grid) const override;

    // Canonical grid carrying a label's planted signal.
    dmat encode_grid(const std::string& label, int tokens, int token_dim) const;

    // The fixed [dimension x token_dim] codec with orthonormal rows; grids
    // are pooled over tokens and decoded through its transpose. Exposed so
    // fixtures can plant signals in grid space.
    const dmat& codec_matrix(int token_dim) const { return codec(token_dim); }

private:
    const dmat& codec(int token_dim) const;

    uint64_t seed_;
    int dimension_;
    mutable std::mutex codec_mutex_;  // codecs build lazily per grid width
    mutable std::map<int, dmat> codecs_;
};

// Label -> vector table loaded from a safetensors file; vectors are
// normalized on load. Image embedding is not available (vectors must be
// precomputed externally).
class lookup_embedder : public embedder {
public:
    explicit lookup_embedder(const tensor_file& file);

    int dimension() const override { return dimension_; }
    std::vector<double> embed_text(const std::string& label) const override;
    std::vector<double> embed_image(const dmat& grid) const override;

    std::vector<std::string> labels() const;

private:
    int dimension_ = 0;
    std::map<std::string, std::vector<double>> table_;
};

lookup_embedder load_embeddings(const tensor_file& file);

// Cosine similarity of two embeddings; normalization absorbs any positive
// rescaling of the raw vectors.
double clip_score(std::span<const double> image_embedding, std::span<const double> text_embedding);

struct probe_family_stats {
    std::array<double, kBlockCount> mean{};
    std::array<double, kBlockCount> stddev{};
    int argmax_block = 0;
};

struct probe_report {
    probe_family_stats content;
    probe_family_stats style;
    int content_pair_count = 0;
    int style_pair_count = 0;
    std::vector<int> probed_blocks;
};

struct probe_options {
    std::vector<std::pair<std::string, std::string>> content_pairs;  // (p, p_hat), p != p_hat
    std::vector<std::pair<std::string, std::string>> style_pairs;
    std::vector<int> blocks = {0, 1, 2, 3, 4, 5, 6, 7};
    uint64_t seed = 0;
    // The identity-routing sanity leg (p == p_hat) is only legal when set.
    bool allow_identical_pairs = false;
};

// For every pair and probed block i, generates with the routing
// {i -> p_hat, default p}, scores the image against p_hat, and averages per
// block; the argmax block per family attributes the injection effect.
probe_report probe_blocks(const toy_model& model, const probe_options& options,
                          const embedder& embed);

struct eval_entry {
    double style_score = 0.0;
    double content_score = 0.0;
};

eval_entry eval_similarity(std::span<const double> output_embedding,
                           std::span<const double> style_ref_embedding,
                           std::span<const double> content_ref_embedding);

struct eval_report {
    double style_mean = 0.0, style_std = 0.0;
    double content_mean = 0.0, content_std = 0.0;
    int count = 0;
};

eval_report aggregate_eval(const std::vector<eval_entry>& entries);

// Fixed label lists shipped with the tool (32 objects, 16 colors standing in
// for styles; color is the style proxy the probe metric detects reliably).
const std::vector<std::string>& object_labels();
const std::vector<std::string>& style_color_labels();

// Deterministic prompt pairs rendered from the shipped templates:
// content "A photo of a <object>", style "A photo of a <color> <object>".
std::vector<std::pair<std::string, std::string>> make_content_pairs(int count, uint64_t seed);
std::vector<std::pair<std::string, std::string>> make_style_pairs(int count, uint64_t seed);

} // namespace blora
