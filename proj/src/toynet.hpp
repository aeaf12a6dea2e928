#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "adapter.hpp"
#include "dmat.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "topology.hpp"

namespace blora {

// Desk-scale block-structured attention denoiser. The topology mirrors the
// 8-block attention layout with scaled-down per-block layer counts; every
// layer is one self-attention plus one cross-attention unit, each with
// Q/K/V/out projections. Base projections are frozen after construction;
// only attached low-rank factors are trainable.
struct toy_config {
    int token_dim = 16;   // model width, divisible by head_count
    int head_count = 2;
    int grid_side = 4;    // latent token grid side; tokens = grid_side^2
    int prompt_dim = 16;  // text-embedding width
    std::vector<int> block_layers = {1, 2, 2, 2, 2, 2, 2, 1};
    uint64_t seed = 0;

    int tokens() const { return grid_side * grid_side; }
    void validate() const;
};

// Optional low-rank factors on one projection: delta = up (in x r) times
// down (r x out), applied as W0 + adapter_alpha * scale * up @ down.
struct toy_lora {
    bool present = false;
    dmat up;    // [in, r]
    dmat down;  // [r, out]
    double scale = 1.0;
};

struct attention_unit {
    dmat wq, wk, wv, wo;            // frozen base, [in, out] layout
    std::array<toy_lora, 4> lora;   // q, k, v, out
};

struct toy_layer {
    attention_unit self_attn;
    attention_unit cross_attn;
};

struct toy_model {
    toy_config config;
    std::vector<std::vector<toy_layer>> blocks;       // [8][layers(b)]
    std::vector<std::vector<double>> residual_gain;   // [8][token_dim]
    double adapter_alpha = 1.0;                       // global merge strength
};

toy_model build_toy_model(const toy_config& config);

// Flattened copy of every frozen base weight, used to verify freezing.
std::vector<double> snapshot_base(const toy_model& model);

// Per-block prompt resolution: every block sees the default embedding unless
// overridden.
struct prompt_routing {
    std::vector<double> default_embedding;
    std::map<int, std::vector<double>> overrides;

    const std::vector<double>& resolve(int block) const;
};

// Named routing templates for the prompt ablation schemes. Placeholders:
// `mixed` stands for the combined prompt, `content`/`style` for the
// single-concept prompts.
enum class routing_preset {
    mixed_everywhere,          // (1) mixed prompt into all blocks
    content_w4_style_rest,     // (2) content into W4, style elsewhere
    style_w5_content_rest,     // (3) style into W5, content elsewhere
    content_w4_mixed_rest,     // (4) content into W4, mixed elsewhere
    style_w5_mixed_rest,       // (5) style into W5, mixed elsewhere
};

prompt_routing make_preset_routing(routing_preset preset,
                                   const std::vector<double>& content_embedding,
                                   const std::vector<double>& style_embedding,
                                   const std::vector<double>& mixed_embedding);

// Cross-attention context: a prompt vector expanded to two pseudo-tokens
// (the vector and its half rotation) so the attention weights depend on the
// query path.
dmat prompt_tokens(const std::vector<double>& embedding);

// Per-block activation/embedding record for locality checks.
struct forward_trace {
    std::vector<const std::vector<double>*> block_embedding;  // what each block resolved to
    std::vector<dmat> block_output;                           // x after each block
};

dmat toy_forward(const toy_model& model, const dmat& latent, const prompt_routing& routing,
                 forward_trace* trace = nullptr);

// Standalone multi-head attention: softmax(q k^T / sqrt(d)) v per head,
// heads concatenated. F32 boundary over the double kernels.
tensor attention(const tensor& q, const tensor& k, const tensor& v, int head_count = 1);

// Deterministic single-image training proxy: a spatial shape mask drives the
// content channels (first half) and a texture field drives the style
// channels (second half).
struct synthetic_sample {
    int content_label = 0;
    int style_label = 0;
    uint64_t seed = 0;
    std::vector<double> content_field;  // [tokens], the shape mask
    std::vector<double> style_field;    // [tokens], the texture field
    dmat target;                        // [tokens, token_dim]
};

synthetic_sample make_sample(const toy_config& config, int content_label, int style_label,
                             uint64_t seed);

// The fixed noised input the training objective denoises from.
dmat training_latent(const toy_config& config, const synthetic_sample& sample);
dmat generation_latent(const toy_config& config, uint64_t seed, double amplitude = 0.05);

struct train_spec {
    int steps = 1000;
    double learning_rate = 5e-5;
    int rank = 4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::set<int> blocks_to_train;   // nonempty
    std::vector<double> prompt;      // training embedding ("A [v]" stand-in)
    bool center_crop = false;

    void validate(const toy_config& config) const;
};

struct train_report {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_history;  // pre-update loss per step
    lora_adapter adapter;              // trained factors, F32
};

// Replaces any attached adapters with fresh ones (down Gaussian, up zero) on
// spec.blocks_to_train, then Adam-optimizes only those factors; base weights
// never change. The model is exclusively owned by the run.
train_report train_blora(toy_model& model, const synthetic_sample& sample,
                         const train_spec& spec);

// Convenience: builds the model from the config first.
train_report train_blora(const toy_config& config, const synthetic_sample& sample,
                         const train_spec& spec);

// Masked mean squared error of a forward pass against the sample target.
double reconstruction_loss(const toy_model& model, const synthetic_sample& sample,
                           const dmat& latent, const std::vector<double>& prompt,
                           bool center_crop = false);

// Adapter attachment (F32 tensors widened to double). Stems must resolve to
// layers present in the toy topology and match the projection shapes.
void attach_adapter(toy_model& model, const lora_adapter& adapter);
void attach_fresh_adapters(toy_model& model, const std::set<int>& blocks, int rank, uint64_t seed);
void clear_adapters(toy_model& model);
lora_adapter export_adapters(const toy_model& model, const std::set<int>& blocks);

struct grad_check_report {
    double max_rel_error = 0.0;
    int checked = 0;
    double max_abs_outside = 0.0;   // gradient magnitude outside trained blocks
    double fd_error_h = 0.0;        // |analytic - fd| summed at step h
    double fd_error_2h = 0.0;       // same at 2h (second-order probe)
};

// Verifies analytic gradients over `sample_count` randomly chosen adapter
// parameters of `blocks`, using central finite differences at h and 2h with
// Richardson extrapolation of the quadratic truncation term. The raw
// per-step error masses are reported for the convergence-order probe.
grad_check_report grad_check(toy_model& model, const synthetic_sample& sample,
                             const std::set<int>& blocks, int sample_count = 120,
                             double h = 1e-3, uint64_t seed = 1);

struct pair_grid_result {
    std::array<std::array<double, kBlockCount>, kBlockCount> final_loss{};
    std::array<std::array<double, kBlockCount>, kBlockCount> initial_loss{};
};

// Trains every unordered block pair (singletons on the diagonal) and records
// reconstruction losses. Cells run in parallel; results are schedule
// independent.
pair_grid_result pair_grid(const toy_config& config, const synthetic_sample& sample,
                           const train_spec& spec, int thread_count = 0);

} // namespace blora
