#include "toynet.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <unordered_map>

namespace blora {

namespace {

// Synthetic-family amplitude and the single-step noising schedule. The
// training input keeps only a weak fraction of the target (heavy noising),
// so reconstruction forces the adapters to memorize the image rather than
// filter it out of the input. The amplitude is matched to the displacement
// an Adam run at the reference constants (1000 steps, lr 5e-5) can produce.
constexpr double kSignalAmplitude = 0.125;
constexpr double kLatentSignalFraction = 0.25;
constexpr double kNoiseScale = 0.25 * kSignalAmplitude;

// Per-block channel gain profiles. The first half of the channels carries
// the content signal, the second half the style signal; W4 writes the whole
// content half and W5 the whole style half, while the remaining blocks own
// narrow slices. This is the frozen architectural analog of the innate
// block specialization the method exploits.
constexpr double kOffBandGainWide = 0.05;   // W4/W5 outside their half
constexpr double kOffBandGainNarrow = 0.2;  // other blocks outside their slice

std::vector<double> block_gain_profile(int block, int token_dim) {
    int half = token_dim / 2;
    std::vector<double> gain(static_cast<size_t>(token_dim));
    auto band = [&](int lo, int hi, double off) {
        for (int c = 0; c < token_dim; ++c) {
            gain[static_cast<size_t>(c)] = (c >= lo && c < hi) ? 1.0 : off;
        }
    };
    switch (block) {
        case 4: band(0, half, kOffBandGainWide); break;
        case 5: band(half, token_dim, kOffBandGainWide); break;
        case 0: band(0, half / 4, kOffBandGainNarrow); break;
        case 1: band(half / 4, half / 2, kOffBandGainNarrow); break;
        case 2: band(half / 2, 3 * half / 4, kOffBandGainNarrow); break;
        case 3: band(3 * half / 4, half, kOffBandGainNarrow); break;
        case 6: band(half, half + half / 2, kOffBandGainNarrow); break;
        case 7: band(half + half / 2, token_dim, kOffBandGainNarrow); break;
        default: fail_usage("block index out of range: " + std::to_string(block));
    }
    return gain;
}

dmat gaussian_dmat(int64_t rows, int64_t cols, double sigma, rng& stream) {
    dmat m(rows, cols);
    for (double& x : m.v) x = sigma * stream.next_gaussian();
    return m;
}

dmat effective_weight(const attention_unit& unit, int proj, double adapter_alpha) {
    const dmat* base = nullptr;
    switch (proj) {
        case 0: base = &unit.wq; break;
        case 1: base = &unit.wk; break;
        case 2: base = &unit.wv; break;
        case 3: base = &unit.wo; break;
    }
    const toy_lora& lora = unit.lora[static_cast<size_t>(proj)];
    if (!lora.present) return *base;
    dmat w = *base;
    dmat delta = dmat_mul(lora.up, lora.down);
    dmat_add_inplace(w, delta, adapter_alpha * lora.scale);
    return w;
}

// Multi-head scaled dot-product attention over doubles.
struct attn_cache {
    dmat q, k, v;
    std::vector<dmat> probs;  // per head, [T, S]
};

dmat attention_heads(const dmat& q, const dmat& k, const dmat& v, int head_count,
                     attn_cache* cache) {
    int64_t t_len = q.rows, s_len = k.rows, dim = q.cols;
    if (k.cols != dim || v.cols != dim) fail_invariant("attention: q/k/v widths disagree");
    if (dim % head_count != 0) fail_invariant("attention: width not divisible by head count");
    if (v.rows != s_len) fail_invariant("attention: k/v row counts disagree");
    int64_t dh = dim / head_count;
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dh));

    dmat ctxv(t_len, dim);
    if (cache) cache->probs.clear();
    for (int h = 0; h < head_count; ++h) {
        int64_t off = h * dh;
        dmat probs(t_len, s_len);
        for (int64_t t = 0; t < t_len; ++t) {
            double mx = -1e300;
            for (int64_t s = 0; s < s_len; ++s) {
                double score = 0.0;
                for (int64_t c = 0; c < dh; ++c) score += q.at(t, off + c) * k.at(s, off + c);
                score *= inv_sqrt_d;
                probs.at(t, s) = score;
                mx = std::max(mx, score);
            }
            double sum = 0.0;
            for (int64_t s = 0; s < s_len; ++s) {
                double e = std::exp(probs.at(t, s) - mx);
                probs.at(t, s) = e;
                sum += e;
            }
            for (int64_t s = 0; s < s_len; ++s) probs.at(t, s) /= sum;
            for (int64_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (int64_t s = 0; s < s_len; ++s) acc += probs.at(t, s) * v.at(s, off + c);
                ctxv.at(t, off + c) = acc;
            }
        }
        if (cache) cache->probs.push_back(std::move(probs));
    }
    return ctxv;
}

struct unit_cache {
    int block = 0;
    int layer = 0;
    bool is_cross = false;
    const attention_unit* unit = nullptr;
    dmat x_in;           // [T, D]
    dmat ctx;            // [S, in_ctx]
    dmat weff[4];        // effective q/k/v/o
    attn_cache attn;
    dmat ctxv;           // attention output before the out-projection
};

dmat unit_forward(const attention_unit& unit, const dmat& x, const dmat& ctx, int head_count,
                  double adapter_alpha, unit_cache* cache) {
    dmat wq = effective_weight(unit, 0, adapter_alpha);
    dmat wk = effective_weight(unit, 1, adapter_alpha);
    dmat wv = effective_weight(unit, 2, adapter_alpha);
    dmat wo = effective_weight(unit, 3, adapter_alpha);
    dmat q = dmat_mul(x, wq);
    dmat k = dmat_mul(ctx, wk);
    dmat v = dmat_mul(ctx, wv);
    attn_cache local;
    attn_cache* ac = cache ? &cache->attn : &local;
    dmat ctxv = attention_heads(q, k, v, head_count, ac);
    dmat y = dmat_mul(ctxv, wo);
    if (cache) {
        cache->unit = &unit;
        cache->x_in = x;
        cache->ctx = ctx;
        cache->weff[0] = std::move(wq);
        cache->weff[1] = std::move(wk);
        cache->weff[2] = std::move(wv);
        cache->weff[3] = std::move(wo);
        cache->attn.q = std::move(q);
        cache->attn.k = std::move(k);
        cache->attn.v = std::move(v);
        cache->ctxv = ctxv;
    }
    return y;
}

using grad_table = std::unordered_map<const toy_lora*, std::pair<dmat, dmat>>;

void accumulate_lora_grad(const toy_lora& lora, const dmat& dweff, double adapter_alpha,
                          grad_table& grads) {
    auto it = grads.find(&lora);
    if (it == grads.end()) return;
    double s = adapter_alpha * lora.scale;
    dmat dup = dmat_mul_nt(dweff, lora.down);   // [in, r]
    dmat ddown = dmat_mul_tn(lora.up, dweff);   // [r, out]
    if (it->second.first.numel() == 0) it->second.first = dmat(dup.rows, dup.cols);
    if (it->second.second.numel() == 0) it->second.second = dmat(ddown.rows, ddown.cols);
    dmat_add_inplace(it->second.first, dup, s);
    dmat_add_inplace(it->second.second, ddown, s);
}

// Returns dx; folds context gradients into dx for self units. Weight
// gradients are accumulated for adapters of trainable blocks only.
dmat unit_backward(const unit_cache& cache, const dmat& dy, int head_count,
                   double adapter_alpha, const std::set<int>& trainable_blocks,
                   grad_table& grads) {
    const attention_unit& unit = *cache.unit;
    bool trainable = trainable_blocks.count(cache.block) != 0;
    int64_t t_len = cache.x_in.rows, s_len = cache.ctx.rows;
    int64_t dim = cache.attn.q.cols;
    int64_t dh = dim / head_count;
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dh));

    // y = ctxv @ wo
    dmat dctxv = dmat_mul_nt(dy, cache.weff[3]);
    if (trainable && unit.lora[3].present) {
        dmat dwo = dmat_mul_tn(cache.ctxv, dy);
        accumulate_lora_grad(unit.lora[3], dwo, adapter_alpha, grads);
    }

    dmat dq(t_len, dim), dk(s_len, dim), dv(s_len, dim);
    for (int h = 0; h < head_count; ++h) {
        int64_t off = h * dh;
        const dmat& probs = cache.attn.probs[static_cast<size_t>(h)];
        dmat dprobs(t_len, s_len);
        for (int64_t t = 0; t < t_len; ++t) {
            for (int64_t s = 0; s < s_len; ++s) {
                double acc = 0.0;
                for (int64_t c = 0; c < dh; ++c) acc += dctxv.at(t, off + c) * cache.attn.v.at(s, off + c);
                dprobs.at(t, s) = acc;
            }
            for (int64_t c = 0; c < dh; ++c) {
                double g = dctxv.at(t, off + c);
                for (int64_t s = 0; s < s_len; ++s) dv.at(s, off + c) += probs.at(t, s) * g;
            }
            // softmax rows backward
            double dot = 0.0;
            for (int64_t s = 0; s < s_len; ++s) dot += dprobs.at(t, s) * probs.at(t, s);
            for (int64_t s = 0; s < s_len; ++s) {
                double dscore = probs.at(t, s) * (dprobs.at(t, s) - dot) * inv_sqrt_d;
                for (int64_t c = 0; c < dh; ++c) {
                    dq.at(t, off + c) += dscore * cache.attn.k.at(s, off + c);
                    dk.at(s, off + c) += dscore * cache.attn.q.at(t, off + c);
                }
            }
        }
    }

    dmat dx = dmat_mul_nt(dq, cache.weff[0]);
    if (trainable && unit.lora[0].present) {
        dmat dwq = dmat_mul_tn(cache.x_in, dq);
        accumulate_lora_grad(unit.lora[0], dwq, adapter_alpha, grads);
    }
    dmat dctx = dmat_mul_nt(dk, cache.weff[1]);
    dmat_add_inplace(dctx, dmat_mul_nt(dv, cache.weff[2]));
    if (trainable && unit.lora[1].present) {
        dmat dwk = dmat_mul_tn(cache.ctx, dk);
        accumulate_lora_grad(unit.lora[1], dwk, adapter_alpha, grads);
    }
    if (trainable && unit.lora[2].present) {
        dmat dwv = dmat_mul_tn(cache.ctx, dv);
        accumulate_lora_grad(unit.lora[2], dwv, adapter_alpha, grads);
    }
    if (!cache.is_cross) dmat_add_inplace(dx, dctx);  // self-attention: ctx == x
    return dx;
}

dmat forward_impl(const toy_model& model, const dmat& latent, const prompt_routing& routing,
                  std::vector<unit_cache>* caches, forward_trace* trace) {
    const toy_config& cfg = model.config;
    if (latent.cols != cfg.token_dim) {
        fail_invariant("latent width " + std::to_string(latent.cols) + " does not match token_dim " +
                       std::to_string(cfg.token_dim));
    }
    dmat x = latent;
    for (int b = 0; b < kBlockCount; ++b) {
        const std::vector<double>& embedding = routing.resolve(b);
        if (static_cast<int>(embedding.size()) != cfg.prompt_dim) {
            fail_invariant("prompt embedding width " + std::to_string(embedding.size()) +
                           " does not match prompt_dim " + std::to_string(cfg.prompt_dim));
        }
        dmat ctx = prompt_tokens(embedding);
        const std::vector<double>& gain = model.residual_gain[static_cast<size_t>(b)];
        for (size_t l = 0; l < model.blocks[static_cast<size_t>(b)].size(); ++l) {
            const toy_layer& layer = model.blocks[static_cast<size_t>(b)][l];
            for (int u = 0; u < 2; ++u) {
                const attention_unit& unit = (u == 0) ? layer.self_attn : layer.cross_attn;
                unit_cache* cache = nullptr;
                if (caches) {
                    caches->emplace_back();
                    cache = &caches->back();
                    cache->block = b;
                    cache->layer = static_cast<int>(l);
                    cache->is_cross = (u == 1);
                }
                dmat y = unit_forward(unit, x, (u == 0) ? x : ctx, cfg.head_count,
                                      model.adapter_alpha, cache);
                for (int64_t t = 0; t < x.rows; ++t) {
                    for (int64_t c = 0; c < x.cols; ++c) {
                        x.at(t, c) += gain[static_cast<size_t>(c)] * y.at(t, c);
                    }
                }
            }
        }
        if (trace) {
            trace->block_embedding.push_back(&embedding);
            trace->block_output.push_back(x);
        }
    }
    return x;
}

std::vector<uint8_t> crop_mask(const toy_config& cfg, bool center_crop) {
    std::vector<uint8_t> mask(static_cast<size_t>(cfg.tokens()), 1);
    if (!center_crop || cfg.grid_side <= 2) return mask;
    for (int t = 0; t < cfg.tokens(); ++t) {
        int tx = t % cfg.grid_side, ty = t / cfg.grid_side;
        bool inside = tx >= 1 && tx < cfg.grid_side - 1 && ty >= 1 && ty < cfg.grid_side - 1;
        mask[static_cast<size_t>(t)] = inside ? 1 : 0;
    }
    return mask;
}

double masked_mse(const dmat& out, const dmat& target, const std::vector<uint8_t>& mask) {
    int64_t kept = 0;
    double acc = 0.0;
    for (int64_t t = 0; t < out.rows; ++t) {
        if (!mask[static_cast<size_t>(t)]) continue;
        ++kept;
        for (int64_t c = 0; c < out.cols; ++c) {
            double d = out.at(t, c) - target.at(t, c);
            acc += d * d;
        }
    }
    return acc / (static_cast<double>(kept) * static_cast<double>(out.cols));
}

dmat masked_mse_grad(const dmat& out, const dmat& target, const std::vector<uint8_t>& mask) {
    int64_t kept = 0;
    for (uint8_t m : mask) kept += m;
    dmat g(out.rows, out.cols);
    double scale = 2.0 / (static_cast<double>(kept) * static_cast<double>(out.cols));
    for (int64_t t = 0; t < out.rows; ++t) {
        if (!mask[static_cast<size_t>(t)]) continue;
        for (int64_t c = 0; c < out.cols; ++c) {
            g.at(t, c) = scale * (out.at(t, c) - target.at(t, c));
        }
    }
    return g;
}

struct param_slot {
    toy_lora* lora;
    int block;
    bool is_up;
};

std::vector<param_slot> collect_params(toy_model& model, const std::set<int>& blocks) {
    std::vector<param_slot> out;
    for (int b = 0; b < kBlockCount; ++b) {
        if (!blocks.count(b)) continue;
        for (toy_layer& layer : model.blocks[static_cast<size_t>(b)]) {
            for (attention_unit* unit : {&layer.self_attn, &layer.cross_attn}) {
                for (toy_lora& lora : unit->lora) {
                    if (!lora.present) continue;
                    out.push_back({&lora, b, true});
                    out.push_back({&lora, b, false});
                }
            }
        }
    }
    return out;
}

grad_table make_grad_table(toy_model& model) {
    grad_table table;
    for (auto& block : model.blocks) {
        for (toy_layer& layer : block) {
            for (attention_unit* unit : {&layer.self_attn, &layer.cross_attn}) {
                for (toy_lora& lora : unit->lora) {
                    if (lora.present) table.emplace(&lora, std::pair<dmat, dmat>{});
                }
            }
        }
    }
    return table;
}

void backward_impl(const toy_model& model, std::vector<unit_cache>& caches, dmat dx,
                   const std::set<int>& trainable_blocks, grad_table& grads) {
    for (auto it = caches.rbegin(); it != caches.rend(); ++it) {
        const std::vector<double>& gain =
            model.residual_gain[static_cast<size_t>(it->block)];
        dmat dy(dx.rows, dx.cols);
        for (int64_t t = 0; t < dx.rows; ++t) {
            for (int64_t c = 0; c < dx.cols; ++c) {
                dy.at(t, c) = gain[static_cast<size_t>(c)] * dx.at(t, c);
            }
        }
        dmat dx_unit = unit_backward(*it, dy, model.config.head_count, model.adapter_alpha,
                                     trainable_blocks, grads);
        dmat_add_inplace(dx, dx_unit);
    }
}

} // namespace

void toy_config::validate() const {
    if (token_dim < 2 || head_count < 1 || token_dim % head_count != 0) {
        fail_usage("token_dim must be positive and divisible by head_count");
    }
    if (token_dim % 8 != 0) fail_usage("token_dim must be a multiple of 8 (channel banding)");
    if (grid_side < 2) fail_usage("grid_side must be >= 2");
    if (prompt_dim < 2) fail_usage("prompt_dim must be >= 2");
    if (static_cast<int>(block_layers.size()) != kBlockCount) {
        fail_usage("block_layers must list exactly 8 blocks");
    }
    for (int b = 0; b < kBlockCount; ++b) {
        if (block_layers[static_cast<size_t>(b)] < 1) fail_usage("every block needs >= 1 layer");
        if (block_layers[static_cast<size_t>(b)] > layer_count(b)) {
            fail_usage("block " + block_name(b) + " cannot exceed " +
                       std::to_string(layer_count(b)) + " layers");
        }
    }
}

toy_model build_toy_model(const toy_config& config) {
    config.validate();
    toy_model model;
    model.config = config;
    model.blocks.resize(kBlockCount);
    model.residual_gain.resize(kBlockCount);
    uint64_t counter = 0;
    double sigma_x = 0.15 / std::sqrt(static_cast<double>(config.token_dim));
    double sigma_p = 0.15 / std::sqrt(static_cast<double>(config.prompt_dim));
    for (int b = 0; b < kBlockCount; ++b) {
        model.residual_gain[static_cast<size_t>(b)] = block_gain_profile(b, config.token_dim);
        int layers = config.block_layers[static_cast<size_t>(b)];
        for (int l = 0; l < layers; ++l) {
            toy_layer layer;
            for (int u = 0; u < 2; ++u) {
                attention_unit& unit = (u == 0) ? layer.self_attn : layer.cross_attn;
                int64_t ctx_dim = (u == 0) ? config.token_dim : config.prompt_dim;
                double sigma_ctx = (u == 0) ? sigma_x : sigma_p;
                rng sq = rng::derive(config.seed, "base-q", counter);
                rng sk = rng::derive(config.seed, "base-k", counter);
                rng sv = rng::derive(config.seed, "base-v", counter);
                rng so = rng::derive(config.seed, "base-o", counter);
                unit.wq = gaussian_dmat(config.token_dim, config.token_dim, sigma_x, sq);
                unit.wk = gaussian_dmat(ctx_dim, config.token_dim, sigma_ctx, sk);
                unit.wv = gaussian_dmat(ctx_dim, config.token_dim, sigma_ctx, sv);
                unit.wo = gaussian_dmat(config.token_dim, config.token_dim, sigma_x, so);
                ++counter;
            }
            model.blocks[static_cast<size_t>(b)].push_back(std::move(layer));
        }
    }
    return model;
}

std::vector<double> snapshot_base(const toy_model& model) {
    std::vector<double> out;
    for (const auto& block : model.blocks) {
        for (const toy_layer& layer : block) {
            for (const attention_unit* unit : {&layer.self_attn, &layer.cross_attn}) {
                for (const dmat* w : {&unit->wq, &unit->wk, &unit->wv, &unit->wo}) {
                    out.insert(out.end(), w->v.begin(), w->v.end());
                }
            }
        }
    }
    return out;
}

const std::vector<double>& prompt_routing::resolve(int block) const {
    auto it = overrides.find(block);
    if (it != overrides.end()) return it->second;
    if (default_embedding.empty()) fail_usage("routing has no default embedding");
    return default_embedding;
}

prompt_routing make_preset_routing(routing_preset preset,
                                   const std::vector<double>& content_embedding,
                                   const std::vector<double>& style_embedding,
                                   const std::vector<double>& mixed_embedding) {
    prompt_routing routing;
    switch (preset) {
        case routing_preset::mixed_everywhere:
            routing.default_embedding = mixed_embedding;
            break;
        case routing_preset::content_w4_style_rest:
            routing.default_embedding = style_embedding;
            routing.overrides[4] = content_embedding;
            break;
        case routing_preset::style_w5_content_rest:
            routing.default_embedding = content_embedding;
            routing.overrides[5] = style_embedding;
            break;
        case routing_preset::content_w4_mixed_rest:
            routing.default_embedding = mixed_embedding;
            routing.overrides[4] = content_embedding;
            break;
        case routing_preset::style_w5_mixed_rest:
            routing.default_embedding = mixed_embedding;
            routing.overrides[5] = style_embedding;
            break;
    }
    return routing;
}

dmat prompt_tokens(const std::vector<double>& embedding) {
    int64_t p = static_cast<int64_t>(embedding.size());
    dmat tokens(2, p);
    for (int64_t i = 0; i < p; ++i) {
        tokens.at(0, i) = embedding[static_cast<size_t>(i)];
        tokens.at(1, i) = embedding[static_cast<size_t>((i + p / 2) % p)];
    }
    return tokens;
}

dmat toy_forward(const toy_model& model, const dmat& latent, const prompt_routing& routing,
                 forward_trace* trace) {
    return forward_impl(model, latent, routing, nullptr, trace);
}

tensor attention(const tensor& q, const tensor& k, const tensor& v, int head_count) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        fail_invariant("attention expects 2-D q/k/v");
    }
    if (head_count < 1) fail_usage("head_count must be >= 1");
    dmat out = attention_heads(dmat_from_tensor(q), dmat_from_tensor(k), dmat_from_tensor(v),
                               head_count, nullptr);
    return tensor_from_dmat(out);
}

synthetic_sample make_sample(const toy_config& config, int content_label, int style_label,
                             uint64_t seed) {
    config.validate();
    synthetic_sample s;
    s.content_label = content_label;
    s.style_label = style_label;
    s.seed = seed;
    int tokens = config.tokens();
    int dim = config.token_dim;
    int half = dim / 2;

    // Shape mask: exactly half the tokens set, positions from a seeded
    // permutation keyed by the content label.
    s.content_field.assign(static_cast<size_t>(tokens), 0.0);
    {
        rng stream = rng::derive(seed, "content-mask", static_cast<uint64_t>(content_label));
        std::vector<int> order(static_cast<size_t>(tokens));
        for (int i = 0; i < tokens; ++i) order[static_cast<size_t>(i)] = i;
        for (int i = tokens - 1; i > 0; --i) {
            int j = static_cast<int>(stream.next_u64() % static_cast<uint64_t>(i + 1));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        for (int i = 0; i < tokens / 2; ++i) s.content_field[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1.0;
    }

    // Texture field: a plane wave whose frequency and phase come from the
    // style label.
    s.style_field.assign(static_cast<size_t>(tokens), 0.0);
    {
        rng stream = rng::derive(seed, "style-field", static_cast<uint64_t>(style_label));
        int max_freq = std::max(1, config.grid_side / 2);
        int fx = 1 + static_cast<int>(stream.next_u64() % static_cast<uint64_t>(max_freq));
        int fy = 1 + static_cast<int>(stream.next_u64() % static_cast<uint64_t>(max_freq));
        double phase = stream.next_uniform() * 6.283185307179586;
        for (int t = 0; t < tokens; ++t) {
            int tx = t % config.grid_side, ty = t / config.grid_side;
            double arg = 6.283185307179586 * (fx * tx + fy * ty) /
                             static_cast<double>(config.grid_side) + phase;
            s.style_field[static_cast<size_t>(t)] = std::cos(arg);
        }
    }

    auto unit_direction = [&](const char* tag, int label, int n) {
        rng stream = rng::derive(seed, tag, static_cast<uint64_t>(label));
        std::vector<double> v(static_cast<size_t>(n));
        double norm = 0.0;
        for (double& x : v) {
            x = stream.next_gaussian();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        return v;
    };
    std::vector<double> content_dir = unit_direction("content-dir", content_label, half);
    std::vector<double> style_dir = unit_direction("style-dir", style_label, dim - half);

    s.target = dmat(tokens, dim);
    for (int t = 0; t < tokens; ++t) {
        for (int c = 0; c < half; ++c) {
            s.target.at(t, c) = kSignalAmplitude * s.content_field[static_cast<size_t>(t)] *
                                content_dir[static_cast<size_t>(c)];
        }
        for (int c = half; c < dim; ++c) {
            s.target.at(t, c) = kSignalAmplitude * s.style_field[static_cast<size_t>(t)] *
                                style_dir[static_cast<size_t>(c - half)];
        }
    }
    return s;
}

dmat training_latent(const toy_config& config, const synthetic_sample& sample) {
    if (sample.target.rows != config.tokens() || sample.target.cols != config.token_dim) {
        fail_usage("sample target does not match the model configuration");
    }
    rng stream = rng::derive(sample.seed, "latent-noise");
    dmat latent = sample.target;
    for (double& x : latent.v) {
        x = kLatentSignalFraction * x + kNoiseScale * stream.next_gaussian();
    }
    return latent;
}

dmat generation_latent(const toy_config& config, uint64_t seed, double amplitude) {
    rng stream = rng::derive(seed, "generation-latent");
    dmat latent(config.tokens(), config.token_dim);
    for (double& x : latent.v) x = amplitude * stream.next_gaussian();
    return latent;
}

void train_spec::validate(const toy_config& config) const {
    if (steps < 1) fail_usage("steps must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail_usage("learning_rate must be positive");
    if (rank < 1) fail_usage("rank must be >= 1");
    if (rank > std::min(config.token_dim, config.prompt_dim)) {
        fail_usage("rank exceeds the smallest projection dimension");
    }
    if (blocks_to_train.empty()) fail_usage("blocks_to_train must be nonempty");
    for (int b : blocks_to_train) {
        if (b < 0 || b >= kBlockCount) fail_usage("block index out of range: " + std::to_string(b));
    }
    if (static_cast<int>(prompt.size()) != config.prompt_dim) {
        fail_usage("training prompt width must equal prompt_dim");
    }
}

// Network-alpha gain of freshly attached adapters. Raising the effective
// scale (recorded as "<stem>.alpha" = scale * rank in exported files) buys
// delta reach at a fixed learning rate, the usual lever when the optimizer
// recipe is pinned.
constexpr double kTrainAdapterScale = 4.0;

void attach_fresh_adapters(toy_model& model, const std::set<int>& blocks, int rank, uint64_t seed) {
    double sigma = 1.0 / std::sqrt(static_cast<double>(rank));
    for (int b : blocks) {
        if (b < 0 || b >= kBlockCount) fail_usage("block index out of range: " + std::to_string(b));
        auto& layers = model.blocks[static_cast<size_t>(b)];
        for (size_t l = 0; l < layers.size(); ++l) {
            for (int u = 0; u < 2; ++u) {
                attention_unit& unit = (u == 0) ? layers[l].self_attn : layers[l].cross_attn;
                for (int p = 0; p < 4; ++p) {
                    const dmat& base = (p == 0) ? unit.wq : (p == 1) ? unit.wk : (p == 2) ? unit.wv : unit.wo;
                    toy_lora& lora = unit.lora[static_cast<size_t>(p)];
                    lora.present = true;
                    lora.scale = kTrainAdapterScale;
                    lora.up = dmat(base.rows, rank);  // zero: training starts at the base model
                    rng stream = rng::derive(seed, "lora-init",
                                             (static_cast<uint64_t>(b) << 32) | (l << 8) |
                                                 (static_cast<uint64_t>(u) << 4) | static_cast<uint64_t>(p));
                    lora.down = gaussian_dmat(rank, base.cols, sigma, stream);
                }
            }
        }
    }
}

void clear_adapters(toy_model& model) {
    for (auto& block : model.blocks) {
        for (toy_layer& layer : block) {
            for (attention_unit* unit : {&layer.self_attn, &layer.cross_attn}) {
                for (toy_lora& lora : unit->lora) lora = toy_lora{};
            }
        }
    }
}

void attach_adapter(toy_model& model, const lora_adapter& adapter) {
    for (const auto& [stem, pair] : adapter.pairs) {
        auto addr = find_address(stem);
        if (!addr) fail_invariant("stem \"" + stem + "\" is outside the attention topology");
        int toy_layers = model.config.block_layers[static_cast<size_t>(addr->block)];
        if (addr->layer >= toy_layers) {
            fail_invariant("stem \"" + stem + "\" addresses layer " + std::to_string(addr->layer) +
                           " but the toy block has " + std::to_string(toy_layers) + " layers");
        }
        toy_layer& layer = model.blocks[static_cast<size_t>(addr->block)][static_cast<size_t>(addr->layer)];
        attention_unit& unit =
            (addr->kind == attention_kind::self_attn) ? layer.self_attn : layer.cross_attn;
        const dmat& base = (addr->proj == projection::q)   ? unit.wq
                           : (addr->proj == projection::k) ? unit.wk
                           : (addr->proj == projection::v) ? unit.wv
                                                           : unit.wo;
        if (pair.rows() != base.rows || pair.cols() != base.cols) {
            fail_invariant("stem \"" + stem + "\" delta shape [" + std::to_string(pair.rows()) + "x" +
                           std::to_string(pair.cols()) + "] does not match projection [" +
                           std::to_string(base.rows) + "x" + std::to_string(base.cols) + "]");
        }
        toy_lora& lora = unit.lora[static_cast<size_t>(addr->proj)];
        lora.present = true;
        lora.up = dmat_from_tensor(pair.up);
        lora.down = dmat_from_tensor(pair.down);
        lora.scale = pair.effective_scale();
    }
}

lora_adapter export_adapters(const toy_model& model, const std::set<int>& blocks) {
    lora_adapter out;
    for (int b : blocks) {
        if (b < 0 || b >= kBlockCount) fail_usage("block index out of range: " + std::to_string(b));
        const auto& layers = model.blocks[static_cast<size_t>(b)];
        for (size_t l = 0; l < layers.size(); ++l) {
            for (int u = 0; u < 2; ++u) {
                const attention_unit& unit = (u == 0) ? layers[l].self_attn : layers[l].cross_attn;
                for (int p = 0; p < 4; ++p) {
                    const toy_lora& lora = unit.lora[static_cast<size_t>(p)];
                    if (!lora.present) continue;
                    layer_address addr;
                    addr.block = b;
                    addr.layer = static_cast<int>(l);
                    addr.kind = (u == 0) ? attention_kind::self_attn : attention_kind::cross_attn;
                    addr.proj = static_cast<projection>(p);
                    lora_pair pair;
                    pair.up = tensor_from_dmat(lora.up);
                    pair.down = tensor_from_dmat(lora.down);
                    if (lora.scale != 1.0) {
                        pair.network_alpha = lora.scale * static_cast<double>(pair.rank());
                    }
                    out.pairs.emplace(key_of_address(addr), std::move(pair));
                }
            }
        }
    }
    return out;
}

double reconstruction_loss(const toy_model& model, const synthetic_sample& sample,
                           const dmat& latent, const std::vector<double>& prompt,
                           bool center_crop) {
    prompt_routing routing;
    routing.default_embedding = prompt;
    dmat out = forward_impl(model, latent, routing, nullptr, nullptr);
    return masked_mse(out, sample.target, crop_mask(model.config, center_crop));
}

train_report train_blora(toy_model& model, const synthetic_sample& sample,
                         const train_spec& spec) {
    const toy_config& config = model.config;
    config.validate();
    spec.validate(config);

    clear_adapters(model);
    attach_fresh_adapters(model, spec.blocks_to_train, spec.rank, config.seed);

    dmat latent = training_latent(config, sample);
    std::vector<uint8_t> mask = crop_mask(config, spec.center_crop);
    prompt_routing routing;
    routing.default_embedding = spec.prompt;

    std::vector<param_slot> params = collect_params(model, spec.blocks_to_train);
    std::vector<std::vector<double>> adam_m(params.size()), adam_v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const dmat& factor = params[i].is_up ? params[i].lora->up : params[i].lora->down;
        adam_m[i].assign(factor.v.size(), 0.0);
        adam_v[i].assign(factor.v.size(), 0.0);
    }

    train_report report;
    report.loss_history.reserve(static_cast<size_t>(spec.steps));

    for (int step = 0; step < spec.steps; ++step) {
        std::vector<unit_cache> caches;
        caches.reserve(params.size());
        dmat out = forward_impl(model, latent, routing, &caches, nullptr);
        double loss = masked_mse(out, sample.target, mask);
        if (!std::isfinite(loss)) {
            fail_invariant("training diverged: non-finite loss at step " + std::to_string(step));
        }
        report.loss_history.push_back(loss);
        if (step == 0) report.initial_loss = loss;

        grad_table grads;
        for (const param_slot& p : params) grads.emplace(p.lora, std::pair<dmat, dmat>{});
        backward_impl(model, caches, masked_mse_grad(out, sample.target, mask),
                      spec.blocks_to_train, grads);

        double t = static_cast<double>(step + 1);
        double bc1 = 1.0 - std::pow(spec.beta1, t);
        double bc2 = 1.0 - std::pow(spec.beta2, t);
        for (size_t i = 0; i < params.size(); ++i) {
            dmat& factor = params[i].is_up ? params[i].lora->up : params[i].lora->down;
            const auto& g = grads.at(params[i].lora);
            const dmat& grad = params[i].is_up ? g.first : g.second;
            if (grad.numel() == 0) continue;  // untouched this pass
            for (size_t j = 0; j < factor.v.size(); ++j) {
                double gj = grad.v[j];
                adam_m[i][j] = spec.beta1 * adam_m[i][j] + (1.0 - spec.beta1) * gj;
                adam_v[i][j] = spec.beta2 * adam_v[i][j] + (1.0 - spec.beta2) * gj * gj;
                double mhat = adam_m[i][j] / bc1;
                double vhat = adam_v[i][j] / bc2;
                factor.v[j] -= spec.learning_rate * mhat / (std::sqrt(vhat) + spec.epsilon);
            }
        }
    }

    {
        dmat out = forward_impl(model, latent, routing, nullptr, nullptr);
        report.final_loss = masked_mse(out, sample.target, mask);
    }
    report.adapter = export_adapters(model, spec.blocks_to_train);
    return report;
}

train_report train_blora(const toy_config& config, const synthetic_sample& sample,
                         const train_spec& spec) {
    toy_model model = build_toy_model(config);
    return train_blora(model, sample, spec);
}

grad_check_report grad_check(toy_model& model, const synthetic_sample& sample,
                             const std::set<int>& blocks, int sample_count, double h,
                             uint64_t seed) {
    if (model.config.token_dim > 8) fail_usage("grad_check expects a small config (token_dim <= 8)");
    dmat latent = training_latent(model.config, sample);
    rng prompt_stream = rng::derive(seed, "grad-check-prompt");
    std::vector<double> prompt(static_cast<size_t>(model.config.prompt_dim));
    for (double& x : prompt) x = prompt_stream.next_gaussian();
    prompt_routing routing;
    routing.default_embedding = prompt;
    std::vector<uint8_t> mask = crop_mask(model.config, false);

    // Analytic gradients for every attached adapter; only `blocks` may
    // receive nonzero values.
    std::vector<unit_cache> caches;
    dmat out = forward_impl(model, latent, routing, &caches, nullptr);
    grad_table grads = make_grad_table(model);
    backward_impl(model, caches, masked_mse_grad(out, sample.target, mask), blocks, grads);

    grad_check_report report;

    // Max |gradient| outside the trained blocks (must be exactly zero).
    for (int b = 0; b < kBlockCount; ++b) {
        if (blocks.count(b)) continue;
        for (toy_layer& layer : model.blocks[static_cast<size_t>(b)]) {
            for (attention_unit* unit : {&layer.self_attn, &layer.cross_attn}) {
                for (toy_lora& lora : unit->lora) {
                    if (!lora.present) continue;
                    const auto& g = grads.at(&lora);
                    for (const dmat* gm : {&g.first, &g.second}) {
                        for (double x : gm->v) {
                            report.max_abs_outside = std::max(report.max_abs_outside, std::abs(x));
                        }
                    }
                }
            }
        }
    }

    std::vector<param_slot> params = collect_params(model, blocks);
    struct flat_param {
        toy_lora* lora;
        bool is_up;
        size_t index;
    };
    std::vector<flat_param> flat;
    for (const param_slot& p : params) {
        const dmat& factor = p.is_up ? p.lora->up : p.lora->down;
        for (size_t j = 0; j < factor.v.size(); ++j) flat.push_back({p.lora, p.is_up, j});
    }
    if (flat.empty()) fail_usage("grad_check: no adapter parameters in the requested blocks");

    rng pick = rng::derive(seed, "grad-check-pick");
    for (size_t i = flat.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(pick.next_u64() % (i + 1));
        std::swap(flat[i], flat[j]);
    }
    size_t n = std::min(static_cast<size_t>(sample_count), flat.size());

    auto loss_at = [&]() {
        dmat o = forward_impl(model, latent, routing, nullptr, nullptr);
        return masked_mse(o, sample.target, mask);
    };

    for (size_t i = 0; i < n; ++i) {
        dmat& factor = flat[i].is_up ? flat[i].lora->up : flat[i].lora->down;
        double saved = factor.v[flat[i].index];
        auto fd_at = [&](double step) {
            factor.v[flat[i].index] = saved + step;
            double lp = loss_at();
            factor.v[flat[i].index] = saved - step;
            double lm = loss_at();
            factor.v[flat[i].index] = saved;
            return (lp - lm) / (2.0 * step);
        };
        double fd = fd_at(h);
        double fd2 = fd_at(2.0 * h);
        // Richardson extrapolation of the two central differences cancels
        // the quadratic truncation term.
        double fd_rich = (4.0 * fd - fd2) / 3.0;
        const auto& g = grads.at(flat[i].lora);
        const dmat& grad = flat[i].is_up ? g.first : g.second;
        double analytic = grad.numel() ? grad.v[flat[i].index] : 0.0;
        double rel = std::abs(analytic - fd_rich) /
                     std::max({std::abs(analytic), std::abs(fd_rich), 1e-6});
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.fd_error_h += std::abs(analytic - fd);
        report.fd_error_2h += std::abs(analytic - fd2);
        ++report.checked;
    }
    return report;
}

pair_grid_result pair_grid(const toy_config& config, const synthetic_sample& sample,
                           const train_spec& spec, int thread_count) {
    config.validate();
    {
        train_spec probe = spec;
        probe.blocks_to_train = {0};
        probe.validate(config);
    }
    std::vector<std::pair<int, int>> cells;
    for (int i = 0; i < kBlockCount; ++i) {
        for (int j = i; j < kBlockCount; ++j) cells.push_back({i, j});
    }

    pair_grid_result result;
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            size_t idx = next.fetch_add(1);
            if (idx >= cells.size()) return;
            auto [i, j] = cells[idx];
            train_spec cell_spec = spec;
            cell_spec.blocks_to_train = {i, j};
            train_report r = train_blora(config, sample, cell_spec);
            result.final_loss[static_cast<size_t>(i)][static_cast<size_t>(j)] = r.final_loss;
            result.final_loss[static_cast<size_t>(j)][static_cast<size_t>(i)] = r.final_loss;
            result.initial_loss[static_cast<size_t>(i)][static_cast<size_t>(j)] = r.initial_loss;
            result.initial_loss[static_cast<size_t>(j)][static_cast<size_t>(i)] = r.initial_loss;
        }
    };

    int threads = thread_count > 0 ? thread_count
                                   : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    threads = std::min<int>(threads, static_cast<int>(cells.size()));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return result;
}

} // namespace blora
