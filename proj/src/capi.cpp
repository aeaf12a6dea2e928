#include "blora.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <set>
#include <sstream>
#include <vector>

#include "adapter.hpp"
#include "analysis.hpp"
#include "reports.hpp"
#include "safetensors.hpp"
#include "toynet.hpp"

struct blora_adapter {
    blora::lora_adapter impl;
};

namespace {

thread_local std::string g_last_error;

blora_status to_status(const blora::error& e) {
    switch (e.kind()) {
        case blora::error_kind::usage: return BLORA_ERR_USAGE;
        case blora::error_kind::format: return BLORA_ERR_FORMAT;
        case blora::error_kind::invariant: return BLORA_ERR_INVARIANT;
        case blora::error_kind::internal: return BLORA_ERR_INTERNAL;
    }
    return BLORA_ERR_INTERNAL;
}

template <typename Fn>
blora_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return BLORA_OK;
    } catch (const blora::error& e) {
        g_last_error = e.what();
        return to_status(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return BLORA_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return BLORA_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void require(bool ok, const char* what) {
    if (!ok) blora::fail_usage(what);
}

std::set<int> parse_block_list(const char* text) {
    std::set<int> blocks;
    std::stringstream ss(text ? text : "W4,W5");
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) blocks.insert(blora::parse_block_name(item));
    }
    if (blocks.empty()) blora::fail_usage("empty block list");
    return blocks;
}

std::vector<std::string> parse_csv(const char* text) {
    std::vector<std::string> out;
    if (!text) return out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

blora::toy_config config_from(const blora_toy_params& p) {
    blora::toy_config config;
    config.seed = p.seed;
    if (p.token_dim > 0) config.token_dim = p.token_dim;
    if (p.head_count > 0) config.head_count = p.head_count;
    if (p.grid_side > 0) config.grid_side = p.grid_side;
    if (p.prompt_dim > 0) config.prompt_dim = p.prompt_dim;
    return config;
}

blora::train_spec spec_from(const blora_toy_params& p, const blora::toy_config& config) {
    blora::train_spec spec;
    if (p.steps > 0) spec.steps = p.steps;
    if (p.learning_rate > 0.0) spec.learning_rate = p.learning_rate;
    if (p.rank > 0) spec.rank = p.rank;
    spec.blocks_to_train = parse_block_list(p.blocks);
    spec.center_crop = p.center_crop != 0;
    // The training prompt enters as a deterministic embedding of the prompt
    // string; the stub text encoder uses a fixed seed so identical strings
    // embed identically across runs. Embeddings are unit vectors, so they
    // carry a sqrt(dim) gain into the model to keep per-element magnitudes
    // O(1) like the latent channels.
    blora::stub_embedder text_encoder(0, config.prompt_dim);
    spec.prompt = text_encoder.embed_text(p.prompt ? p.prompt : "A [v]");
    double gain = std::sqrt(static_cast<double>(config.prompt_dim));
    for (double& x : spec.prompt) x *= gain;
    return spec;
}

} // namespace

extern "C" {

const char* blora_version(void) { return blora::kToolVersion; }

const char* blora_last_error(void) { return g_last_error.c_str(); }

void blora_string_free(char* str) { std::free(str); }

blora_status blora_adapter_open(const char* path, blora_adapter** out) {
    return guarded([&] {
        require(path && out, "null argument");
        auto handle = std::make_unique<blora_adapter>();
        handle->impl = blora::load_adapter(blora::read_tensor_file(path));
        *out = handle.release();
    });
}

blora_status blora_adapter_save(const blora_adapter* adapter, const char* path) {
    return guarded([&] {
        require(adapter && path, "null argument");
        blora::write_tensor_file(blora::save_adapter(adapter->impl), path);
    });
}

void blora_adapter_free(blora_adapter* adapter) { delete adapter; }

blora_status blora_adapter_inspect_json(const blora_adapter* adapter, char** out_json) {
    return guarded([&] {
        require(adapter && out_json, "null argument");
        *out_json = dup_string(blora::inspect_json(adapter->impl));
    });
}

blora_status blora_adapter_digest(const blora_adapter* adapter, char** out_digest) {
    return guarded([&] {
        require(adapter && out_digest, "null argument");
        *out_digest = dup_string(blora::content_digest(blora::save_adapter(adapter->impl)));
    });
}

blora_status blora_file_digest(const char* path, char** out_digest) {
    return guarded([&] {
        require(path && out_digest, "null argument");
        *out_digest = dup_string(blora::content_digest(blora::read_tensor_file(path)));
    });
}

blora_status blora_adapter_set_metadata(blora_adapter* adapter, const char* key, const char* value) {
    return guarded([&] {
        require(adapter && key && value, "null argument");
        adapter->impl.metadata[key] = value;
    });
}

blora_status blora_adapter_extract(const blora_adapter* adapter, const char* block,
                                   const char* role, blora_adapter** out) {
    return guarded([&] {
        require(adapter && block && role && out, "null argument");
        blora::b_lora extracted = blora::extract_blora(
            adapter->impl, blora::parse_block_name(block), blora::role_from_name(role));
        auto handle = std::make_unique<blora_adapter>();
        handle->impl = std::move(extracted.adapter);
        *out = handle.release();
    });
}

blora_status blora_adapter_combine(const blora_adapter* content, const blora_adapter* style,
                                   blora_adapter** out) {
    return guarded([&] {
        require(content && style && out, "null argument");
        blora::b_lora c = blora::as_blora(content->impl, blora::blora_role::content);
        blora::b_lora s = blora::as_blora(style->impl, blora::blora_role::style);
        auto handle = std::make_unique<blora_adapter>();
        handle->impl = blora::combine_bloras(c, s);
        *out = handle.release();
    });
}

blora_status blora_adapter_scale(const blora_adapter* adapter, double alpha, blora_adapter** out) {
    return guarded([&] {
        require(adapter && out, "null argument");
        auto handle = std::make_unique<blora_adapter>();
        handle->impl = blora::scale_adapter(adapter->impl, alpha);
        *out = handle.release();
    });
}

blora_status blora_merge_files(const char* base_path, const blora_adapter* adapter, double alpha,
                               const char* manifest_json, const char* out_path) {
    return guarded([&] {
        require(base_path && adapter && out_path, "null argument");
        blora::tensor_file base = blora::read_tensor_file(base_path);
        blora::tensor_file merged = blora::merge_adapter_into_weights(base, adapter->impl, alpha);
        if (manifest_json) merged.metadata["blora.manifest"] = manifest_json;
        blora::write_tensor_file(merged, out_path);
    });
}

blora_status blora_keymap_json(const char* scheme, char** out_json) {
    return guarded([&] {
        require(out_json, "null argument");
        std::string s = scheme ? scheme : "dot";
        blora::naming_scheme ns;
        if (s == "dot") {
            ns = blora::naming_scheme::dot;
        } else if (s == "kohya") {
            ns = blora::naming_scheme::kohya;
        } else {
            blora::fail_usage("unknown naming scheme \"" + s + "\" (expected dot or kohya)");
        }
        *out_json = dup_string(blora::keymap_json(ns));
    });
}

blora_status blora_train_toy(const blora_toy_params* params, blora_adapter** out_adapter,
                             char** out_report_json) {
    return guarded([&] {
        require(params && out_adapter, "null argument");
        blora::toy_config config = config_from(*params);
        blora::train_spec spec = spec_from(*params, config);
        blora::synthetic_sample sample =
            blora::make_sample(config, params->content_label, params->style_label, params->sample_seed);
        blora::train_report report = blora::train_blora(config, sample, spec);
        if (out_report_json) {
            *out_report_json = dup_string(blora::train_json(report, config, sample, spec));
        }
        auto handle = std::make_unique<blora_adapter>();
        handle->impl = std::move(report.adapter);
        *out_adapter = handle.release();
    });
}

blora_status blora_toy_base_weights(const blora_toy_params* params, const char* manifest_json,
                                    const char* out_path) {
    return guarded([&] {
        require(params && out_path, "null argument");
        blora::toy_config config = config_from(*params);
        blora::toy_model model = blora::build_toy_model(config);
        blora::tensor_file file;
        for (int b = 0; b < blora::kBlockCount; ++b) {
            const auto& layers = model.blocks[static_cast<size_t>(b)];
            for (size_t l = 0; l < layers.size(); ++l) {
                for (int u = 0; u < 2; ++u) {
                    const blora::attention_unit& unit =
                        (u == 0) ? layers[l].self_attn : layers[l].cross_attn;
                    const blora::dmat* weights[4] = {&unit.wq, &unit.wk, &unit.wv, &unit.wo};
                    for (int p = 0; p < 4; ++p) {
                        blora::layer_address addr;
                        addr.block = b;
                        addr.layer = static_cast<int>(l);
                        addr.kind = (u == 0) ? blora::attention_kind::self_attn
                                             : blora::attention_kind::cross_attn;
                        addr.proj = static_cast<blora::projection>(p);
                        file.add(blora::key_of_address(addr), blora::tensor_from_dmat(*weights[p]));
                    }
                }
            }
        }
        if (manifest_json) file.metadata["blora.manifest"] = manifest_json;
        blora::write_tensor_file(file, out_path);
    });
}

blora_status blora_pair_grid_json(const blora_toy_params* params, int thread_count,
                                  char** out_json) {
    return guarded([&] {
        require(params && out_json, "null argument");
        blora::toy_config config = config_from(*params);
        blora::train_spec spec = spec_from(*params, config);
        blora::synthetic_sample sample =
            blora::make_sample(config, params->content_label, params->style_label, params->sample_seed);
        blora::pair_grid_result grid = blora::pair_grid(config, sample, spec, thread_count);
        *out_json = dup_string(blora::pair_grid_json(grid, spec));
    });
}

blora_status blora_probe_json(const blora_probe_params* params, char** out_json) {
    return guarded([&] {
        require(params && out_json, "null argument");
        blora::toy_config config;
        config.seed = params->model_seed;
        if (params->token_dim > 0) config.token_dim = params->token_dim;
        if (params->head_count > 0) config.head_count = params->head_count;
        if (params->grid_side > 0) config.grid_side = params->grid_side;
        if (params->prompt_dim > 0) config.prompt_dim = params->prompt_dim;
        blora::toy_model model = blora::build_toy_model(config);
        if (params->adapter_path) {
            blora::lora_adapter adapter = blora::load_adapter(blora::read_tensor_file(params->adapter_path));
            blora::attach_adapter(model, adapter);
        }
        if (params->adapter_alpha > 0.0) model.adapter_alpha = params->adapter_alpha;

        int pairs = params->pairs > 0 ? params->pairs : 400;
        blora::probe_options options;
        options.seed = params->seed;
        options.content_pairs = blora::make_content_pairs(pairs, params->seed);
        options.style_pairs = blora::make_style_pairs(pairs, params->seed);
        blora::stub_embedder embed(params->seed, config.prompt_dim);
        blora::probe_report report = blora::probe_blocks(model, options, embed);
        *out_json = dup_string(blora::probe_json(report));
    });
}

blora_status blora_eval_json(const char* embeddings_path, const char* output_labels,
                             const char* style_ref_labels, const char* content_ref_labels,
                             char** out_json) {
    return guarded([&] {
        require(embeddings_path && output_labels && style_ref_labels && content_ref_labels && out_json,
                "null argument");
        blora::lookup_embedder embed = blora::load_embeddings(blora::read_tensor_file(embeddings_path));
        std::vector<std::string> outs = parse_csv(output_labels);
        std::vector<std::string> styles = parse_csv(style_ref_labels);
        std::vector<std::string> contents = parse_csv(content_ref_labels);
        if (outs.empty() || outs.size() != styles.size() || outs.size() != contents.size()) {
            blora::fail_usage("output/style/content label lists must be nonempty and equally long");
        }
        std::vector<blora::eval_entry> entries;
        for (size_t i = 0; i < outs.size(); ++i) {
            std::vector<double> o = embed.embed_text(outs[i]);
            std::vector<double> s = embed.embed_text(styles[i]);
            std::vector<double> c = embed.embed_text(contents[i]);
            entries.push_back(blora::eval_similarity(o, s, c));
        }
        *out_json = dup_string(blora::eval_json(blora::aggregate_eval(entries)));
    });
}

} // extern "C"
