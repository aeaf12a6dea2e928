// blora: command-line front end over the C API in blora.h.
//
// Exit codes: 0 success, 1 usage error, 2 input-format error, 3 invariant
// violation. Every failure prints one line: "error: <kind>: <reason>".

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "blora.h"

namespace {

const char* status_name(blora_status status) {
    switch (status) {
        case BLORA_OK: return "ok";
        case BLORA_ERR_USAGE: return "usage";
        case BLORA_ERR_FORMAT: return "format";
        case BLORA_ERR_INVARIANT: return "invariant";
        case BLORA_ERR_INTERNAL: return "internal";
    }
    return "internal";
}

[[noreturn]] void die(blora_status status) {
    std::cerr << "error: " << status_name(status) << ": " << blora_last_error() << "\n";
    std::exit(static_cast<int>(status));
}

void check(blora_status status) {
    if (status != BLORA_OK) die(status);
}

struct adapter_handle {
    blora_adapter* ptr = nullptr;
    ~adapter_handle() { blora_adapter_free(ptr); }
};

struct owned_string {
    char* ptr = nullptr;
    ~owned_string() { blora_string_free(ptr); }
    std::string str() const { return ptr ? ptr : ""; }
};

adapter_handle open_adapter(const std::string& path) {
    adapter_handle h;
    check(blora_adapter_open(path.c_str(), &h.ptr));
    return h;
}

std::string file_digest(const std::string& path) {
    owned_string s;
    check(blora_file_digest(path.c_str(), &s.ptr));
    return s.str();
}

// Adapter inputs are digested through their loaded form, so equivalent
// checkpoints under either naming scheme share a digest.
std::string adapter_digest(const blora_adapter* adapter) {
    owned_string s;
    check(blora_adapter_digest(adapter, &s.ptr));
    return s.str();
}

// Inputs are recorded as (role, content digest) pairs; content digests are
// canonical, so equivalent inputs under different names or naming schemes
// leave identical manifests.
std::string build_manifest(const std::string& command,
                           const std::vector<std::pair<std::string, std::string>>& inputs,
                           const std::map<std::string, std::string>& flags) {
    nlohmann::json doc;
    doc["tool"] = "blora";
    doc["version"] = blora_version();
    doc["command"] = command;
    nlohmann::json in = nlohmann::json::array();
    for (const auto& [role, digest] : inputs) in.push_back({{"role", role}, {"digest", digest}});
    doc["inputs"] = std::move(in);
    doc["flags"] = flags;
    return doc.dump();
}

void save_with_manifest(blora_adapter* adapter, const std::string& manifest,
                        const std::string& out_path) {
    check(blora_adapter_set_metadata(adapter, "blora.manifest", manifest.c_str()));
    check(blora_adapter_save(adapter, out_path.c_str()));
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text << "\n";
        return;
    }
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) {
        std::cerr << "error: format: cannot write \"" << out_path << "\"\n";
        std::exit(2);
    }
    out << text << "\n";
}

std::string default_out(const std::string& input, const std::string& suffix) {
    std::string stem = input;
    const std::string ext = ".safetensors";
    if (stem.size() > ext.size() && stem.compare(stem.size() - ext.size(), ext.size(), ext) == 0) {
        stem.resize(stem.size() - ext.size());
    }
    return stem + suffix + ext;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

void print_inspect_summary(const std::string& json_text) {
    nlohmann::json doc = nlohmann::json::parse(json_text);
    std::cout << "stems: " << doc["total_stems"] << "  tensors: " << doc["total_tensors"] << "\n";
    for (auto& [name, entry] : doc["blocks"].items()) {
        std::cout << "  " << name << ": " << entry["stems"] << " stems, " << entry["tensors"]
                  << " tensors, ranks " << entry["ranks"].dump() << ", dtypes "
                  << entry["dtypes"].dump() << "\n";
    }
    if (!doc["out_of_topology"].empty()) {
        std::cout << "out-of-topology keys:\n";
        for (auto& key : doc["out_of_topology"]) std::cout << "  " << key.get<std::string>() << "\n";
    }
    if (!doc["metadata"].empty()) {
        std::cout << "metadata:\n";
        for (auto& [k, v] : doc["metadata"].items()) {
            std::cout << "  " << k << " = " << v.get<std::string>() << "\n";
        }
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"blora: block-indexed low-rank adapter toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    uint64_t seed = 0;
    bool json_output = false;
    std::string out_path;
    app.add_option("--seed", seed, "global seed")->capture_default_str();
    app.add_flag("--json", json_output, "emit JSON instead of a summary");
    app.add_option("--out", out_path, "output path (file commands and reports)");

    // ---- inspect ----
    auto* cmd_inspect = app.add_subcommand("inspect", "per-block contents of an adapter file");
    std::string inspect_file;
    cmd_inspect->add_option("file", inspect_file, "adapter .safetensors")->required();

    // ---- keymap ----
    auto* cmd_keymap = app.add_subcommand("keymap", "export the block <-> key mapping table");
    std::string keymap_scheme = "dot";
    cmd_keymap->add_option("--scheme", keymap_scheme, "dot or kohya")->capture_default_str();

    // ---- extract ----
    auto* cmd_extract = app.add_subcommand("extract", "extract one block as a B-LoRA");
    std::string extract_file, extract_block, extract_role = "content";
    cmd_extract->add_option("file", extract_file)->required();
    cmd_extract->add_option("--block", extract_block, "W0..W7 or a diffusers path")->required();
    cmd_extract->add_option("--role", extract_role, "content or style")->capture_default_str();

    // ---- combine ----
    auto* cmd_combine = app.add_subcommand("combine", "union of a content and a style B-LoRA");
    std::string combine_content, combine_style;
    cmd_combine->add_option("content", combine_content)->required();
    cmd_combine->add_option("style", combine_style)->required();

    // ---- scale ----
    auto* cmd_scale = app.add_subcommand("scale", "fold a strength alpha into an adapter");
    std::string scale_file;
    double scale_alpha = 1.0;
    cmd_scale->add_option("file", scale_file)->required();
    cmd_scale->add_option("--alpha", scale_alpha, "strength multiplier")->required();

    // ---- merge ----
    auto* cmd_merge = app.add_subcommand("merge", "apply an adapter onto dense base weights");
    std::string merge_base, merge_adapter;
    double merge_alpha = 1.0;
    cmd_merge->add_option("base", merge_base)->required();
    cmd_merge->add_option("adapter", merge_adapter)->required();
    cmd_merge->add_option("--alpha", merge_alpha, "merge strength (W = W0 + alpha dW)")
        ->capture_default_str();

    // ---- toy params shared by train-toy / pair-grid ----
    auto add_toy_options = [](CLI::App* cmd, blora_toy_params& p, std::string& blocks,
                              std::string& prompt) {
        cmd->add_option("--steps", p.steps, "optimization steps");
        cmd->add_option("--lr", p.learning_rate, "learning rate");
        cmd->add_option("--rank", p.rank, "adapter rank");
        cmd->add_option("--token-dim", p.token_dim, "toy model width");
        cmd->add_option("--heads", p.head_count, "attention heads");
        cmd->add_option("--grid-side", p.grid_side, "latent grid side");
        cmd->add_option("--prompt-dim", p.prompt_dim, "prompt embedding width");
        cmd->add_option("--content-label", p.content_label, "synthetic content label");
        cmd->add_option("--style-label", p.style_label, "synthetic style label");
        cmd->add_option("--sample-seed", p.sample_seed, "synthetic sample seed");
        cmd->add_option("--blocks", blocks, "blocks to train, e.g. W4,W5");
        cmd->add_option("--prompt", prompt, "training prompt text");
        cmd->add_flag("--center-crop", p.center_crop, "crop the loss to the central window");
    };

    auto* cmd_train = app.add_subcommand("train-toy", "train B-LoRAs on a synthetic sample");
    blora_toy_params train_params{};
    train_params.steps = 1000;
    train_params.learning_rate = 5e-5;
    train_params.rank = 4;
    std::string train_blocks = "W4,W5", train_prompt = "A [v]", train_write_base;
    add_toy_options(cmd_train, train_params, train_blocks, train_prompt);
    cmd_train->add_option("--write-base", train_write_base,
                          "also write the dense frozen base weights to this path");

    auto* cmd_grid = app.add_subcommand("pair-grid", "train every block pair, report losses");
    blora_toy_params grid_params{};
    grid_params.steps = 1000;
    grid_params.learning_rate = 5e-5;
    grid_params.rank = 4;
    std::string grid_blocks = "W4,W5", grid_prompt = "A [v]";
    int grid_threads = 0;
    add_toy_options(cmd_grid, grid_params, grid_blocks, grid_prompt);
    cmd_grid->add_option("--threads", grid_threads, "worker threads (0 = auto)");

    // ---- probe ----
    auto* cmd_probe = app.add_subcommand("probe", "prompt-injection attribution per block");
    blora_probe_params probe_params{};
    std::string probe_adapter;
    cmd_probe->add_option("--pairs", probe_params.pairs, "prompt pairs per family");
    cmd_probe->add_option("--model-seed", probe_params.model_seed, "toy base model seed");
    cmd_probe->add_option("--token-dim", probe_params.token_dim, "toy model width");
    cmd_probe->add_option("--heads", probe_params.head_count, "attention heads");
    cmd_probe->add_option("--grid-side", probe_params.grid_side, "latent grid side");
    cmd_probe->add_option("--prompt-dim", probe_params.prompt_dim, "prompt embedding width");
    cmd_probe->add_option("--adapter", probe_adapter, "adapter to attach before probing");
    cmd_probe->add_option("--alpha", probe_params.adapter_alpha, "adapter strength");

    // ---- eval ----
    auto* cmd_eval = app.add_subcommand("eval", "style/content cosine scores of embeddings");
    std::string eval_embeddings, eval_outputs, eval_style_refs, eval_content_refs;
    cmd_eval->add_option("--embeddings", eval_embeddings, "safetensors of labeled vectors")->required();
    cmd_eval->add_option("--output", eval_outputs, "output labels (comma separated)")->required();
    cmd_eval->add_option("--style-ref", eval_style_refs, "style reference labels")->required();
    cmd_eval->add_option("--content-ref", eval_content_refs, "content reference labels")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: usage: " << e.what() << "\n";
        return 1;
    }

    if (cmd_inspect->parsed()) {
        adapter_handle adapter = open_adapter(inspect_file);
        owned_string json_text;
        check(blora_adapter_inspect_json(adapter.ptr, &json_text.ptr));
        if (json_output || !out_path.empty()) {
            emit(json_text.str(), out_path);
        } else {
            print_inspect_summary(json_text.str());
        }
        return 0;
    }

    if (cmd_keymap->parsed()) {
        owned_string json_text;
        check(blora_keymap_json(keymap_scheme.c_str(), &json_text.ptr));
        emit(json_text.str(), out_path);
        return 0;
    }

    if (cmd_extract->parsed()) {
        adapter_handle adapter = open_adapter(extract_file);
        adapter_handle extracted;
        check(blora_adapter_extract(adapter.ptr, extract_block.c_str(), extract_role.c_str(),
                                    &extracted.ptr));
        std::string out = out_path.empty()
                              ? default_out(extract_file, "." + extract_block + "." + extract_role)
                              : out_path;
        std::string manifest = build_manifest(
            "extract", {{"source", adapter_digest(adapter.ptr)}},
            {{"block", extract_block}, {"role", extract_role}});
        save_with_manifest(extracted.ptr, manifest, out);
        std::cout << "wrote " << out << "\n";
        return 0;
    }

    if (cmd_combine->parsed()) {
        adapter_handle content = open_adapter(combine_content);
        adapter_handle style = open_adapter(combine_style);
        adapter_handle combined;
        check(blora_adapter_combine(content.ptr, style.ptr, &combined.ptr));
        std::string out = out_path.empty() ? "combined.safetensors" : out_path;
        std::string manifest = build_manifest("combine",
                                              {{"content", adapter_digest(content.ptr)},
                                               {"style", adapter_digest(style.ptr)}},
                                              {});
        save_with_manifest(combined.ptr, manifest, out);
        std::cout << "wrote " << out << "\n";
        return 0;
    }

    if (cmd_scale->parsed()) {
        adapter_handle adapter = open_adapter(scale_file);
        adapter_handle scaled;
        check(blora_adapter_scale(adapter.ptr, scale_alpha, &scaled.ptr));
        std::string out = out_path.empty() ? default_out(scale_file, ".scaled") : out_path;
        std::string manifest = build_manifest("scale", {{"source", adapter_digest(adapter.ptr)}},
                                              {{"alpha", fmt_double(scale_alpha)}});
        save_with_manifest(scaled.ptr, manifest, out);
        std::cout << "wrote " << out << "\n";
        return 0;
    }

    if (cmd_merge->parsed()) {
        adapter_handle adapter = open_adapter(merge_adapter);
        std::string out = out_path.empty() ? "merged.safetensors" : out_path;
        std::string manifest = build_manifest("merge",
                                              {{"base", file_digest(merge_base)},
                                               {"adapter", adapter_digest(adapter.ptr)}},
                                              {{"alpha", fmt_double(merge_alpha)}});
        check(blora_merge_files(merge_base.c_str(), adapter.ptr, merge_alpha, manifest.c_str(),
                                out.c_str()));
        std::cout << "wrote " << out << "\n";
        return 0;
    }

    if (cmd_train->parsed()) {
        train_params.seed = seed;
        train_params.blocks = train_blocks.c_str();
        train_params.prompt = train_prompt.c_str();
        adapter_handle adapter;
        owned_string report;
        check(blora_train_toy(&train_params, &adapter.ptr, &report.ptr));
        std::map<std::string, std::string> flags = {
            {"steps", std::to_string(train_params.steps)},
            {"lr", fmt_double(train_params.learning_rate)},
            {"rank", std::to_string(train_params.rank)},
            {"blocks", train_blocks},
            {"prompt", train_prompt},
            {"seed", std::to_string(seed)},
            {"sample-seed", std::to_string(train_params.sample_seed)},
            {"content-label", std::to_string(train_params.content_label)},
            {"style-label", std::to_string(train_params.style_label)},
        };
        std::string manifest = build_manifest("train-toy", {}, flags);
        std::string out = out_path.empty() ? "adapter.safetensors" : out_path;
        save_with_manifest(adapter.ptr, manifest, out);
        if (!train_write_base.empty()) {
            check(blora_toy_base_weights(&train_params, manifest.c_str(), train_write_base.c_str()));
        }
        if (json_output) {
            std::cout << report.str() << "\n";
        } else {
            nlohmann::json doc = nlohmann::json::parse(report.str());
            std::cout << "trained blocks " << train_blocks << " for " << doc["steps"]
                      << " steps (lr " << doc["learning_rate"].get<double>() << ", rank "
                      << doc["rank"] << ")\n";
            std::cout << "loss " << doc["initial_loss"].get<double>() << " -> "
                      << doc["final_loss"].get<double>() << "\n";
            std::cout << "wrote " << out << "\n";
        }
        return 0;
    }

    if (cmd_grid->parsed()) {
        grid_params.seed = seed;
        grid_params.blocks = grid_blocks.c_str();
        grid_params.prompt = grid_prompt.c_str();
        owned_string json_text;
        check(blora_pair_grid_json(&grid_params, grid_threads, &json_text.ptr));
        emit(json_text.str(), out_path);
        return 0;
    }

    if (cmd_probe->parsed()) {
        probe_params.seed = seed;
        if (!probe_adapter.empty()) probe_params.adapter_path = probe_adapter.c_str();
        owned_string json_text;
        check(blora_probe_json(&probe_params, &json_text.ptr));
        emit(json_text.str(), out_path);
        return 0;
    }

    if (cmd_eval->parsed()) {
        owned_string json_text;
        check(blora_eval_json(eval_embeddings.c_str(), eval_outputs.c_str(),
                              eval_style_refs.c_str(), eval_content_refs.c_str(), &json_text.ptr));
        emit(json_text.str(), out_path);
        return 0;
    }

    std::cerr << "error: usage: no subcommand\n";
    return 1;
}
