#include "reports.hpp"

#include <cstdio>
#include <set>

#include <json.hpp>

#include "rng.hpp"

namespace blora {

using nlohmann::json;

std::string content_digest(const tensor_file& file) {
    std::vector<uint8_t> bytes = serialize_safetensors(file);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

std::string inspect_json(const lora_adapter& adapter) {
    json doc;
    doc["kind"] = "inspect";
    doc["metadata"] = adapter.metadata;

    struct block_stats {
        int stems = 0;
        int tensors = 0;
        std::set<int64_t> ranks;
        std::set<std::string> dtypes;
    };
    std::map<int, block_stats> blocks;
    json oot = json::array();
    int total_tensors = 0;

    for (const auto& [stem, pair] : adapter.pairs) {
        int tensors = 2 + (pair.network_alpha ? 1 : 0);
        total_tensors += tensors;
        auto b = find_block(stem);
        if (!b) {
            oot.push_back(stem);
            continue;
        }
        block_stats& s = blocks[*b];
        s.stems += 1;
        s.tensors += tensors;
        s.ranks.insert(pair.rank());
        s.dtypes.insert(dtype_name(pair.up.storage_dtype()));
        s.dtypes.insert(dtype_name(pair.down.storage_dtype()));
    }

    json jblocks = json::object();
    for (const auto& [b, s] : blocks) {
        json entry;
        entry["stems"] = s.stems;
        entry["tensors"] = s.tensors;
        entry["ranks"] = s.ranks;
        entry["dtypes"] = s.dtypes;
        jblocks[block_name(b)] = std::move(entry);
    }
    doc["blocks"] = std::move(jblocks);
    doc["out_of_topology"] = std::move(oot);
    doc["total_stems"] = adapter.pairs.size();
    doc["total_tensors"] = total_tensors;
    return doc.dump();
}

static json family_json(const probe_family_stats& stats, const std::vector<int>& blocks) {
    json mean = json::object(), stddev = json::object();
    for (int b : blocks) {
        mean[block_name(b)] = stats.mean[static_cast<size_t>(b)];
        stddev[block_name(b)] = stats.stddev[static_cast<size_t>(b)];
    }
    json fam;
    fam["mean"] = std::move(mean);
    fam["std"] = std::move(stddev);
    fam["argmax"] = block_name(stats.argmax_block);
    return fam;
}

std::string probe_json(const probe_report& report) {
    json doc;
    doc["kind"] = "probe";
    json blocks = json::array();
    for (int b : report.probed_blocks) blocks.push_back(block_name(b));
    doc["blocks"] = std::move(blocks);
    doc["pair_count"] = {{"content", report.content_pair_count},
                         {"style", report.style_pair_count}};
    json families = json::object();
    if (report.content_pair_count > 0) {
        families["content"] = family_json(report.content, report.probed_blocks);
    }
    if (report.style_pair_count > 0) {
        families["style"] = family_json(report.style, report.probed_blocks);
    }
    doc["families"] = std::move(families);
    return doc.dump();
}

std::string eval_json(const eval_report& report) {
    json doc;
    doc["kind"] = "eval";
    doc["count"] = report.count;
    doc["style"] = {{"mean", report.style_mean}, {"std", report.style_std}};
    doc["content"] = {{"mean", report.content_mean}, {"std", report.content_std}};
    doc["reference"] = {
        {"style", {{"mean", kReferenceStyleMean}, {"std", kReferenceStyleStd}}},
        {"content", {{"mean", kReferenceContentMean}, {"std", kReferenceContentStd}}},
        {"note", "B-LoRA scores with real DINO ViT-B/8 embeddings; "
                 "not reproducible with stub embedders"},
    };
    return doc.dump();
}

std::string pair_grid_json(const pair_grid_result& grid, const train_spec& spec) {
    json doc;
    doc["kind"] = "pair_grid";
    doc["steps"] = spec.steps;
    doc["learning_rate"] = spec.learning_rate;
    doc["rank"] = spec.rank;
    json final_loss = json::array(), initial_loss = json::array();
    double best = 1e300;
    int bi = 0, bj = 0;
    for (int i = 0; i < kBlockCount; ++i) {
        json frow = json::array(), irow = json::array();
        for (int j = 0; j < kBlockCount; ++j) {
            double f = grid.final_loss[static_cast<size_t>(i)][static_cast<size_t>(j)];
            frow.push_back(f);
            irow.push_back(grid.initial_loss[static_cast<size_t>(i)][static_cast<size_t>(j)]);
            if (f < best) {
                best = f;
                bi = i;
                bj = j;
            }
        }
        final_loss.push_back(std::move(frow));
        initial_loss.push_back(std::move(irow));
    }
    doc["final_loss"] = std::move(final_loss);
    doc["initial_loss"] = std::move(initial_loss);
    doc["best_cell"] = {block_name(std::min(bi, bj)), block_name(std::max(bi, bj))};
    return doc.dump();
}

std::string train_json(const train_report& report, const toy_config& config,
                       const synthetic_sample& sample, const train_spec& spec) {
    json doc;
    doc["kind"] = "train";
    doc["steps"] = spec.steps;
    doc["learning_rate"] = spec.learning_rate;
    doc["rank"] = spec.rank;
    json blocks = json::array();
    for (int b : spec.blocks_to_train) blocks.push_back(block_name(b));
    doc["blocks"] = std::move(blocks);
    doc["seed"] = config.seed;
    doc["sample"] = {{"content_label", sample.content_label},
                     {"style_label", sample.style_label},
                     {"seed", sample.seed}};
    doc["initial_loss"] = report.initial_loss;
    doc["final_loss"] = report.final_loss;
    doc["center_crop"] = spec.center_crop;
    return doc.dump();
}

} // namespace blora
