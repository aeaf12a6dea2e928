#include "analysis.hpp"

#include <algorithm>
#include <cmath>

namespace blora {

namespace {

std::vector<double> normalized(std::vector<double> v, const std::string& what) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm == 0.0) fail_invariant(what + " is a zero vector");
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

uint64_t label_hash(const std::string& label) {
    return fnv1a64(label.data(), label.size());
}

} // namespace

stub_embedder::stub_embedder(uint64_t seed, int dimension)
    : seed_(seed), dimension_(dimension) {
    if (dimension < 2) fail_usage("stub embedder dimension must be >= 2");
}

std::vector<double> stub_embedder::embed_text(const std::string& label) const {
    rng stream = rng::derive(seed_, "stub-text", label_hash(label));
    std::vector<double> v(static_cast<size_t>(dimension_));
    for (double& x : v) x = stream.next_gaussian();
    return normalized(std::move(v), "text embedding of \"" + label + "\"");
}

const dmat& stub_embedder::codec(int token_dim) const {
    std::lock_guard<std::mutex> lock(codec_mutex_);
    auto it = codecs_.find(token_dim);
    if (it != codecs_.end()) return it->second;
    if (dimension_ > token_dim) {
        fail_usage("stub embedder dimension " + std::to_string(dimension_) +
                   " exceeds the grid channel width " + std::to_string(token_dim));
    }
    // Orthonormal rows via Gram-Schmidt over seeded Gaussian draws.
    rng stream = rng::derive(seed_, "stub-codec", static_cast<uint64_t>(token_dim));
    dmat u(dimension_, token_dim);
    for (int64_t r = 0; r < u.rows; ++r) {
        for (int64_t c = 0; c < u.cols; ++c) u.at(r, c) = stream.next_gaussian();
        for (int64_t p = 0; p < r; ++p) {
            double dot = 0.0;
            for (int64_t c = 0; c < u.cols; ++c) dot += u.at(r, c) * u.at(p, c);
            for (int64_t c = 0; c < u.cols; ++c) u.at(r, c) -= dot * u.at(p, c);
        }
        double norm = 0.0;
        for (int64_t c = 0; c < u.cols; ++c) norm += u.at(r, c) * u.at(r, c);
        norm = std::sqrt(norm);
        for (int64_t c = 0; c < u.cols; ++c) u.at(r, c) /= norm;
    }
    return codecs_.emplace(token_dim, std::move(u)).first->second;
}

std::vector<double> stub_embedder::embed_image(const dmat& grid) const {
    const dmat& u = codec(static_cast<int>(grid.cols));
    std::vector<double> pooled(static_cast<size_t>(grid.cols), 0.0);
    for (int64_t t = 0; t < grid.rows; ++t) {
        for (int64_t c = 0; c < grid.cols; ++c) pooled[static_cast<size_t>(c)] += grid.at(t, c);
    }
    for (double& x : pooled) x /= static_cast<double>(grid.rows);
    std::vector<double> v(static_cast<size_t>(dimension_), 0.0);
    for (int64_t r = 0; r < u.rows; ++r) {
        double acc = 0.0;
        for (int64_t c = 0; c < u.cols; ++c) acc += pooled[static_cast<size_t>(c)] * u.at(r, c);
        v[static_cast<size_t>(r)] = acc;
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm < 1e-24) {  // featureless grid: fixed fallback direction
        std::fill(v.begin(), v.end(), 0.0);
        v[0] = 1.0;
        return v;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

dmat stub_embedder::encode_grid(const std::string& label, int tokens, int token_dim) const {
    const dmat& u = codec(token_dim);
    std::vector<double> e = embed_text(label);
    dmat grid(tokens, token_dim);
    for (int64_t t = 0; t < tokens; ++t) {
        for (int64_t c = 0; c < token_dim; ++c) {
            double acc = 0.0;
            for (int64_t r = 0; r < u.rows; ++r) acc += e[static_cast<size_t>(r)] * u.at(r, c);
            grid.at(t, c) = acc;
        }
    }
    return grid;
}

lookup_embedder::lookup_embedder(const tensor_file& file) {
    for (const auto& [name, entry] : file.entries) {
        tensor t = file.load(name);
        if (t.rank() != 1) {
            fail_format("embedding \"" + name + "\" must be a 1-D vector, got " + t.shape_str());
        }
        if (dimension_ == 0) {
            dimension_ = static_cast<int>(t.dim(0));
        } else if (static_cast<int>(t.dim(0)) != dimension_) {
            fail_format("ragged embedding dimensions: \"" + name + "\" has " +
                        std::to_string(t.dim(0)) + ", expected " + std::to_string(dimension_));
        }
        std::vector<double> v(t.values().begin(), t.values().end());
        table_[name] = normalized(std::move(v), "embedding \"" + name + "\"");
    }
    if (table_.empty()) fail_format("embedding file holds no vectors");
}

std::vector<double> lookup_embedder::embed_text(const std::string& label) const {
    auto it = table_.find(label);
    if (it == table_.end()) fail_usage("no embedding for label \"" + label + "\"");
    return it->second;
}

std::vector<double> lookup_embedder::embed_image(const dmat&) const {
    fail_usage("lookup embedder has no image encoder; precompute image embeddings externally");
}

std::vector<std::string> lookup_embedder::labels() const {
    std::vector<std::string> out;
    for (const auto& [name, v] : table_) out.push_back(name);
    return out;
}

lookup_embedder load_embeddings(const tensor_file& file) {
    return lookup_embedder(file);
}

double clip_score(std::span<const double> image_embedding, std::span<const double> text_embedding) {
    return cosine_sim(image_embedding, text_embedding);
}

namespace {

void probe_family(const toy_model& model,
                  const std::vector<std::pair<std::string, std::string>>& pairs,
                  const std::vector<int>& blocks, uint64_t seed, uint64_t family_salt,
                  bool allow_identical, const embedder& embed, probe_family_stats& stats) {
    std::array<double, kBlockCount> sum{}, sumsq{};
    for (size_t p = 0; p < pairs.size(); ++p) {
        const auto& [base_label, injected_label] = pairs[p];
        if (base_label == injected_label && !allow_identical) {
            fail_usage("probe pairs must satisfy p != p_hat (\"" + base_label + "\")");
        }
        std::vector<double> base = embed.embed_text(base_label);
        std::vector<double> injected = embed.embed_text(injected_label);
        if (static_cast<int>(base.size()) != model.config.prompt_dim) {
            fail_usage("embedder dimension must equal prompt_dim for probing");
        }
        // Latent keyed by pair content, so per-block means are invariant
        // under pair reordering.
        std::string pair_key = base_label + "\x1f" + injected_label;
        dmat latent = generation_latent(
            model.config,
            rng::derive(seed, "probe-latent", family_salt, fnv1a64(pair_key.data(), pair_key.size()))
                .next_u64());
        for (int b : blocks) {
            prompt_routing routing;
            routing.default_embedding = base;
            routing.overrides[b] = injected;
            dmat image = toy_forward(model, latent, routing);
            double score = clip_score(embed.embed_image(image), injected);
            sum[static_cast<size_t>(b)] += score;
            sumsq[static_cast<size_t>(b)] += score * score;
        }
    }
    double n = static_cast<double>(pairs.size());
    double best = -2.0;
    for (int b : blocks) {
        double mean = sum[static_cast<size_t>(b)] / n;
        double var = std::max(0.0, sumsq[static_cast<size_t>(b)] / n - mean * mean);
        stats.mean[static_cast<size_t>(b)] = mean;
        stats.stddev[static_cast<size_t>(b)] = std::sqrt(var);
        if (mean > best) {
            best = mean;
            stats.argmax_block = b;
        }
    }
}

} // namespace

probe_report probe_blocks(const toy_model& model, const probe_options& options,
                          const embedder& embed) {
    if (options.content_pairs.empty() && options.style_pairs.empty()) {
        fail_usage("probe needs at least one prompt pair");
    }
    for (int b : options.blocks) {
        if (b < 0 || b >= kBlockCount) fail_usage("probed block out of range: " + std::to_string(b));
    }
    probe_report report;
    report.probed_blocks = options.blocks;
    report.content_pair_count = static_cast<int>(options.content_pairs.size());
    report.style_pair_count = static_cast<int>(options.style_pairs.size());
    if (!options.content_pairs.empty()) {
        probe_family(model, options.content_pairs, options.blocks, options.seed, 0,
                     options.allow_identical_pairs, embed, report.content);
    }
    if (!options.style_pairs.empty()) {
        probe_family(model, options.style_pairs, options.blocks, options.seed, 1,
                     options.allow_identical_pairs, embed, report.style);
    }
    return report;
}

eval_entry eval_similarity(std::span<const double> output_embedding,
                           std::span<const double> style_ref_embedding,
                           std::span<const double> content_ref_embedding) {
    eval_entry e;
    e.style_score = clip_score(output_embedding, style_ref_embedding);
    e.content_score = clip_score(output_embedding, content_ref_embedding);
    return e;
}

eval_report aggregate_eval(const std::vector<eval_entry>& entries) {
    if (entries.empty()) fail_usage("eval needs at least one entry");
    eval_report r;
    r.count = static_cast<int>(entries.size());
    double n = static_cast<double>(entries.size());
    double ssum = 0, ssq = 0, csum = 0, csq = 0;
    for (const eval_entry& e : entries) {
        ssum += e.style_score;
        ssq += e.style_score * e.style_score;
        csum += e.content_score;
        csq += e.content_score * e.content_score;
    }
    r.style_mean = ssum / n;
    r.style_std = std::sqrt(std::max(0.0, ssq / n - r.style_mean * r.style_mean));
    r.content_mean = csum / n;
    r.content_std = std::sqrt(std::max(0.0, csq / n - r.content_mean * r.content_mean));
    return r;
}

const std::vector<std::string>& object_labels() {
    static const std::vector<std::string> labels = {
        "cat",     "dog",      "bird",   "horse",  "fish",   "rabbit", "tiger",  "fox",
        "bear",    "lion",     "owl",    "duck",   "frog",   "turtle", "monkey", "elephant",
        "car",     "bicycle",  "guitar", "house",  "tree",   "flower", "boat",   "airplane",
        "train",   "chair",    "table",  "lamp",   "cup",    "book",   "clock",  "backpack",
    };
    return labels;
}

const std::vector<std::string>& style_color_labels() {
    static const std::vector<std::string> labels = {
        "red",  "blue",  "green",   "yellow", "orange", "purple", "pink", "brown",
        "black", "white", "gray",   "cyan",   "magenta", "teal",  "gold", "silver",
    };
    return labels;
}

static std::string pick(const std::vector<std::string>& pool, rng& stream) {
    return pool[static_cast<size_t>(stream.next_u64() % pool.size())];
}

std::vector<std::pair<std::string, std::string>> make_content_pairs(int count, uint64_t seed) {
    rng stream = rng::derive(seed, "content-pairs");
    std::vector<std::pair<std::string, std::string>> out;
    out.reserve(static_cast<size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        std::string a = pick(object_labels(), stream);
        std::string b = pick(object_labels(), stream);
        if (a == b) continue;
        out.push_back({"A photo of a " + a, "A photo of a " + b});
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> make_style_pairs(int count, uint64_t seed) {
    rng stream = rng::derive(seed, "style-pairs");
    std::vector<std::pair<std::string, std::string>> out;
    out.reserve(static_cast<size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        std::string obj = pick(object_labels(), stream);
        std::string a = pick(style_color_labels(), stream);
        std::string b = pick(style_color_labels(), stream);
        if (a == b) continue;
        out.push_back({"A photo of a " + a + " " + obj, "A photo of a " + b + " " + obj});
    }
    return out;
}

} // namespace blora
