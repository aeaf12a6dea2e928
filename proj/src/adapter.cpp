#include "adapter.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace blora {

double lora_pair::effective_scale() const {
    if (!network_alpha) return 1.0;
    return *network_alpha / static_cast<double>(rank());
}

void lora_pair::validate(const std::string& stem) const {
    if (up.rank() != 2 || down.rank() != 2) {
        fail_invariant("pair \"" + stem + "\" factors must be 2-D, got up " + up.shape_str() +
                       " / down " + down.shape_str());
    }
    if (up.dim(1) != down.dim(0)) {
        fail_invariant("pair \"" + stem + "\" rank disagreement: up " + up.shape_str() +
                       " vs down " + down.shape_str());
    }
    int64_t r = rank();
    if (r < 1) fail_invariant("pair \"" + stem + "\" has rank < 1");
    if (r > std::min(rows(), cols())) {
        fail_invariant("pair \"" + stem + "\" rank " + std::to_string(r) + " exceeds min(" +
                       std::to_string(rows()) + ", " + std::to_string(cols()) + ")");
    }
    if (network_alpha && !std::isfinite(*network_alpha)) {
        fail_invariant("pair \"" + stem + "\" has a non-finite network_alpha");
    }
}

std::set<int> lora_adapter::blocks_present() const {
    std::set<int> blocks;
    for (const auto& [stem, pair] : pairs) {
        if (auto b = find_block(stem)) blocks.insert(*b);
    }
    return blocks;
}

std::vector<std::string> lora_adapter::out_of_topology_stems() const {
    std::vector<std::string> out;
    for (const auto& [stem, pair] : pairs) {
        if (!find_block(stem)) out.push_back(stem);
    }
    return out;
}

void lora_adapter::validate() const {
    for (const auto& [stem, pair] : pairs) pair.validate(stem);
}

const char* role_name(blora_role role) {
    return role == blora_role::content ? "content" : "style";
}

blora_role role_from_name(const std::string& name) {
    if (name == "content") return blora_role::content;
    if (name == "style") return blora_role::style;
    fail_usage("unknown role \"" + name + "\" (expected content or style)");
}

b_lora as_blora(const lora_adapter& adapter, std::optional<blora_role> role_override) {
    std::set<int> blocks = adapter.blocks_present();
    if (blocks.empty()) fail_invariant("adapter has no attention-topology stems, cannot form a B-LoRA");

    b_lora out;
    out.adapter = adapter;
    auto meta_block = adapter.metadata.find("blora.block");
    if (meta_block != adapter.metadata.end()) {
        out.block = parse_block_name(meta_block->second);
    } else if (blocks.size() == 1) {
        out.block = *blocks.begin();
    } else {
        fail_invariant("adapter spans " + std::to_string(blocks.size()) +
                       " blocks and carries no blora.block metadata");
    }
    for (int b : blocks) {
        if (b != out.block) {
            fail_invariant("stem outside declared block " + block_name(out.block) +
                           ": adapter also touches " + block_name(b));
        }
    }
    if (role_override) {
        out.role = *role_override;
    } else {
        auto meta_role = adapter.metadata.find("blora.role");
        out.role = (meta_role != adapter.metadata.end()) ? role_from_name(meta_role->second)
                                                         : blora_role::content;
    }
    out.adapter.metadata["blora.block"] = block_name(out.block);
    out.adapter.metadata["blora.role"] = role_name(out.role);
    return out;
}

tensor lora_delta(const lora_pair& pair) {
    pair.validate("<pair>");
    tensor delta = matmul(pair.up, pair.down);
    double scale = pair.effective_scale();
    if (scale != 1.0) {
        // scale in double, narrow once
        for (float& v : delta.values()) v = static_cast<float>(static_cast<double>(v) * scale);
    }
    return delta;
}

tensor merge(const tensor& base, const lora_pair& pair, double alpha) {
    if (base.rank() != 2 || base.dim(0) != pair.rows() || base.dim(1) != pair.cols()) {
        fail_invariant("merge shape mismatch: base " + base.shape_str() + " vs delta [" +
                       std::to_string(pair.rows()) + "x" + std::to_string(pair.cols()) + "]");
    }
    if (alpha == 0.0) return base;
    return axpy_scale(base, lora_delta(pair), alpha);
}

b_lora extract_blora(const lora_adapter& adapter, int block, blora_role role) {
    b_lora out;
    out.block = block;
    out.role = role;
    out.adapter.metadata = adapter.metadata;
    for (const auto& [stem, pair] : adapter.pairs) {
        auto b = find_block(stem);
        if (b && *b == block) out.adapter.pairs.emplace(stem, pair);
    }
    if (out.adapter.pairs.empty()) {
        fail_invariant("adapter has no stems in block " + block_name(block));
    }
    out.adapter.metadata["blora.block"] = block_name(block);
    out.adapter.metadata["blora.role"] = role_name(role);
    return out;
}

lora_adapter combine_bloras(const b_lora& content, const b_lora& style,
                            std::vector<std::string>* warnings) {
    if (content.block == style.block) {
        fail_invariant("cannot combine two B-LoRAs occupying the same block " +
                       block_name(content.block));
    }
    lora_adapter out;
    out.pairs = content.adapter.pairs;
    for (const auto& [stem, pair] : style.adapter.pairs) {
        if (!out.pairs.emplace(stem, pair).second) {
            fail_invariant("overlapping stems between the two B-LoRAs (first: \"" + stem + "\")");
        }
    }
    std::string preserved;
    for (const auto& inp : {&content.adapter, &style.adapter}) {
        for (const std::string& stem : inp->out_of_topology_stems()) {
            std::string note = "preserving out-of-topology stem \"" + stem + "\"";
            if (warnings) warnings->push_back(note);
            preserved += preserved.empty() ? note : "; " + note;
        }
    }
    if (!preserved.empty()) out.metadata["blora.warnings"] = preserved;
    out.metadata["blora.content.block"] = block_name(content.block);
    out.metadata["blora.style.block"] = block_name(style.block);
    out.metadata["blora.prompt"] = "A [c] in [s] style";
    return out;
}

static std::string format_scalar(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
    return std::string(buf, end);
}

lora_adapter scale_adapter(const lora_adapter& adapter, double alpha) {
    if (!std::isfinite(alpha)) fail_usage("scale alpha must be finite");
    lora_adapter out = adapter;
    double cumulative = alpha;
    auto prev = adapter.metadata.find("blora.alpha");
    if (prev != adapter.metadata.end()) cumulative *= std::strtod(prev->second.c_str(), nullptr);
    out.metadata["blora.alpha"] = format_scalar(cumulative);
    if (alpha == 1.0) return out;
    for (auto& [stem, pair] : out.pairs) {
        double scale = pair.effective_scale() * alpha;
        pair.network_alpha = scale * static_cast<double>(pair.rank());
    }
    return out;
}

namespace {

struct parsed_name {
    std::string stem;           // dot scheme when resolvable
    enum class part { up, down, alpha } role;
};

bool strip_suffix(const std::string& name, const std::string& suffix, std::string& stem) {
    if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        return false;
    }
    stem = name.substr(0, name.size() - suffix.size());
    return true;
}

std::string normalize_stem(const std::string& stem) {
    if (find_block(stem)) {
        if (auto dot = kohya_to_dot(stem)) return *dot;  // kohya stem inside topology
        return stem;                                     // already dot scheme
    }
    return stem;  // out-of-topology: preserved verbatim
}

std::optional<parsed_name> classify_name(const std::string& name) {
    std::string stem;
    if (strip_suffix(name, ".lora.up.weight", stem) || strip_suffix(name, ".lora_up.weight", stem)) {
        return parsed_name{normalize_stem(stem), parsed_name::part::up};
    }
    if (strip_suffix(name, ".lora.down.weight", stem) || strip_suffix(name, ".lora_down.weight", stem)) {
        return parsed_name{normalize_stem(stem), parsed_name::part::down};
    }
    if (strip_suffix(name, ".alpha", stem)) {
        return parsed_name{normalize_stem(stem), parsed_name::part::alpha};
    }
    return std::nullopt;
}

} // namespace

lora_adapter load_adapter(const tensor_file& file) {
    struct slot {
        std::optional<tensor> up, down;
        std::optional<double> alpha;
    };
    std::map<std::string, slot> slots;

    for (const auto& [name, entry] : file.entries) {
        auto parsed = classify_name(name);
        if (!parsed) {
            fail_format("tensor \"" + name + "\" is not an adapter tensor "
                        "(expected a .lora.up.weight / .lora.down.weight / .alpha suffix)");
        }
        slot& s = slots[parsed->stem];
        tensor t = file.load(name);
        switch (parsed->role) {
            case parsed_name::part::up: s.up = std::move(t); break;
            case parsed_name::part::down: s.down = std::move(t); break;
            case parsed_name::part::alpha:
                if (t.numel() != 1) {
                    fail_format("alpha tensor \"" + name + "\" must hold a single scalar");
                }
                s.alpha = static_cast<double>(t.values()[0]);
                break;
        }
    }

    lora_adapter out;
    out.metadata = file.metadata;
    for (auto& [stem, s] : slots) {
        if (!s.up && !s.down && s.alpha) {
            fail_format("alpha for \"" + stem + "\" has no matching factor pair");
        }
        if (!s.up || !s.down) {
            fail_format("orphan factor for \"" + stem + "\": " +
                        (s.up ? "up present, down missing" : "down present, up missing"));
        }
        lora_pair pair;
        pair.up = std::move(*s.up);
        pair.down = std::move(*s.down);
        pair.network_alpha = s.alpha;
        pair.validate(stem);
        out.pairs.emplace(stem, std::move(pair));
    }
    return out;
}

tensor_file save_adapter(const lora_adapter& adapter) {
    adapter.validate();
    tensor_file file;
    file.metadata = adapter.metadata;
    for (const auto& [stem, pair] : adapter.pairs) {
        file.add(stem + ".lora.up.weight", pair.up);
        file.add(stem + ".lora.down.weight", pair.down);
        if (pair.network_alpha) {
            file.add(stem + ".alpha",
                     tensor({1}, {static_cast<float>(*pair.network_alpha)}));
        }
    }
    return file;
}

tensor_file merge_adapter_into_weights(const tensor_file& base, const lora_adapter& adapter, double alpha) {
    adapter.validate();
    tensor_file out = base;
    for (const auto& [stem, pair] : adapter.pairs) {
        if (!base.has(stem)) {
            fail_invariant("adapter stem \"" + stem + "\" has no matching base weight tensor");
        }
        tensor merged = merge(base.load(stem), pair, alpha);
        merged.set_storage_dtype(base.entries.at(stem).dt);
        out.entries.erase(stem);
        out.add(stem, merged);
    }
    return out;
}

} // namespace blora
