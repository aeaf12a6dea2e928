#include "topology.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <unordered_map>

#include <json.hpp>

namespace blora {

namespace {

// One diffusers attention group: a path prefix and how many transformer
// layers it holds. Forward-pass order; grouping to W0..W7 is the only
// assignment consistent with the published layer counts.
struct raw_group {
    int block;
    const char* path;
    int layers;
};

constexpr raw_group kGroups[] = {
    {0, "down_blocks.1.attentions.0", 2},
    {0, "down_blocks.1.attentions.1", 2},
    {1, "down_blocks.2.attentions.0", 10},
    {2, "down_blocks.2.attentions.1", 10},
    {3, "mid_block.attentions.0", 10},
    {4, "up_blocks.0.attentions.0", 10},
    {5, "up_blocks.0.attentions.1", 10},
    {6, "up_blocks.0.attentions.2", 10},
    {7, "up_blocks.1.attentions.0", 2},
    {7, "up_blocks.1.attentions.1", 2},
    {7, "up_blocks.1.attentions.2", 2},
};

constexpr const char* kAttnNames[] = {"attn1", "attn2"};  // self, cross
constexpr const char* kProjNames[] = {"to_q", "to_k", "to_v", "to_out.0"};

struct tables {
    std::vector<std::string> stems;                              // sorted dot stems
    std::unordered_map<std::string, layer_address> dot_lookup;   // dot stem -> address
    std::unordered_map<std::string, std::string> kohya_lookup;   // kohya stem -> dot stem
    std::map<std::string, int> path_to_block;                    // group path -> block
};

std::string make_kohya(const std::string& dot_stem) {
    std::string out = "lora_";
    for (char c : dot_stem) out += (c == '.') ? '_' : c;
    return out;
}

const tables& get_tables() {
    static const tables t = [] {
        tables t;
        std::array<int, kBlockCount> next_layer{};
        for (const raw_group& g : kGroups) {
            t.path_to_block[g.path] = g.block;
            for (int tb = 0; tb < g.layers; ++tb) {
                int layer = next_layer[static_cast<size_t>(g.block)]++;
                for (int a = 0; a < 2; ++a) {
                    for (int p = 0; p < 4; ++p) {
                        std::string stem = "unet.";
                        stem += g.path;
                        stem += ".transformer_blocks.";
                        stem += std::to_string(tb);
                        stem += '.';
                        stem += kAttnNames[a];
                        stem += '.';
                        stem += kProjNames[p];
                        layer_address addr;
                        addr.block = g.block;
                        addr.layer = layer;
                        addr.kind = (a == 0) ? attention_kind::self_attn : attention_kind::cross_attn;
                        addr.proj = static_cast<projection>(p);
                        t.kohya_lookup[make_kohya(stem)] = stem;
                        t.dot_lookup[stem] = addr;
                        t.stems.push_back(std::move(stem));
                    }
                }
            }
        }
        std::sort(t.stems.begin(), t.stems.end());
        return t;
    }();
    return t;
}

} // namespace

int layer_count(int block) {
    if (block < 0 || block >= kBlockCount) fail_usage("block index out of range: " + std::to_string(block));
    return kBlockLayerCounts[block];
}

std::string block_name(int block) {
    if (block < 0 || block >= kBlockCount) fail_usage("block index out of range: " + std::to_string(block));
    return "W" + std::to_string(block);
}

int parse_block_name(const std::string& text) {
    if ((text.size() == 2) && (text[0] == 'W' || text[0] == 'w') && text[1] >= '0' && text[1] <= '7') {
        return text[1] - '0';
    }
    std::string path = text;
    if (path.rfind("unet.", 0) == 0) path = path.substr(5);
    auto it = get_tables().path_to_block.find(path);
    if (it != get_tables().path_to_block.end()) return it->second;
    fail_usage("unrecognized block \"" + text + "\" (expected W0..W7 or a diffusers attention path)");
}

const std::vector<std::string>& all_stems() {
    return get_tables().stems;
}

std::optional<layer_address> find_address(const std::string& stem) {
    const tables& t = get_tables();
    auto it = t.dot_lookup.find(stem);
    if (it != t.dot_lookup.end()) return it->second;
    auto kit = t.kohya_lookup.find(stem);
    if (kit != t.kohya_lookup.end()) return t.dot_lookup.at(kit->second);
    return std::nullopt;
}

std::optional<int> find_block(const std::string& stem) {
    auto addr = find_address(stem);
    if (!addr) return std::nullopt;
    return addr->block;
}

int block_of_key(const std::string& stem) {
    auto b = find_block(stem);
    if (!b) fail_usage("unrecognized adapter key \"" + stem + "\"");
    return *b;
}

layer_address address_of_key(const std::string& stem) {
    auto addr = find_address(stem);
    if (!addr) fail_usage("unrecognized adapter key \"" + stem + "\"");
    return *addr;
}

std::vector<std::string> keys_of_block(int block, naming_scheme scheme) {
    if (block < 0 || block >= kBlockCount) fail_usage("block index out of range: " + std::to_string(block));
    const tables& t = get_tables();
    std::vector<std::string> out;
    for (const std::string& stem : t.stems) {
        if (t.dot_lookup.at(stem).block != block) continue;
        out.push_back(scheme == naming_scheme::dot ? stem : make_kohya(stem));
    }
    if (scheme == naming_scheme::kohya) std::sort(out.begin(), out.end());
    return out;
}

std::string key_of_address(const layer_address& addr) {
    if (addr.block < 0 || addr.block >= kBlockCount || addr.layer < 0 ||
        addr.layer >= layer_count(addr.block)) {
        fail_usage("layer address out of range");
    }
    int remaining = addr.layer;
    for (const raw_group& g : kGroups) {
        if (g.block != addr.block) continue;
        if (remaining >= g.layers) {
            remaining -= g.layers;
            continue;
        }
        std::string stem = "unet.";
        stem += g.path;
        stem += ".transformer_blocks.";
        stem += std::to_string(remaining);
        stem += '.';
        stem += kAttnNames[addr.kind == attention_kind::self_attn ? 0 : 1];
        stem += '.';
        stem += kProjNames[static_cast<int>(addr.proj)];
        return stem;
    }
    fail_usage("layer address out of range");
}

std::string dot_to_kohya(const std::string& dot_stem) {
    return make_kohya(dot_stem);
}

std::optional<std::string> kohya_to_dot(const std::string& kohya_stem) {
    const tables& t = get_tables();
    auto it = t.kohya_lookup.find(kohya_stem);
    if (it == t.kohya_lookup.end()) return std::nullopt;
    return it->second;
}

std::string keymap_json(naming_scheme scheme) {
    nlohmann::json doc;
    doc["layer_counts"] = kBlockLayerCounts;
    doc["total_layers"] = kTotalLayers;
    nlohmann::json blocks = nlohmann::json::object();
    for (int b = 0; b < kBlockCount; ++b) {
        nlohmann::json entry;
        entry["layers"] = layer_count(b);
        entry["stems"] = keys_of_block(b, scheme);
        blocks[block_name(b)] = std::move(entry);
    }
    doc["blocks"] = std::move(blocks);
    doc["scheme"] = (scheme == naming_scheme::dot) ? "dot" : "kohya";
    return doc.dump();
}

const char* attention_kind_name(attention_kind k) {
    return k == attention_kind::self_attn ? "self" : "cross";
}

const char* projection_name(projection p) {
    switch (p) {
        case projection::q: return "q";
        case projection::k: return "k";
        case projection::v: return "v";
        case projection::out: return "out";
    }
    return "?";
}

} // namespace blora
