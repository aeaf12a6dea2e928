#pragma once

#include <optional>
#include <string>
#include <vector>

#include "error.hpp"

namespace blora {

// The SDXL UNet carries 70 attention layers grouped here into 8 blocks
// W0..W7: W0 is the high-resolution down-path group (4 layers), W1..W6 are
// the six inner 10-layer blocks in forward-pass order (down2.attn0,
// down2.attn1, mid, up0.attn0, up0.attn1, up0.attn2), and W7 is the
// high-resolution up-path group (6 layers).
inline constexpr int kBlockCount = 8;
inline constexpr int kTotalLayers = 70;
inline constexpr int kBlockLayerCounts[kBlockCount] = {4, 10, 10, 10, 10, 10, 10, 6};

enum class attention_kind { self_attn, cross_attn };
enum class projection { q, k, v, out };
enum class naming_scheme { dot, kohya };

struct layer_address {
    int block = 0;  // 0..7
    int layer = 0;  // index within the block
    attention_kind kind = attention_kind::self_attn;
    projection proj = projection::q;
};

int layer_count(int block);
std::string block_name(int block);  // "W0".."W7"

// Accepts "W4"/"w4" and raw diffusers path prefixes like
// "up_blocks.0.attentions.0". Throws a usage error otherwise.
int parse_block_name(const std::string& text);

// All 560 canonical dot-scheme key stems (70 layers x {attn1, attn2} x
// {to_q, to_k, to_v, to_out.0}), sorted.
const std::vector<std::string>& all_stems();

// Owning block of an adapter key stem in either naming scheme; nullopt for
// keys outside the attention topology (e.g. text-encoder adapters).
std::optional<int> find_block(const std::string& stem);

// Same, but unknown keys raise an error carrying the key verbatim.
int block_of_key(const std::string& stem);

std::optional<layer_address> find_address(const std::string& stem);
layer_address address_of_key(const std::string& stem);

// Sorted adapter key stems of one block. A 10-layer block yields 80 stems.
std::vector<std::string> keys_of_block(int block, naming_scheme scheme = naming_scheme::dot);

// Canonical stem for an address, dot scheme.
std::string key_of_address(const layer_address& addr);

std::string dot_to_kohya(const std::string& dot_stem);
// Translation back is table-driven; nullopt for stems outside the topology.
std::optional<std::string> kohya_to_dot(const std::string& kohya_stem);

// Machine-readable export of the whole mapping table for audit.
std::string keymap_json(naming_scheme scheme = naming_scheme::dot);

const char* attention_kind_name(attention_kind k);
const char* projection_name(projection p);

} // namespace blora
