#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace blora {

// One tensor slot in a safetensors container. byte offsets index into the
// data region (not the whole file). The shape may be empty for 0-rank scalar
// entries found in external checkpoints; such entries load as shape [1].
struct tensor_file_entry {
    dtype dt = dtype::f32;
    std::vector<int64_t> shape;
    uint64_t begin = 0;
    uint64_t end = 0;

    int64_t numel() const;
    uint64_t byte_size() const { return end - begin; }
};

// Parsed safetensors container: 8-byte little-endian header length, UTF-8
// JSON header, raw little-endian payload. Values are immutable once built.
struct tensor_file {
    std::map<std::string, std::string> metadata;       // "__metadata__" object
    std::map<std::string, tensor_file_entry> entries;  // name -> slot
    std::vector<uint8_t> payload;

    bool has(const std::string& name) const { return entries.count(name) != 0; }
    std::span<const uint8_t> bytes_of(const std::string& name) const;
    tensor load(const std::string& name) const;

    // Appends the tensor's encoded bytes to the payload and registers the
    // entry. Serialization repacks, so insertion order does not matter.
    void add(const std::string& name, const tensor& t);
};

tensor_file parse_safetensors(std::span<const uint8_t> bytes);

// Canonical form: "__metadata__" first (omitted when empty), tensor names in
// lexicographic order, offsets packed contiguously in that order, compact
// JSON with fixed key order {dtype, shape, data_offsets}. Canonical files
// round-trip byte-for-byte through parse.
std::vector<uint8_t> serialize_safetensors(const tensor_file& file);

tensor_file read_tensor_file(const std::string& path);
void write_tensor_file(const tensor_file& file, const std::string& path);

std::vector<uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, std::span<const uint8_t> bytes);

} // namespace blora
