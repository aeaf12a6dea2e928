#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "adapter.hpp"
#include "rng.hpp"
#include "safetensors.hpp"
#include "tensor.hpp"
#include "topology.hpp"

namespace blora::testing {

inline tensor random_tensor(std::vector<int64_t> shape, rng& stream, double scale = 1.0) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<float> values(static_cast<size_t>(n));
    for (float& v : values) v = static_cast<float>(scale * stream.next_gaussian());
    return tensor(std::move(shape), std::move(values));
}

inline lora_pair random_pair(int64_t m, int64_t n, int64_t r, rng& stream,
                             std::optional<double> network_alpha = std::nullopt) {
    lora_pair pair;
    pair.up = random_tensor({m, r}, stream);
    pair.down = random_tensor({r, n}, stream);
    pair.network_alpha = network_alpha;
    return pair;
}

// Adapter covering every stem of the given blocks at fixed small dims.
inline lora_adapter full_adapter(const std::vector<int>& blocks, int64_t m = 4, int64_t n = 4,
                                 int64_t r = 1, uint64_t seed = 0) {
    lora_adapter adapter;
    rng stream = rng::derive(seed, "full-adapter");
    for (int b : blocks) {
        for (const std::string& stem : keys_of_block(b)) {
            adapter.pairs.emplace(stem, random_pair(m, n, r, stream));
        }
    }
    return adapter;
}

// Exact triple-loop product, the independent matmul oracle.
inline tensor matmul_oracle(const tensor& a, const tensor& b) {
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    tensor c = tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int64_t t = 0; t < k; ++t) acc += a.at(i, t) * b.at(t, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

inline double max_abs_diff(const tensor& a, const tensor& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i) {
        mx = std::max(mx, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
    }
    return mx;
}

inline bool bit_equal(const tensor& a, const tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.values().data(), b.values().data(), a.values().size() * 4) == 0;
}

// Randomized small container for round-trip and fuzz tests.
inline tensor_file random_tensor_file(rng& stream) {
    tensor_file file;
    int tensors = 1 + static_cast<int>(stream.next_u64() % 16);
    for (int i = 0; i < tensors; ++i) {
        std::string name = "t" + std::to_string(stream.next_u64() % 1000) + "." + std::to_string(i);
        int64_t rows = 1 + static_cast<int64_t>(stream.next_u64() % 8);
        int64_t cols = 1 + static_cast<int64_t>(stream.next_u64() % 8);
        dtype dt = static_cast<dtype>(stream.next_u64() % 3);
        tensor t = random_tensor({rows, cols}, stream);
        t.set_storage_dtype(dt);
        if (!file.has(name)) file.add(name, t);
    }
    if (stream.next_u64() % 2) {
        file.metadata["note"] = "fixture " + std::to_string(stream.next_u64() % 100);
    }
    return file;
}

inline bool model_equal(const tensor_file& a, const tensor_file& b) {
    if (a.metadata != b.metadata) return false;
    if (a.entries.size() != b.entries.size()) return false;
    for (const auto& [name, ea] : a.entries) {
        auto it = b.entries.find(name);
        if (it == b.entries.end()) return false;
        const tensor_file_entry& eb = it->second;
        if (ea.dt != eb.dt || ea.shape != eb.shape) return false;
        auto ba = a.bytes_of(name);
        auto bb = b.bytes_of(name);
        if (ba.size() != bb.size() || std::memcmp(ba.data(), bb.data(), ba.size()) != 0) return false;
    }
    return true;
}

} // namespace blora::testing
