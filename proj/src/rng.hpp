#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace blora {

// Counter-based generator: the n-th output is a pure function of (state0, n),
// where state0 is derived from the seed. The mixer is splitmix64
// (Steele et al., increment 0x9E3779B97F4A7C15, mix constants
// 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB). Identical seeds produce identical
// 64-bit sequences on every platform.
class rng {
public:
    explicit rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Box-Muller. Consumes two uniforms per pair; the spare is cached.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 0.0;
        while (u <= 0.0) u = next_uniform();  // avoid log(0)
        double v = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent stream derived from (seed, tag, a, b). Used for per-cell /
    // per-layer streams so parallel work stays order-independent.
    static rng derive(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a 64
        auto mix_byte = [&h](uint8_t byte) {
            h ^= byte;
            h *= 0x100000001B3ull;
        };
        auto mix_u64 = [&](uint64_t x) {
            for (int i = 0; i < 8; ++i) mix_byte(static_cast<uint8_t>(x >> (8 * i)));
        };
        mix_u64(seed);
        for (char c : tag) mix_byte(static_cast<uint8_t>(c));
        mix_u64(a);
        mix_u64(b);
        return rng(h);
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a 64 over raw bytes; used for content digests in run manifests.
inline uint64_t fnv1a64(const void* data, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = 0xCBF29CE484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace blora
