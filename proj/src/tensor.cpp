#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace blora {

size_t dtype_byte_width(dtype dt) {
    switch (dt) {
        case dtype::f32: return 4;
        case dtype::f16: return 2;
        case dtype::bf16: return 2;
    }
    return 0;
}

const char* dtype_name(dtype dt) {
    switch (dt) {
        case dtype::f32: return "F32";
        case dtype::f16: return "F16";
        case dtype::bf16: return "BF16";
    }
    return "?";
}

dtype dtype_from_name(const std::string& name) {
    if (name == "F32") return dtype::f32;
    if (name == "F16") return dtype::f16;
    if (name == "BF16") return dtype::bf16;
    fail_format("unknown dtype \"" + name + "\" (expected F32, F16 or BF16)");
}

float f16_to_f32(uint16_t bits) {
    uint32_t sign = static_cast<uint32_t>(bits >> 15) & 1u;
    uint32_t exp  = static_cast<uint32_t>(bits >> 10) & 0x1Fu;
    uint32_t man  = static_cast<uint32_t>(bits) & 0x3FFu;
    uint32_t out;
    if (exp == 0) {
        if (man == 0) {
            out = sign << 31;  // signed zero
        } else {
            // subnormal: normalize
            int shift = 0;
            while ((man & 0x400u) == 0) {
                man <<= 1;
                ++shift;
            }
            man &= 0x3FFu;
            out = (sign << 31) | (static_cast<uint32_t>(127 - 14 - shift) << 23) | (man << 13);
        }
    } else if (exp == 0x1F) {
        out = (sign << 31) | 0x7F800000u | (man << 13);  // inf / nan
    } else {
        out = (sign << 31) | ((exp - 15 + 127) << 23) | (man << 13);
    }
    float f;
    std::memcpy(&f, &out, 4);
    return f;
}

uint16_t f32_to_f16(float value) {
    uint32_t u;
    std::memcpy(&u, &value, 4);
    uint32_t sign = (u >> 16) & 0x8000u;
    uint32_t exp  = (u >> 23) & 0xFFu;
    uint32_t man  = u & 0x7FFFFFu;

    if (exp == 0xFF) {  // inf / nan
        return static_cast<uint16_t>(sign | 0x7C00u | (man ? 0x200u | (man >> 13) : 0));
    }
    int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1F) {  // overflow -> inf
        return static_cast<uint16_t>(sign | 0x7C00u);
    }
    if (e <= 0) {
        // subnormal or underflow to zero; shift with round-to-nearest-even
        if (e < -10) return static_cast<uint16_t>(sign);
        man |= 0x800000u;  // implicit bit
        int shift = 14 - e;  // bits discarded: 13 + (1 - e)
        uint32_t half = 1u << (shift - 1);
        uint32_t rounded = man >> shift;
        uint32_t rem = man & ((1u << shift) - 1);
        if (rem > half || (rem == half && (rounded & 1u))) ++rounded;
        return static_cast<uint16_t>(sign | rounded);
    }
    // normal, round 23-bit mantissa to 10 bits, nearest even
    uint32_t rounded = man >> 13;
    uint32_t rem = man & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (rounded & 1u))) ++rounded;
    if (rounded == 0x400u) {  // mantissa carry
        rounded = 0;
        ++e;
        if (e >= 0x1F) return static_cast<uint16_t>(sign | 0x7C00u);
    }
    return static_cast<uint16_t>(sign | (static_cast<uint32_t>(e) << 10) | rounded);
}

float bf16_to_f32(uint16_t bits) {
    uint32_t u = static_cast<uint32_t>(bits) << 16;
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

uint16_t f32_to_bf16(float value) {
    uint32_t u;
    std::memcpy(&u, &value, 4);
    if ((u & 0x7F800000u) == 0x7F800000u && (u & 0x7FFFFFu) != 0) {
        return static_cast<uint16_t>((u >> 16) | 0x40u);  // quiet the nan
    }
    uint32_t rounding = 0x7FFFu + ((u >> 16) & 1u);  // nearest even
    return static_cast<uint16_t>((u + rounding) >> 16);
}

static int64_t checked_numel(const std::vector<int64_t>& shape) {
    if (shape.empty()) fail_invariant("zero-dim tensors are rejected");
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 1) fail_invariant("tensor shape entries must be >= 1");
        n *= d;
    }
    return n;
}

tensor::tensor(std::vector<int64_t> shape, std::vector<float> values, dtype storage)
    : shape_(std::move(shape)), values_(std::move(values)), storage_dtype_(storage) {
    int64_t n = checked_numel(shape_);
    if (n != static_cast<int64_t>(values_.size())) {
        fail_invariant("tensor data has " + std::to_string(values_.size()) +
                       " elements but shape " + shape_str() + " implies " + std::to_string(n));
    }
}

tensor tensor::zeros(std::vector<int64_t> shape) {
    int64_t n = checked_numel(shape);
    return tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
}

tensor tensor::from_bytes(std::vector<int64_t> shape, dtype dt, std::span<const uint8_t> bytes) {
    int64_t n = checked_numel(shape);
    size_t width = dtype_byte_width(dt);
    if (bytes.size() != static_cast<size_t>(n) * width) {
        fail_format("tensor payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(static_cast<size_t>(n) * width));
    }
    std::vector<float> values(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t* p = bytes.data() + static_cast<size_t>(i) * width;
        float v;
        if (dt == dtype::f32) {
            uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
            std::memcpy(&v, &u, 4);
        } else {
            uint16_t u = static_cast<uint16_t>(p[0] | (p[1] << 8));
            v = (dt == dtype::f16) ? f16_to_f32(u) : bf16_to_f32(u);
            if (!std::isfinite(v)) {
                fail_format(std::string(dtype_name(dt)) + " payload decodes to a non-finite value at element " +
                            std::to_string(i));
            }
        }
        values[static_cast<size_t>(i)] = v;
    }
    return tensor(std::move(shape), std::move(values), dt);
}

int64_t tensor::numel() const {
    return static_cast<int64_t>(values_.size());
}

float tensor::at(int64_t r, int64_t c) const {
    return values_[static_cast<size_t>(r * shape_[1] + c)];
}

float& tensor::at(int64_t r, int64_t c) {
    return values_[static_cast<size_t>(r * shape_[1] + c)];
}

std::vector<uint8_t> tensor::to_bytes() const {
    size_t width = dtype_byte_width(storage_dtype_);
    std::vector<uint8_t> out(values_.size() * width);
    for (size_t i = 0; i < values_.size(); ++i) {
        uint8_t* p = out.data() + i * width;
        if (storage_dtype_ == dtype::f32) {
            uint32_t u;
            std::memcpy(&u, &values_[i], 4);
            p[0] = static_cast<uint8_t>(u);
            p[1] = static_cast<uint8_t>(u >> 8);
            p[2] = static_cast<uint8_t>(u >> 16);
            p[3] = static_cast<uint8_t>(u >> 24);
        } else {
            uint16_t u = (storage_dtype_ == dtype::f16) ? f32_to_f16(values_[i]) : f32_to_bf16(values_[i]);
            float back = (storage_dtype_ == dtype::f16) ? f16_to_f32(u) : bf16_to_f32(u);
            if (!std::isfinite(back)) {
                fail_invariant("value " + std::to_string(values_[i]) + " is not representable in " +
                               dtype_name(storage_dtype_));
            }
            p[0] = static_cast<uint8_t>(u);
            p[1] = static_cast<uint8_t>(u >> 8);
        }
    }
    return out;
}

std::string tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
}

tensor matmul(const tensor& a, const tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        fail_invariant("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    }
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    tensor c = tensor::zeros({m, n});
    const float* pa = a.values().data();
    const float* pb = b.values().data();
    float* pc = c.values().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t t = 0; t < k; ++t) {
            float av = pa[i * k + t];
            const float* brow = pb + t * n;
            float* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

tensor transpose(const tensor& a) {
    if (a.rank() != 2) fail_invariant("transpose expects a 2-D tensor, got " + a.shape_str());
    int64_t m = a.dim(0), n = a.dim(1);
    tensor t = tensor::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

tensor softmax_rows(const tensor& x) {
    if (x.rank() != 2) fail_invariant("softmax_rows expects a 2-D tensor, got " + x.shape_str());
    int64_t m = x.dim(0), n = x.dim(1);
    tensor y = tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i) {
        float mx = x.at(i, 0);
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        float sum = 0.0f;
        for (int64_t j = 0; j < n; ++j) {
            float e = std::exp(x.at(i, j) - mx);
            y.at(i, j) = e;
            sum += e;
        }
        for (int64_t j = 0; j < n; ++j) y.at(i, j) /= sum;
    }
    return y;
}

template <typename T>
static double cosine_impl(std::span<const T> x, std::span<const T> y) {
    if (x.size() != y.size()) {
        fail_invariant("cosine_sim length mismatch: " + std::to_string(x.size()) + " vs " +
                       std::to_string(y.size()));
    }
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        dot += static_cast<double>(x[i]) * static_cast<double>(y[i]);
        nx += static_cast<double>(x[i]) * static_cast<double>(x[i]);
        ny += static_cast<double>(y[i]) * static_cast<double>(y[i]);
    }
    if (nx == 0.0 || ny == 0.0) fail_invariant("cosine_sim: zero-norm vector");
    // Single sqrt over the product: sqrt(fl(a*a)) == a in round-to-nearest,
    // so identical (or exactly scaled) inputs land on exactly 1.
    double c = dot / std::sqrt(nx * ny);
    return std::clamp(c, -1.0, 1.0);
}

double cosine_sim(std::span<const float> x, std::span<const float> y) { return cosine_impl(x, y); }
double cosine_sim(std::span<const double> x, std::span<const double> y) { return cosine_impl(x, y); }

tensor axpy_scale(const tensor& w0, const tensor& delta, double alpha) {
    if (!w0.same_shape(delta)) {
        fail_invariant("axpy_scale shape mismatch: " + w0.shape_str() + " vs " + delta.shape_str());
    }
    if (alpha == 0.0) return w0;
    tensor out = w0;
    float a = static_cast<float>(alpha);
    std::span<float> ov = out.values();
    std::span<const float> dv = delta.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] += a * dv[i];
    return out;
}

} // namespace blora
