#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace blora {

// Storage dtypes. F32 is the only compute dtype; F16/BF16 exist at the file
// boundary and are promoted to F32 on load.
enum class dtype { f32, f16, bf16 };

size_t dtype_byte_width(dtype dt);
const char* dtype_name(dtype dt);
dtype dtype_from_name(const std::string& name);  // throws format error on unknown

// IEEE-754 binary16 <-> binary32, round-to-nearest-even on encode.
float    f16_to_f32(uint16_t bits);
uint16_t f32_to_f16(float value);
float    bf16_to_f32(uint16_t bits);
uint16_t f32_to_bf16(float value);

// Dense row-major tensor. Values are always held as F32; storage_dtype
// records how the tensor is (or will be) encoded on disk.
class tensor {
public:
    tensor() = default;
    tensor(std::vector<int64_t> shape, std::vector<float> values, dtype storage = dtype::f32);

    static tensor zeros(std::vector<int64_t> shape);
    // Decode a raw little-endian buffer. F16/BF16 payloads must decode to
    // finite values or construction fails.
    static tensor from_bytes(std::vector<int64_t> shape, dtype dt, std::span<const uint8_t> bytes);

    const std::vector<int64_t>& shape() const { return shape_; }
    dtype storage_dtype() const { return storage_dtype_; }
    void set_storage_dtype(dtype dt) { storage_dtype_ = dt; }

    int64_t numel() const;
    size_t rank() const { return shape_.size(); }
    int64_t dim(size_t i) const { return shape_.at(i); }

    std::span<const float> values() const { return values_; }
    std::span<float> values() { return values_; }
    float at(int64_t r, int64_t c) const;  // 2-D accessor
    float& at(int64_t r, int64_t c);

    // Little-endian encoding in storage_dtype. Throws if a value is not
    // representable (overflows to infinity) in a half type.
    std::vector<uint8_t> to_bytes() const;

    bool same_shape(const tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<float> values_;
    dtype storage_dtype_ = dtype::f32;
};

// c[i][j] = sum_t a[i][t] * b[t][j], F32 accumulation in ascending t order.
tensor matmul(const tensor& a, const tensor& b);

tensor transpose(const tensor& a);

// Row-wise softmax with max subtraction; total on finite inputs.
tensor softmax_rows(const tensor& x);

// x . y / (|x| |y|), clamped to [-1, 1]. Throws on zero-norm input.
double cosine_sim(std::span<const float> x, std::span<const float> y);
double cosine_sim(std::span<const double> x, std::span<const double> y);

// w0 + alpha * delta, elementwise. alpha == 0 returns w0 bit-identically.
tensor axpy_scale(const tensor& w0, const tensor& delta, double alpha);

} // namespace blora
