#pragma once

#include <cstdint>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace blora {

// Small dense row-major matrix of doubles. The toy network trains and
// differentiates in double; F32 tensors appear only at its boundaries
// (adapter import/export, probe images).
struct dmat {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> v;

    dmat() = default;
    dmat(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0.0) {}

    double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
    int64_t numel() const { return rows * cols; }

    bool same_shape(const dmat& o) const { return rows == o.rows && cols == o.cols; }
};

inline dmat dmat_from_tensor(const tensor& t) {
    if (t.rank() != 2) fail_invariant("expected a 2-D tensor, got " + t.shape_str());
    dmat m(t.dim(0), t.dim(1));
    std::span<const float> src = t.values();
    for (size_t i = 0; i < src.size(); ++i) m.v[i] = static_cast<double>(src[i]);
    return m;
}

inline tensor tensor_from_dmat(const dmat& m) {
    std::vector<float> values(static_cast<size_t>(m.numel()));
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(m.v[i]);
    return tensor({m.rows, m.cols}, std::move(values));
}

// c += or = a @ b variants, plain loops, ascending-index accumulation.
inline dmat dmat_mul(const dmat& a, const dmat& b) {
    if (a.cols != b.rows) fail_invariant("dmat_mul shape mismatch");
    dmat c(a.rows, b.cols);
    for (int64_t i = 0; i < a.rows; ++i) {
        for (int64_t t = 0; t < a.cols; ++t) {
            double av = a.at(i, t);
            for (int64_t j = 0; j < b.cols; ++j) c.at(i, j) += av * b.at(t, j);
        }
    }
    return c;
}

// a @ b^T
inline dmat dmat_mul_nt(const dmat& a, const dmat& b) {
    if (a.cols != b.cols) fail_invariant("dmat_mul_nt shape mismatch");
    dmat c(a.rows, b.rows);
    for (int64_t i = 0; i < a.rows; ++i) {
        for (int64_t j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < a.cols; ++t) acc += a.at(i, t) * b.at(j, t);
            c.at(i, j) = acc;
        }
    }
    return c;
}

// a^T @ b
inline dmat dmat_mul_tn(const dmat& a, const dmat& b) {
    if (a.rows != b.rows) fail_invariant("dmat_mul_tn shape mismatch");
    dmat c(a.cols, b.cols);
    for (int64_t t = 0; t < a.rows; ++t) {
        for (int64_t i = 0; i < a.cols; ++i) {
            double av = a.at(t, i);
            for (int64_t j = 0; j < b.cols; ++j) c.at(i, j) += av * b.at(t, j);
        }
    }
    return c;
}

inline void dmat_add_inplace(dmat& a, const dmat& b, double scale = 1.0) {
    if (!a.same_shape(b)) fail_invariant("dmat_add shape mismatch");
    for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += scale * b.v[i];
}

} // namespace blora
