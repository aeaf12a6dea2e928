#include <doctest.h>

#include <cmath>
#include <cstring>

#include "helpers.hpp"
#include "rng.hpp"
#include "tensor.hpp"

using namespace blora;
using namespace blora::testing;

TEST_CASE("matmul identity") {
    tensor eye({2, 2}, {1, 0, 0, 1});
    tensor a({2, 2}, {3, 4, 5, 6});
    tensor c = matmul(eye, a);
    CHECK(bit_equal(c, a));
}

TEST_CASE("matmul rank-1 outer product") {
    tensor up({2, 1}, {1, 0});
    tensor down({1, 2}, {0, 1});
    tensor c = matmul(up, down);
    CHECK(c.at(0, 0) == 0.0f);
    CHECK(c.at(0, 1) == 1.0f);
    CHECK(c.at(1, 0) == 0.0f);
    CHECK(c.at(1, 1) == 0.0f);
}

TEST_CASE("matmul equals triple-loop oracle exactly") {
    rng stream(101);
    tensor a = random_tensor({4, 3}, stream);
    tensor b = random_tensor({3, 5}, stream);
    CHECK(bit_equal(matmul(a, b), matmul_oracle(a, b)));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    tensor a = tensor::zeros({2, 3});
    tensor b = tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), "matmul shape mismatch: [2x3] x [4x2]", error);
}

TEST_CASE("matmul associativity within tolerance") {
    rng stream(7);
    for (int i = 0; i < 20; ++i) {
        tensor a = random_tensor({3, 4}, stream);
        tensor b = random_tensor({4, 2}, stream);
        tensor c = random_tensor({2, 5}, stream);
        tensor left = matmul(matmul(a, b), c);
        tensor right = matmul(a, matmul(b, c));
        double num = 0, den = 0;
        for (size_t j = 0; j < left.values().size(); ++j) {
            double d = left.values()[j] - right.values()[j];
            num += d * d;
            den += static_cast<double>(left.values()[j]) * left.values()[j];
        }
        CHECK(std::sqrt(num) <= 1e-4 * std::sqrt(den));
    }
}

TEST_CASE("softmax symmetric row") {
    tensor x({1, 2}, {0, 0});
    tensor y = softmax_rows(x);
    CHECK(y.at(0, 0) == doctest::Approx(0.5));
    CHECK(y.at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("softmax max-shift stability") {
    tensor x({1, 2}, {1000, 0});
    tensor y = softmax_rows(x);
    CHECK(y.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.at(0, 1) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
    rng stream(3);
    tensor x = random_tensor({3, 4}, stream, 2.0);
    tensor y = softmax_rows(x);
    for (int64_t i = 0; i < 3; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < 4; ++j) sum += y.at(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("cosine similarity") {
    std::vector<float> x = {1, 2, 3}, y = {4, 5, 6};
    SUBCASE("identical vectors give exactly 1") {
        CHECK(cosine_sim(std::span<const float>(x), std::span<const float>(x)) == 1.0);
    }
    SUBCASE("orthogonal vectors give 0") {
        std::vector<float> e0 = {1, 0}, e1 = {0, 1};
        CHECK(cosine_sim(std::span<const float>(e0), std::span<const float>(e1)) == 0.0);
    }
    SUBCASE("hand-computed value") {
        // 32 / (sqrt(14) * sqrt(77))
        CHECK(cosine_sim(std::span<const float>(x), std::span<const float>(y)) ==
              doctest::Approx(0.9746318461970762).epsilon(1e-12));
    }
    SUBCASE("zero norm raises") {
        std::vector<float> z = {0, 0, 0};
        CHECK_THROWS_AS(cosine_sim(std::span<const float>(x), std::span<const float>(z)), error);
    }
    SUBCASE("positive rescaling keeps cosine at exactly 1") {
        // power-of-two scales keep s*x exactly representable
        rng stream(5);
        for (double s : {0.5, 2.0, 128.0}) {
            std::vector<float> v(8), sv(8);
            for (size_t i = 0; i < v.size(); ++i) {
                v[i] = static_cast<float>(stream.next_gaussian());
                sv[i] = static_cast<float>(s) * v[i];
            }
            CHECK(cosine_sim(std::span<const float>(v), std::span<const float>(sv)) == 1.0);
        }
    }
}

TEST_CASE("axpy_scale") {
    rng stream(11);
    tensor w0 = random_tensor({3, 3}, stream);
    tensor delta = random_tensor({3, 3}, stream);
    SUBCASE("alpha 0 returns w0 bit-identically") {
        CHECK(bit_equal(axpy_scale(w0, delta, 0.0), w0));
    }
    SUBCASE("zero base, alpha 1 returns delta") {
        CHECK(bit_equal(axpy_scale(tensor::zeros({3, 3}), delta, 1.0), delta));
    }
    SUBCASE("alpha 1.1 equals loop oracle") {
        tensor got = axpy_scale(w0, delta, 1.1);
        for (size_t i = 0; i < got.values().size(); ++i) {
            float expect = w0.values()[i] + 1.1f * delta.values()[i];
            CHECK(got.values()[i] == expect);
        }
    }
    SUBCASE("shape mismatch raises") {
        CHECK_THROWS_AS(axpy_scale(w0, tensor::zeros({2, 2}), 1.0), error);
    }
}

TEST_CASE("tensor construction invariants") {
    CHECK_THROWS_AS(tensor({2, 2}, {1, 2, 3}), error);       // element count mismatch
    CHECK_THROWS_AS(tensor::zeros({}), error);               // zero-dim rejected
    CHECK_THROWS_AS(tensor::zeros({2, 0}), error);           // dims >= 1
}

TEST_CASE("f16 conversion table") {
    struct row {
        float value;
        uint16_t bits;
    };
    const row table[] = {
        {1.0f, 0x3C00},  {-2.0f, 0xC000},   {0.5f, 0x3800},
        {65504.0f, 0x7BFF},                                  // largest normal
        {5.9604644775390625e-08f, 0x0001},                   // smallest subnormal, 2^-24
        {6.103515625e-05f, 0x0400},                          // smallest normal, 2^-14
        {0.0f, 0x0000},  {-0.0f, 0x8000},
    };
    for (const row& r : table) {
        CHECK(f32_to_f16(r.value) == r.bits);
        CHECK(f16_to_f32(r.bits) == r.value);
    }
}

TEST_CASE("f16 round-to-nearest-even ties") {
    // 1 + 2^-11 sits exactly between 1.0 and 1 + 2^-10: ties to even (1.0).
    CHECK(f32_to_f16(1.0f + 0x1.0p-11f) == 0x3C00);
    // 1 + 3*2^-11 ties between 1+2^-10 and 1+2^-9: even mantissa wins (2 ulp).
    CHECK(f32_to_f16(1.0f + 3 * 0x1.0p-11f) == 0x3C02);
    // Just above the tie rounds up.
    CHECK(f32_to_f16(1.0f + 0x1.0p-11f + 0x1.0p-20f) == 0x3C01);
}

TEST_CASE("f16 round trip is bit-exact on the encoded image") {
    rng stream(13);
    for (int i = 0; i < 2000; ++i) {
        float x = static_cast<float>(stream.next_gaussian() * 100.0);
        uint16_t h = f32_to_f16(x);
        float back = f16_to_f32(h);
        CHECK(f32_to_f16(back) == h);         // idempotent
        float twice = f16_to_f32(f32_to_f16(back));
        CHECK(std::memcmp(&back, &twice, 4) == 0);
    }
}

TEST_CASE("half payloads must decode finite") {
    const uint8_t inf_bits[2] = {0x00, 0x7C};   // +inf f16
    CHECK_THROWS_AS(tensor::from_bytes({1}, dtype::f16, std::span<const uint8_t>(inf_bits, 2)), error);
    const uint8_t ninf_bits[2] = {0x00, 0xFC};  // -inf
    CHECK_THROWS_AS(tensor::from_bytes({1}, dtype::f16, std::span<const uint8_t>(ninf_bits, 2)), error);
    const uint8_t nan_bits[2] = {0x00, 0x7E};
    CHECK_THROWS_AS(tensor::from_bytes({1}, dtype::f16, std::span<const uint8_t>(nan_bits, 2)), error);

    tensor big({1}, {1e30f});
    big.set_storage_dtype(dtype::f16);
    CHECK_THROWS_AS(big.to_bytes(), error);     // overflows f16 to infinity
}

TEST_CASE("bf16 conversions") {
    CHECK(f32_to_bf16(1.0f) == 0x3F80);
    CHECK(bf16_to_f32(0x3F80) == 1.0f);
    CHECK(f32_to_bf16(-2.0f) == 0xC000);
    // Nearest-even on the 16-bit truncation boundary (mantissa step 2^-7).
    CHECK(f32_to_bf16(1.0f + 0x1.0p-8f) == 0x3F80);             // tie to even
    CHECK(f32_to_bf16(1.0f + 3 * 0x1.0p-8f) == 0x3F82);         // tie to even (up)
    CHECK(f32_to_bf16(1.0f + 0x1.0p-8f + 0x1.0p-16f) == 0x3F81);
    rng stream(17);
    for (int i = 0; i < 500; ++i) {
        float x = static_cast<float>(stream.next_gaussian());
        uint16_t b = f32_to_bf16(x);
        CHECK(f32_to_bf16(bf16_to_f32(b)) == b);
    }
}

TEST_CASE("rng is seed-deterministic with documented golden values") {
    rng a(42), b(42);
    const uint64_t golden[4] = {
        0xbdd732262feb6e95ull,
        0x28efe333b266f103ull,
        0x47526757130f9f52ull,
        0x581ce1ff0e4ae394ull,
    };
    for (uint64_t g : golden) {
        uint64_t x = a.next_u64();
        CHECK(x == b.next_u64());
        CHECK(x == g);
    }
    CHECK(rng::derive(7, "x", 1, 2).next_u64() == 0x814f928fe9e3fecbull);
    CHECK(rng::derive(7, "x", 1, 2).next_u64() != rng::derive(7, "x", 2, 1).next_u64());
    CHECK(rng::derive(7, "x").next_u64() != rng::derive(7, "y").next_u64());
}

TEST_CASE("rng gaussian stream is reproducible") {
    rng a(1), b(1);
    for (int i = 0; i < 100; ++i) CHECK(a.next_gaussian() == b.next_gaussian());
}
