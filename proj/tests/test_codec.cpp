#include <catch2/catch_amalgamated.hpp>

#include "apla/codec.hpp"

using namespace apla;

TEST_CASE("identity codec at r=1 is a pass-through") {
    Codec<float> codec({1, 2, 0, true});
    Tensor<float> x(Shape{1, 3, 2, 4, 4});
    Rng rng(1);
    fill_uniform(x, rng);
    Tensor<float> z = codec.encode(x);
    REQUIRE(z.shape() == x.shape());
    REQUIRE(max_abs_diff(z, x) == 0.0);
    Tensor<float> z0(Shape{1, 3, 2, 4, 4}, 0.0f);
    REQUIRE(max_abs_diff(codec.decode(z0), z0) == 0.0);
}

TEST_CASE("encode shape arithmetic") {
    Codec<float> codec({2, 1, 7, false});
    Tensor<float> x(Shape{1, 4, 1, 16, 16}, 0.25f);
    Tensor<float> z = codec.encode(x);
    REQUIRE(z.shape() == Shape{1, 4, 4, 8, 8});
}

TEST_CASE("indivisible extents are rejected") {
    Codec<float> codec({2, 1, 7, false});
    Tensor<float> x(Shape{1, 2, 1, 15, 16});
    REQUIRE_THROWS_AS(codec.encode(x), DimError);
    Tensor<float> wrong_c(Shape{1, 2, 3, 16, 16});
    REQUIRE_THROWS_AS(codec.encode(wrong_c), DimError);
    Tensor<float> bad_z(Shape{1, 2, 3, 8, 8});
    REQUIRE_THROWS_AS(codec.decode(bad_z), DimError);
}

TEST_CASE("basis is orthogonal") {
    Codec<double> codec({2, 3, 41, false});
    const Tensor<double>& q = codec.basis();
    int64_t D = codec.dim();
    REQUIRE(D == 12);
    for (int64_t i = 0; i < D; ++i)
        for (int64_t j = 0; j < D; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < D; ++k) dot += q[i * D + k] * q[j * D + k];
            REQUIRE(dot == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));
        }
}

TEST_CASE("decode inverts encode within float error") {
    Codec<float> codec({2, 1, 7, false});
    Tensor<float> x(Shape{2, 3, 1, 8, 8});
    Rng rng(5);
    fill_uniform(x, rng);  // [0,1): clamping stays inert up to fp wiggle
    Tensor<float> back = codec.decode(codec.encode(x));
    REQUIRE(back.shape() == x.shape());
    REQUIRE(max_abs_diff(back, x) < 1e-5);
}

TEST_CASE("decode clamps out-of-range values") {
    Codec<float> codec({1, 1, 0, true});
    Tensor<float> z(Shape{1, 1, 1, 1, 2}, {1.2f, -0.3f});
    Tensor<float> x = codec.decode(z);
    REQUIRE(x[0] == 1.0f);
    REQUIRE(x[1] == 0.0f);
    Tensor<float> raw = codec.decode(z, false);
    REQUIRE(raw[0] == Catch::Approx(1.2f));
    REQUIRE(raw[1] == Catch::Approx(-0.3f));
}

TEST_CASE("encoder is linear in its input") {
    Codec<float> codec({2, 1, 9, false});
    Tensor<float> x(Shape{1, 2, 1, 8, 8});
    Rng rng(6);
    fill_uniform(x, rng);
    Tensor<float> x3 = x;
    for (int64_t i = 0; i < x3.numel(); ++i) x3[i] *= 3.0f;
    Tensor<float> z = codec.encode(x);
    Tensor<float> z3 = codec.encode(x3);
    for (int64_t i = 0; i < z.numel(); ++i)
        REQUIRE(z3[i] == Catch::Approx(3.0f * z[i]).margin(1e-5));
}

TEST_CASE("patch grid counting") {
    PatchGrid whole = make_grid(4, 8, 8, 8);
    REQUIRE(whole.tokens_per_frame() == 1);
    REQUIRE(whole.token_width() == 4 * 64);
    PatchGrid quads = make_grid(4, 8, 8, 4);
    REQUIRE(quads.tokens_per_frame() == 4);
    REQUIRE_THROWS_AS(make_grid(4, 8, 8, 3), DimError);
}

TEST_CASE("patchify and unpatchify are exact inverses") {
    PatchGrid g = make_grid(3, 6, 4, 2);
    Tensor<float> z(Shape{1, 5, 3, 6, 4});
    Rng rng(8);
    fill_normal(z, rng);
    Tensor<float> tok = patchify(z, g);
    REQUIRE(tok.shape() == Shape{5, 6, 12});
    Tensor<float> back = unpatchify(tok, g);
    REQUIRE(max_abs_diff(back, z) == 0.0);

    // Opposite composition too: tokens -> latent -> tokens.
    Tensor<float> tok2 = patchify(unpatchify(tok, g), g);
    REQUIRE(max_abs_diff(tok2, tok) == 0.0);

    // The two maps are mutually inverse permutations.
    auto fwd = patchify_map(5, g);
    auto inv = unpatchify_map(5, g);
    for (size_t i = 0; i < fwd.size(); ++i) REQUIRE(inv[size_t(fwd[i])] == int64_t(i));
}

TEST_CASE("patchify keeps patch contents contiguous") {
    // 1 frame, 1 channel, 4x4 latent, P=2: token 0 is the top-left patch.
    PatchGrid g = make_grid(1, 4, 4, 2);
    Tensor<float> z(Shape{1, 1, 1, 4, 4});
    for (int64_t i = 0; i < 16; ++i) z[i] = float(i);
    Tensor<float> tok = patchify(z, g);
    REQUIRE(tok.shape() == Shape{1, 4, 4});
    std::vector<float> want{0, 1, 4, 5};
    for (int64_t k = 0; k < 4; ++k) REQUIRE(tok[k] == want[size_t(k)]);
    // Raster order of tokens: second token is the top-right patch.
    REQUIRE(tok[4] == 2.0f);
}
