#include <catch2/catch_amalgamated.hpp>

#include "apla/gradcheck.hpp"
#include "apla/graph.hpp"

using namespace apla;

TEST_CASE("matmul hand value") {
    Graph<double> g;
    Var a = g.constant(Tensor<double>({1, 2}, {1, 2}));
    Var b = g.constant(Tensor<double>({2, 1}, {3, 4}));
    Var c = g.matmul(a, b);
    REQUIRE(g.shape(c) == Shape{1, 1});
    REQUIRE(g.value(c)[0] == 11.0);
}

TEST_CASE("matmul inner mismatch throws") {
    Graph<double> g;
    Var a = g.constant(Tensor<double>(Shape{2, 3}, 1.0));
    Var b = g.constant(Tensor<double>(Shape{2, 3}, 1.0));
    REQUIRE_THROWS_AS(g.matmul(a, b), DimError);
}

TEST_CASE("elementwise ops require identical shapes") {
    Graph<double> g;
    Var a = g.constant(Tensor<double>(Shape{2, 3}, 1.0));
    Var b = g.constant(Tensor<double>(Shape{3, 2}, 1.0));
    REQUIRE_THROWS_AS(g.add(a, b), DimError);
    REQUIRE_THROWS_AS(g.mul(a, b), DimError);
}

TEST_CASE("softmax is overflow-safe and rows sum to one") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({1, 2}, {1000.0, 0.0}));
    Var y = g.softmax_rows(x);
    REQUIRE(g.value(y)[0] == Catch::Approx(1.0).margin(1e-300));
    REQUIRE(g.value(y)[1] == Catch::Approx(0.0).margin(1e-300));

    Tensor<double> r(Shape{4, 7});
    Rng rng(5);
    fill_uniform(r, rng, -30.0, 30.0);
    Var z = g.softmax_rows(g.constant(r));
    for (int64_t row = 0; row < 4; ++row) {
        double s = 0;
        for (int64_t c = 0; c < 7; ++c) s += g.value(z)[row * 7 + c];
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layer_norm maps constant rows to bias") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>(Shape{2, 5}, 3.7));
    Var gain = g.constant(Tensor<double>(Shape{5}, 1.0));
    Var bias = g.constant(Tensor<double>(Shape{5}, 0.0));
    Var y = g.layer_norm(x, gain, bias, 1e-5);
    for (int64_t i = 0; i < 10; ++i) REQUIRE(std::abs(g.value(y)[i]) < 1e-12);
}

TEST_CASE("conv3d all-ones interior equals kernel volume") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>(Shape{1, 1, 5, 5, 5}, 1.0));
    Var k = g.constant(Tensor<double>(Shape{1, 1, 3, 3, 3}, 1.0));
    Var y = g.conv3d(x, k, {1, 1, 1}, {1, 1, 1});
    REQUIRE(g.shape(y) == Shape{1, 1, 5, 5, 5});
    // Fully covered center: 3*3*3 = 27. A corner sees only the 2x2x2 overlap.
    int64_t center = ((2 * 5) + 2) * 5 + 2;
    REQUIRE(g.value(y)[center] == Catch::Approx(27.0));
    REQUIRE(g.value(y)[0] == Catch::Approx(8.0));
}

TEST_CASE("conv_transpose3d output extent formula") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>(Shape{1, 2, 4, 3, 3}, 1.0));
    Var k = g.constant(Tensor<double>(Shape{2, 5, 3, 2, 2}, 1.0));
    Var y = g.conv_transpose3d(x, k, {1, 2, 2}, {1, 0, 0});
    // (in-1)*s - 2p + k per axis: f: 3-2+3=4, h/w: 2*2-0+2=6.
    REQUIRE(g.shape(y) == Shape{1, 5, 4, 6, 6});
}

TEST_CASE("conv_transpose3d mirrors conv3d as an adjoint") {
    // <conv(x), y> == <x, conv_t(y)> when both use the same kernel layout
    // (transpose kernel stored as (C, O, ...) with C = conv's O).
    Rng rng(7);
    Tensor<double> x(Shape{1, 2, 3, 4, 4});
    Tensor<double> k(Shape{3, 2, 1, 2, 2});
    fill_normal(x, rng);
    fill_normal(k, rng);
    Graph<double> g;
    Var xv = g.constant(x);
    Var kv = g.constant(k);
    Var cx = g.conv3d(xv, kv, {1, 2, 2}, {0, 0, 0});
    Tensor<double> y(g.shape(cx));
    fill_normal(y, rng);
    double lhs = 0;
    for (int64_t i = 0; i < y.numel(); ++i) lhs += g.value(cx)[i] * y[i];

    // Re-layout kernel (O,C,...) -> (C,O,...) for the transpose direction.
    Tensor<double> kt(Shape{3, 2, 1, 2, 2});
    for (int64_t o = 0; o < 3; ++o)
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t i = 0; i < 4; ++i) kt[(o * 2 + c) * 4 + i] = k[(o * 2 + c) * 4 + i];
    Var yv = g.constant(y);
    Var ty = g.conv_transpose3d(yv, g.constant(kt), {1, 2, 2}, {0, 0, 0});
    REQUIRE(g.shape(ty) == x.shape());
    double rhs = 0;
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * g.value(ty)[i];
    REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("backward of sum is ones, of sum of squares is 2x") {
    Tensor<double> x(Shape{2, 3});
    Rng rng(3);
    fill_normal(x, rng);
    x.requires_grad = true;

    {
        Graph<double> g;
        Var xv = g.leaf(x);
        g.backward(g.sum(xv));
        for (size_t i = 0; i < 6; ++i) REQUIRE(x.grad[i] == 1.0);
    }
    x.zero_grad();
    {
        Graph<double> g;
        Var xv = g.leaf(x);
        g.backward(g.sum(g.mul(xv, xv)));
        for (int64_t i = 0; i < 6; ++i)
            REQUIRE(x.grad[size_t(i)] == Catch::Approx(2.0 * x[i]).epsilon(1e-14));
    }
}

TEST_CASE("leaf gradients accumulate until zeroed") {
    Tensor<double> x(Shape{3}, 1.0);
    x.requires_grad = true;
    for (int rep = 0; rep < 2; ++rep) {
        Graph<double> g;
        g.backward(g.sum(g.leaf(x)));
    }
    for (size_t i = 0; i < 3; ++i) REQUIRE(x.grad[i] == 2.0);
    x.zero_grad();
    for (size_t i = 0; i < 3; ++i) REQUIRE(x.grad[i] == 0.0);
}

TEST_CASE("second backward without new forward throws StateError") {
    Tensor<double> x(Shape{2}, 1.0);
    x.requires_grad = true;
    Graph<double> g;
    Var l = g.sum(g.leaf(x));
    g.backward(l);
    REQUIRE_THROWS_AS(g.backward(l), StateError);
}

TEST_CASE("non-scalar backward target throws") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>(Shape{2, 2}, 1.0));
    REQUIRE_THROWS_AS(g.backward(x), ContractError);
}

TEST_CASE("non-finite forward result throws NumericError") {
    Graph<double> g;
    Var big = g.constant(Tensor<double>(Shape{2}, 1e308));
    REQUIRE_THROWS_AS(g.add(big, big), NumericError);
    Var z = g.constant(Tensor<double>(Shape{1}, 0.0));
    Var inf = g.constant(Tensor<double>(Shape{1}, std::numeric_limits<double>::infinity()));
    REQUIRE_THROWS_AS(g.mul(z, inf), NumericError);
}

TEST_CASE("constants and untracked leaves receive no gradient") {
    Tensor<double> w(Shape{2}, 2.0);
    w.requires_grad = true;
    Tensor<double> frozen(Shape{2}, 3.0);  // requires_grad stays false
    Graph<double> g;
    Var wv = g.leaf(w);
    Var fv = g.leaf(frozen);
    Var cv = g.constant(Tensor<double>(Shape{2}, 5.0));
    g.backward(g.sum(g.mul(g.mul(wv, fv), cv)));
    REQUIRE(frozen.grad.empty());
    REQUIRE(w.grad[0] == 15.0);
    REQUIRE(w.grad[1] == 15.0);
}

TEST_CASE("slice and concat invert each other") {
    Tensor<double> x(Shape{4, 3});
    Rng rng(9);
    fill_normal(x, rng);
    Graph<double> g;
    Var xv = g.constant(x);
    Var top = g.slice_rows(xv, 0, 1);
    Var rest = g.slice_rows(xv, 1, 3);
    Var back = g.concat_rows({top, rest});
    REQUIRE(max_abs_diff(g.value(back), x) == 0.0);

    Var left = g.slice_cols(xv, 0, 2);
    Var right = g.slice_cols(xv, 2, 1);
    Var back2 = g.concat_cols({left, right});
    REQUIRE(max_abs_diff(g.value(back2), x) == 0.0);
}

TEST_CASE("gather applies an index map") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({2, 2}, {10, 20, 30, 40}));
    Var y = g.gather(x, {3, 2, 1, 0}, {4});
    REQUIRE(g.value(y)[0] == 40.0);
    REQUIRE(g.value(y)[3] == 10.0);
    REQUIRE_THROWS_AS(g.gather(x, {0, 4}, {2}), DimError);
}

TEST_CASE("mul_frames broadcasts one frame vector per frame") {
    Graph<double> g;
    // 2 frames, 2 tokens, width 2.
    Var p = g.constant(Tensor<double>({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
    Var f = g.constant(Tensor<double>({2, 2}, {10, 100, 1000, 10000}));
    Var y = g.mul_frames(p, f);
    std::vector<double> want{10, 200, 30, 400, 5000, 60000, 7000, 80000};
    for (int64_t i = 0; i < 8; ++i) REQUIRE(g.value(y)[i] == want[size_t(i)]);
}

TEST_CASE("finite differences agree with the tape on every op") {
    for (auto& check : op_gradient_suite()) {
        INFO(check.name);
        double err = check.run();
        CAPTURE(err);
        REQUIRE(err < 1e-4);
    }
}
