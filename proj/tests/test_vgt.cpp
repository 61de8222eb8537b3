#include <catch2/catch_amalgamated.hpp>

#include "apla/gradcheck.hpp"
#include "apla/vgt.hpp"

using namespace apla;

namespace {
VgtConfig tiny_cfg(VgtVariant variant = VgtVariant::pure, bool masked = true) {
    VgtConfig cfg;
    cfg.variant = variant;
    cfg.L = 1;
    cfg.M = 1;
    cfg.heads = 2;
    cfg.d = 8;
    cfg.P = 2;
    cfg.masked = masked;
    cfg.frames = 2;
    cfg.channels = 1;
    cfg.latent_h = 4;
    cfg.latent_w = 4;
    cfg.T = 10;
    cfg.seed = 33;
    return cfg;
}

Tensor<double> rand_latent(const VgtConfig& cfg, uint64_t seed, int64_t B = 1) {
    Tensor<double> z(Shape{B, cfg.frames, cfg.channels, cfg.latent_h, cfg.latent_w});
    Rng rng(seed);
    fill_normal(z, rng, 0.5);
    return z;
}
}  // namespace

TEST_CASE("config validation") {
    VgtConfig bad = tiny_cfg();
    bad.d = 9;  // not divisible by heads
    REQUIRE_THROWS_AS(Vgt<double>(bad), ConfigError);
    bad = tiny_cfg();
    bad.L = 0;
    REQUIRE_THROWS_AS(Vgt<double>(bad), ConfigError);
    bad = tiny_cfg(VgtVariant::hyper);
    bad.latent_w = 8;  // non-square patch grid
    REQUIRE_THROWS_AS(Vgt<double>(bad), ConfigError);
    bad = tiny_cfg(VgtVariant::hyper);
    bad.latent_h = bad.latent_w = 12;  // grid 6: not a power of two
    REQUIRE_THROWS_AS(Vgt<double>(bad), ConfigError);
}

TEST_CASE("single-token attention reduces to value projection plus residual") {
    Vgt<double> v(tiny_cfg());
    int64_t d = 8;
    Tensor<double> seq(Shape{1, d});
    Rng rng(3);
    fill_normal(seq, rng);

    Graph<double> g;
    Var out = v.mmsa(g, g.constant(seq), g.constant(additive_causal_mask<double>(1)),
                     v.spatial_[0]);

    // Expected: ((LN(z) Wv + bv) Wo + bo) + z, attention weight pinned at 1.
    auto& blk = v.spatial_[0];
    Graph<double> e;
    Var ln = e.layer_norm(e.constant(seq), e.constant(blk.ln_g), e.constant(blk.ln_b), 1e-5);
    Var val = e.add_bias_rows(e.matmul(ln, e.constant(blk.wv)), e.constant(blk.bv));
    Var want = e.add(e.add_bias_rows(e.matmul(val, e.constant(blk.wo)), e.constant(blk.bo)),
                     e.constant(seq));
    REQUIRE(max_abs_diff(g.value(out), e.value(want)) < 1e-12);
}

TEST_CASE("mmsa rejects malformed masks") {
    Vgt<double> v(tiny_cfg());
    Graph<double> g;
    Var seq = g.constant(Tensor<double>(Shape{3, 8}, 0.1));
    REQUIRE_THROWS_AS(v.mmsa(g, seq, g.constant(Tensor<double>(Shape{3, 4}, 0.0)), v.spatial_[0]),
                      DimError);
    REQUIRE_THROWS_AS(v.mmsa(g, seq, g.constant(Tensor<double>(Shape{4, 4}, 0.0)), v.spatial_[0]),
                      DimError);
}

TEST_CASE("masked attention is exactly causal, unmasked is not") {
    Vgt<double> v(tiny_cfg());
    int64_t n = 5, d = 8;
    Tensor<double> seq(Shape{n, d});
    Rng rng(4);
    fill_normal(seq, rng);
    Tensor<double> pert = seq;
    pert[3 * d + 2] += 0.37;  // poke token 3

    auto run = [&](const Tensor<double>& s, const Tensor<double>& mask) {
        Graph<double> g;
        return g.value(v.mmsa(g, g.constant(s), g.constant(mask), v.spatial_[0]));
    };
    Tensor<double> causal = additive_causal_mask<double>(n);
    Tensor<double> full = additive_full_mask<double>(n);

    Tensor<double> a = run(seq, causal), b = run(pert, causal);
    for (int64_t i = 0; i < 3 * d; ++i) REQUIRE(a[i] == b[i]);  // rows < 3: bitwise equal
    double below = 0;
    for (int64_t i = 3 * d; i < n * d; ++i) below = std::max(below, std::abs(a[i] - b[i]));
    REQUIRE(below > 0.0);

    Tensor<double> c = run(seq, full), e = run(pert, full);
    double above = 0;
    for (int64_t i = 0; i < 3 * d; ++i) above = std::max(above, std::abs(c[i] - e[i]));
    REQUIRE(above > 0.0);  // with all-true mask the change leaks backward
}

TEST_CASE("spatial decode shapes and cls independence") {
    // Single patch per frame: the sequence is [cls, patch]; under the causal
    // mask the cls row attends only to itself, so it cannot see the patch.
    VgtConfig cfg = tiny_cfg();
    cfg.P = 4;  // whole 4x4 frame in one token
    Vgt<double> v(cfg);
    Tensor<double> z1 = rand_latent(cfg, 5);
    Tensor<double> z2 = rand_latent(cfg, 6);

    auto spatial_cls = [&](const Tensor<double>& z) {
        Graph<double> g;
        auto sp = v.spatial_decode(g, g.constant(z), 3);
        REQUIRE(g.shape(sp.cls) == Shape{cfg.frames, cfg.d});
        REQUIRE(g.shape(sp.patches) == Shape{cfg.frames, 1, cfg.d});
        return g.value(sp.cls);
    };
    REQUIRE(max_abs_diff(spatial_cls(z1), spatial_cls(z2)) == 0.0);
}

TEST_CASE("spatial decode validates geometry and step") {
    VgtConfig cfg = tiny_cfg();
    Vgt<double> v(cfg);
    Graph<double> g;
    Tensor<double> wrong(Shape{1, 2, 1, 4, 8}, 0.1);
    REQUIRE_THROWS_AS(v.spatial_decode(g, g.constant(wrong), 1), DimError);
    Tensor<double> ok(Shape{1, 2, 1, 4, 4}, 0.1);
    REQUIRE_THROWS_AS(v.spatial_decode(g, g.constant(ok), 0), ContractError);
    REQUIRE_THROWS_AS(v.spatial_decode(g, g.constant(ok), 11), ContractError);
}

TEST_CASE("temporal decode is causal over frames") {
    VgtConfig cfg = tiny_cfg();
    cfg.frames = 5;
    Vgt<double> v(cfg);
    Tensor<double> cls(Shape{5, 8});
    Rng rng(7);
    fill_normal(cls, rng);
    Tensor<double> pert = cls;
    pert[3 * 8 + 1] += 0.5;  // poke frame 3's cls input

    auto run = [&](const Tensor<double>& c) {
        Graph<double> g;
        auto tp = v.temporal_decode(g, g.constant(c));
        REQUIRE(g.shape(tp.cls) == Shape{1, 8});
        REQUIRE(g.shape(tp.frames) == Shape{5, 8});
        REQUIRE(g.shape(tp.seq) == Shape{6, 8});
        return g.value(tp.frames);
    };
    Tensor<double> a = run(cls), b = run(pert);
    for (int64_t f = 0; f < 3; ++f)
        for (int64_t k = 0; k < 8; ++k) REQUIRE(a[f * 8 + k] == b[f * 8 + k]);
    double later = 0;
    for (int64_t i = 3 * 8; i < 5 * 8; ++i) later = std::max(later, std::abs(a[i] - b[i]));
    REQUIRE(later > 0.0);
}

TEST_CASE("single-frame temporal decode works") {
    VgtConfig cfg = tiny_cfg();
    cfg.frames = 1;
    Vgt<double> v(cfg);
    Graph<double> g;
    auto tp = v.temporal_decode(g, g.constant(Tensor<double>(Shape{1, 8}, 0.3)));
    REQUIRE(g.shape(tp.frames) == Shape{1, 8});
}

TEST_CASE("pure fusion is the broadcast Hadamard product") {
    Vgt<double> v(tiny_cfg());
    Graph<double> g;
    Tensor<double> patches(Shape{2, 4, 8});
    Rng rng(8);
    fill_normal(patches, rng);

    Var ones = g.constant(Tensor<double>(Shape{2, 8}, 1.0));
    Var y = v.fuse_pure(g, g.constant(patches), ones);
    REQUIRE(max_abs_diff(g.value(y), patches) == 0.0);

    Var zeros = g.constant(Tensor<double>(Shape{2, 4, 8}, 0.0));
    Tensor<double> frames(Shape{2, 8});
    fill_normal(frames, rng);
    Var y0 = v.fuse_pure(g, zeros, g.constant(frames));
    for (int64_t i = 0; i < g.value(y0).numel(); ++i) REQUIRE(g.value(y0)[i] == 0.0);

    Var y2 = v.fuse_pure(g, g.constant(patches), g.constant(frames));
    for (int64_t f = 0; f < 2; ++f)
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t k = 0; k < 8; ++k)
                REQUIRE(g.value(y2)[(f * 4 + n) * 8 + k] ==
                        patches[(f * 4 + n) * 8 + k] * frames[f * 8 + k]);
}

TEST_CASE("hyper fusion pass-through at a 1x1 grid") {
    VgtConfig cfg = tiny_cfg(VgtVariant::hyper);
    cfg.P = 4;  // hp = wp = 1: single 1x1x1 stage
    Vgt<double> v(cfg);
    REQUIRE(v.hyper_w.size() == 1);
    REQUIRE(v.hyper_w[0].shape() == Shape{8, 8, 1, 1, 1});
    // Identity-configure the stage.
    v.hyper_w[0].fill(0.0);
    for (int64_t c = 0; c < 8; ++c) v.hyper_w[0][c * 8 + c] = 1.0;
    v.hyper_b[0].fill(0.0);

    Tensor<double> seq(Shape{3, 8});
    Rng rng(9);
    fill_normal(seq, rng);
    Graph<double> g;
    Var y = v.fuse_hyper(g, g.constant(seq));
    REQUIRE(g.shape(y) == Shape{2, 1, 8});
    for (int64_t f = 0; f < 2; ++f)
        for (int64_t k = 0; k < 8; ++k)
            REQUIRE(g.value(y)[f * 8 + k] == Catch::Approx(seq[(f + 1) * 8 + k]).margin(1e-12));
}

TEST_CASE("hyper fusion upsamples to the patch grid") {
    VgtConfig cfg = tiny_cfg(VgtVariant::hyper);  // latent 4x4, P=2 -> grid 2x2
    Vgt<double> v(cfg);
    REQUIRE(v.hyper_w.size() == 1);
    Graph<double> g;
    Tensor<double> seq(Shape{3, 8});
    Rng rng(10);
    fill_normal(seq, rng);
    Var y = v.fuse_hyper(g, g.constant(seq));
    REQUIRE(g.shape(y) == Shape{2, 4, 8});
    REQUIRE_THROWS_AS(v.fuse_hyper(g, g.constant(Tensor<double>(Shape{2, 8}, 0.0))), DimError);
    Vgt<double> pure(tiny_cfg());
    REQUIRE_THROWS_AS(pure.fuse_hyper(g, g.constant(seq)), ConfigError);
}

TEST_CASE("perturbation is exactly zero at construction") {
    for (VgtVariant variant : {VgtVariant::pure, VgtVariant::hyper}) {
        Vgt<double> v(tiny_cfg(variant));
        Tensor<double> z = rand_latent(tiny_cfg(), 11);
        Tensor<double> p = v.perturb(z, 2);
        REQUIRE(p.shape() == z.shape());
        for (int64_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == 0.0);
    }
}

TEST_CASE("forward preserves shape and handles batches") {
    VgtConfig cfg = tiny_cfg();
    Vgt<double> v(cfg);
    Rng rng(12);
    fill_normal(v.mlp2_w, rng, 0.1);
    fill_normal(v.mlp2_b, rng, 0.1);
    Tensor<double> z = rand_latent(cfg, 13, 3);
    Tensor<double> p = v.perturb(z, 1);
    REQUIRE(p.shape() == z.shape());
    // Each batch row must equal its own single-batch run.
    int64_t stride = z.numel() / 3;
    for (int64_t b = 0; b < 3; ++b) {
        Tensor<double> zb(Shape{1, cfg.frames, cfg.channels, cfg.latent_h, cfg.latent_w});
        for (int64_t i = 0; i < stride; ++i) zb[i] = z[b * stride + i];
        Tensor<double> pb = v.perturb(zb, 1);
        for (int64_t i = 0; i < stride; ++i) REQUIRE(pb[i] == p[b * stride + i]);
    }
    REQUIRE(v.forward_count() == 4);
}

TEST_CASE("pure pipeline output at frame f ignores frames after f") {
    VgtConfig cfg = tiny_cfg();
    cfg.frames = 4;
    Vgt<double> v(cfg);
    Rng rng(14);
    fill_normal(v.mlp2_w, rng, 0.1);  // wake the zero head so outputs are nonzero
    fill_normal(v.mlp2_b, rng, 0.1);

    Tensor<double> z = rand_latent(cfg, 15);
    Tensor<double> z2 = z;
    int64_t frame_sz = cfg.channels * cfg.latent_h * cfg.latent_w;
    for (int64_t f = 2; f < 4; ++f)  // rewrite frames 2 and 3 entirely
        for (int64_t i = 0; i < frame_sz; ++i) z2[f * frame_sz + i] = rng.normal();

    Tensor<double> a = v.perturb(z, 3);
    Tensor<double> b = v.perturb(z2, 3);
    for (int64_t i = 0; i < 2 * frame_sz; ++i) REQUIRE(a[i] == b[i]);  // frames 0,1 bitwise
    double later = 0;
    for (int64_t i = 2 * frame_sz; i < 4 * frame_sz; ++i)
        later = std::max(later, std::abs(a[i] - b[i]));
    REQUIRE(later > 0.0);

    // The unmasked ablation must not have this property.
    VgtConfig open_cfg = cfg;
    open_cfg.masked = false;
    Vgt<double> open_v(open_cfg);
    fill_normal(open_v.mlp2_w, rng, 0.1);
    fill_normal(open_v.mlp2_b, rng, 0.1);
    Tensor<double> c = open_v.perturb(z, 3);
    Tensor<double> d = open_v.perturb(z2, 3);
    double early = 0;
    for (int64_t i = 0; i < 2 * frame_sz; ++i) early = std::max(early, std::abs(c[i] - d[i]));
    REQUIRE(early > 0.0);
}

TEST_CASE("trainable parameter counting") {
    VgtConfig cfg = tiny_cfg();
    int64_t d = cfg.d, width = cfg.channels * cfg.P * cfg.P;  // 4
    int64_t N = 4, F = cfg.frames;
    auto block = [&]() { return 2 * d + 4 * (d * d + d); };
    int64_t want = (width * d + d)                 // patch embedding
                   + d + (1 + N) * d               // spatial cls + positions
                   + d + (1 + F) * d               // temporal cls + positions
                   + cfg.L * block()               // spatial stack
                   + (d * d + d) + 2 * d           // decoder projection + its norm
                   + cfg.M * block()               // temporal stack
                   + (d * d + d) + (d * width + width);  // head
    REQUIRE(count_trainable<double>(cfg) == want);

    VgtConfig open_cfg = cfg;
    open_cfg.masked = false;
    REQUIRE(count_trainable<double>(open_cfg) == want);  // mask is not a parameter

    VgtConfig hyper_cfg = tiny_cfg(VgtVariant::hyper);
    REQUIRE(count_trainable<double>(hyper_cfg) == want + (d * d * 1 * 2 * 2 + d));
    REQUIRE(count_trainable<double>(hyper_cfg) > count_trainable<double>(cfg));
}

TEST_CASE("full-stack gradients match finite differences") {
    for (VgtVariant variant : {VgtVariant::pure, VgtVariant::hyper}) {
        auto v = std::make_shared<Vgt<double>>(tiny_cfg(variant));
        Rng rng(16);
        fill_normal(v->mlp2_w, rng, 0.2);
        fill_normal(v->mlp2_b, rng, 0.2);
        auto z = std::make_shared<Tensor<double>>(rand_latent(tiny_cfg(), 17));

        std::vector<Tensor<double>*> params;
        for (auto& [name, t] : v->params()) params.push_back(t);
        params.push_back(z.get());

        double err = check_gradients(params, [v, z](Graph<double>& g) {
            return probe_sum(g, v->forward(g, g.leaf(*z), 2), 401);
        });
        CAPTURE(int(variant), err);
        REQUIRE(err < 1e-4);
    }
}

TEST_CASE("combined prediction at init equals the bare prediction") {
    DenoiserConfig dc;
    dc.channels = 1;
    dc.base = 2;
    dc.d_cond = 4;
    dc.n_prompts = 2;
    dc.T = 10;
    Denoiser<double> den(dc);
    Rng rng(18);
    fill_normal(den.out_w, rng, 0.2);  // trained-ish base model
    fill_normal(den.out_b, rng, 0.2);
    Vgt<double> v(tiny_cfg());  // untouched: zero head

    Tensor<double> z = rand_latent(tiny_cfg(), 19);
    auto cp = combine(den, v, z, z, 2, 1);
    REQUIRE(cp.norm_ratio == 0.0);
    for (int64_t i = 0; i < z.numel(); ++i) REQUIRE(cp.combined[i] == cp.unet_out[i]);
    REQUIRE(max_abs_diff(cp.unet_out, den.predict(z, 2, 1)) == 0.0);
}
