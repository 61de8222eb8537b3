#pragma once

// Video perturbation transformer. Frames are decoded spatially one at a time
// with shared weights (cls token at row 0, causal mask in raster order), the
// per-frame cls outputs are decoded temporally under a causal mask over frame
// order, and one of two fusion heads turns the result back into a latent-shaped
// perturbation: "pure" multiplies each frame's patch tokens by its temporal
// frame token, "hyper" upsamples the frame tokens with a per-frame stack of
// transposed convolutions. The MLP head's last layer is zero-initialized, so
// the perturbation is exactly zero at construction.

#include "apla/codec.hpp"
#include "apla/denoiser.hpp"
#include "apla/embed.hpp"
#include "apla/graph.hpp"

namespace apla {

enum class VgtVariant { pure, hyper };

struct VgtConfig {
    VgtVariant variant = VgtVariant::pure;
    int64_t L = 2;       // spatial layers
    int64_t M = 2;       // temporal layers
    int64_t heads = 2;
    int64_t d = 32;      // token width
    int64_t P = 2;       // patch size over the latent grid
    bool masked = true;  // false = unmasked ("-EN") ablation
    int64_t frames = 8;
    int64_t channels = 4;
    int64_t latent_h = 16, latent_w = 16;
    int64_t T = 50;
    uint64_t seed = 2;
};

// Additive attention masks: 0 where position i may attend j, -1e9 otherwise.
template <typename S>
Tensor<S> additive_causal_mask(int64_t n) {
    Tensor<S> m(Shape{n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) m[i * n + j] = j <= i ? S(0) : S(-1e9);
    return m;
}

template <typename S>
Tensor<S> additive_full_mask(int64_t n) {
    return Tensor<S>(Shape{n, n}, S(0));
}

template <typename S>
class Vgt {
public:
    struct Block {
        Tensor<S> ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo;
    };

    explicit Vgt(VgtConfig cfg) : cfg_(cfg) {
        if (cfg_.L < 1 || cfg_.M < 1) throw ConfigError("vgt: L and M must be >= 1");
        if (cfg_.heads < 1 || cfg_.d % cfg_.heads != 0)
            throw ConfigError("vgt: token width must be divisible by heads");
        grid_ = make_grid(cfg_.channels, cfg_.latent_h, cfg_.latent_w, cfg_.P);
        if (cfg_.variant == VgtVariant::hyper) {
            if (grid_.hp != grid_.wp)
                throw ConfigError("vgt hyper: patch grid must be square, got " +
                                  std::to_string(grid_.hp) + "x" + std::to_string(grid_.wp));
            int64_t e = grid_.hp;
            while (e > 1) {
                if (e % 2 != 0)
                    throw ConfigError("vgt hyper: grid extent " + std::to_string(grid_.hp) +
                                      " is not a power of two");
                e /= 2;
            }
        }
        int64_t d = cfg_.d, width = grid_.token_width(), N = grid_.tokens_per_frame();
        Rng rng(cfg_.seed);
        auto mat = [&rng](int64_t r, int64_t c) {
            Tensor<S> t(Shape{r, c});
            fill_normal(t, rng, 1.0 / std::sqrt(double(r)));
            return t;
        };
        embed_w = mat(width, d);
        embed_b = Tensor<S>(Shape{d});
        cls_s = Tensor<S>(Shape{1, d});
        fill_normal(cls_s, rng, 0.02);
        pos_s = Tensor<S>(Shape{1 + N, d});
        fill_normal(pos_s, rng, 0.02);
        cls_t = Tensor<S>(Shape{1, d});
        fill_normal(cls_t, rng, 0.02);
        pos_t = Tensor<S>(Shape{1 + cfg_.frames, d});
        fill_normal(pos_t, rng, 0.02);
        auto make_block = [&]() {
            Block b;
            b.ln_g = Tensor<S>(Shape{d}, S(1));
            b.ln_b = Tensor<S>(Shape{d});
            b.wq = mat(d, d);
            b.bq = Tensor<S>(Shape{d});
            b.wk = mat(d, d);
            b.bk = Tensor<S>(Shape{d});
            b.wv = mat(d, d);
            b.bv = Tensor<S>(Shape{d});
            b.wo = mat(d, d);
            b.bo = Tensor<S>(Shape{d});
            return b;
        };
        for (int64_t l = 0; l < cfg_.L; ++l) spatial_.push_back(make_block());
        dproj_w = mat(d, d);
        dproj_b = Tensor<S>(Shape{d});
        dln_g = Tensor<S>(Shape{d}, S(1));
        dln_b = Tensor<S>(Shape{d});
        for (int64_t m = 0; m < cfg_.M; ++m) temporal_.push_back(make_block());
        mlp1_w = mat(d, d);
        mlp1_b = Tensor<S>(Shape{d});
        mlp2_w = Tensor<S>(Shape{d, width});  // zero: perturbation starts at 0
        mlp2_b = Tensor<S>(Shape{width});
        if (cfg_.variant == VgtVariant::hyper) {
            int64_t stages = 0;
            for (int64_t e = grid_.hp; e > 1; e /= 2) ++stages;
            if (stages == 0) stages = 1;  // single 1x1x1 stage at a 1x1 grid
            int64_t kk = grid_.hp == 1 ? 1 : 2;
            for (int64_t s = 0; s < stages; ++s) {
                Tensor<S> w(Shape{d, d, 1, kk, kk});
                fill_normal(w, rng, 1.0 / std::sqrt(double(d * kk * kk)));
                hyper_w.push_back(std::move(w));
                hyper_b.push_back(Tensor<S>(Shape{d}));
            }
        }
    }

    const VgtConfig& config() const { return cfg_; }
    const PatchGrid& grid() const { return grid_; }
    int64_t forward_count() const { return forward_count_; }

    NamedParams<S> params() {
        NamedParams<S> out = {{"vgt.embed_w", &embed_w}, {"vgt.embed_b", &embed_b},
                              {"vgt.cls_s", &cls_s},     {"vgt.pos_s", &pos_s},
                              {"vgt.cls_t", &cls_t},     {"vgt.pos_t", &pos_t},
                              {"vgt.dproj_w", &dproj_w}, {"vgt.dproj_b", &dproj_b},
                              {"vgt.dln_g", &dln_g},     {"vgt.dln_b", &dln_b},
                              {"vgt.mlp1_w", &mlp1_w},   {"vgt.mlp1_b", &mlp1_b},
                              {"vgt.mlp2_w", &mlp2_w},   {"vgt.mlp2_b", &mlp2_b}};
        auto add_blocks = [&out](std::vector<Block>& blocks, const std::string& stem) {
            for (size_t i = 0; i < blocks.size(); ++i) {
                Block& b = blocks[i];
                std::string p = stem + std::to_string(i) + ".";
                out.push_back({p + "ln_g", &b.ln_g});
                out.push_back({p + "ln_b", &b.ln_b});
                out.push_back({p + "wq", &b.wq});
                out.push_back({p + "bq", &b.bq});
                out.push_back({p + "wk", &b.wk});
                out.push_back({p + "bk", &b.bk});
                out.push_back({p + "wv", &b.wv});
                out.push_back({p + "bv", &b.bv});
                out.push_back({p + "wo", &b.wo});
                out.push_back({p + "bo", &b.bo});
            }
        };
        add_blocks(spatial_, "vgt.s");
        add_blocks(temporal_, "vgt.t");
        for (size_t s = 0; s < hyper_w.size(); ++s) {
            out.push_back({"vgt.hyp" + std::to_string(s) + ".w", &hyper_w[s]});
            out.push_back({"vgt.hyp" + std::to_string(s) + ".b", &hyper_b[s]});
        }
        return out;
    }

    int64_t param_count() { return total_numel(params()); }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : params()) t->requires_grad = on;
    }

    // One masked attention block: z + MMSA(LN(z)). seq is (n, d); add_mask is
    // an (n, n) additive matrix (0 allowed / -1e9 blocked).
    Var mmsa(Graph<S>& g, Var seq, Var add_mask, Block& blk) {
        Shape ss = g.shape(seq);
        Shape ms = g.shape(add_mask);
        require(ss.size() == 2 && ss[1] == cfg_.d, "mmsa expects (n, d) tokens, got " +
                                                       shape_str(ss));
        if (ms.size() != 2 || ms[0] != ms[1])
            throw DimError("mmsa mask must be square, got " + shape_str(ms));
        require(ms[0] == ss[0], "mmsa mask size " + shape_str(ms) + " != sequence " +
                                    shape_str(ss));
        int64_t dh = cfg_.d / cfg_.heads;
        Var ln = g.layer_norm(seq, g.leaf(blk.ln_g), g.leaf(blk.ln_b), S(1e-5));
        Var q = g.add_bias_rows(g.matmul(ln, g.leaf(blk.wq)), g.leaf(blk.bq));
        Var k = g.add_bias_rows(g.matmul(ln, g.leaf(blk.wk)), g.leaf(blk.bk));
        Var v = g.add_bias_rows(g.matmul(ln, g.leaf(blk.wv)), g.leaf(blk.bv));
        std::vector<Var> heads;
        for (int64_t hh = 0; hh < cfg_.heads; ++hh) {
            Var qh = g.slice_cols(q, hh * dh, dh);
            Var kh = g.slice_cols(k, hh * dh, dh);
            Var vh = g.slice_cols(v, hh * dh, dh);
            Var logits = g.scale(g.matmul(qh, g.transpose(kh)), S(1.0 / std::sqrt(double(dh))));
            Var att = g.softmax_rows(g.add(logits, add_mask));
            heads.push_back(g.matmul(att, vh));
        }
        Var merged = cfg_.heads == 1 ? heads[0] : g.concat_cols(heads);
        Var out = g.add_bias_rows(g.matmul(merged, g.leaf(blk.wo)), g.leaf(blk.bo));
        return g.add(out, seq);
    }

    struct SpatialOut {
        Var cls;      // (F, d)
        Var patches;  // (F, N, d)
    };

    // z: (1, F, c, h, w). Per frame: embed patches, prepend cls, add position
    // and step embeddings, run L blocks under the configured mask.
    SpatialOut spatial_decode(Graph<S>& g, Var z, int64_t t) {
        check_step(t);
        Shape zs = g.shape(z);
        require(zs.size() == 5 && zs[0] == 1, "spatial_decode expects (1, F, c, h, w), got " +
                                                  shape_str(zs));
        require(zs[1] == cfg_.frames && zs[2] == cfg_.channels && zs[3] == cfg_.latent_h &&
                    zs[4] == cfg_.latent_w,
                "latent " + shape_str(zs) + " does not match configured geometry");
        int64_t F = cfg_.frames, N = grid_.tokens_per_frame(), d = cfg_.d;
        Var tokens = g.gather(z, patchify_map(F, grid_), {F * N, grid_.token_width()});
        Var emb = g.add_bias_rows(g.matmul(tokens, g.leaf(embed_w)), g.leaf(embed_b));
        Var cls = g.leaf(cls_s);
        Var pos = g.leaf(pos_s);
        Var temb = g.constant(sinusoidal_embedding<S>(t, d));
        Var mask = g.constant(cfg_.masked ? additive_causal_mask<S>(1 + N)
                                          : additive_full_mask<S>(1 + N));
        std::vector<Var> cls_rows, patch_rows;
        for (int64_t f = 0; f < F; ++f) {
            Var seq = g.concat_rows({cls, g.slice_rows(emb, f * N, N)});
            seq = g.add_bias_rows(g.add(seq, pos), temb);
            for (auto& blk : spatial_) seq = mmsa(g, seq, mask, blk);
            cls_rows.push_back(g.slice_rows(seq, 0, 1));
            patch_rows.push_back(g.slice_rows(seq, 1, N));
        }
        SpatialOut out;
        out.cls = F == 1 ? cls_rows[0] : g.concat_rows(cls_rows);
        Var flat = F == 1 ? patch_rows[0] : g.concat_rows(patch_rows);
        out.patches = g.reshape(flat, {F, N, d});
        return out;
    }

    struct TemporalOut {
        Var cls;     // (1, d)
        Var frames;  // (F, d)
        Var seq;     // full (1+F, d), cls at row 0
    };

    // cls_per_frame: (F, d). Project through the decoder block, prepend a
    // fresh temporal cls, add positions, run M causal blocks.
    TemporalOut temporal_decode(Graph<S>& g, Var cls_per_frame) {
        Shape cs = g.shape(cls_per_frame);
        require(cs.size() == 2 && cs[0] == cfg_.frames && cs[1] == cfg_.d,
                "temporal_decode expects (F, d), got " + shape_str(cs));
        int64_t F = cfg_.frames;
        Var proj = g.layer_norm(
            g.add_bias_rows(g.matmul(cls_per_frame, g.leaf(dproj_w)), g.leaf(dproj_b)),
            g.leaf(dln_g), g.leaf(dln_b), S(1e-5));
        Var seq = g.concat_rows({g.leaf(cls_t), proj});
        seq = g.add(seq, g.leaf(pos_t));
        Var mask = g.constant(cfg_.masked ? additive_causal_mask<S>(1 + F)
                                          : additive_full_mask<S>(1 + F));
        for (auto& blk : temporal_) seq = mmsa(g, seq, mask, blk);
        TemporalOut out;
        out.seq = seq;
        out.cls = g.slice_rows(seq, 0, 1);
        out.frames = g.slice_rows(seq, 1, F);
        return out;
    }

    // Hadamard fusion: frame token f scales every patch token of frame f.
    Var fuse_pure(Graph<S>& g, Var patches, Var frames) { return g.mul_frames(patches, frames); }

    // Transposed-convolution fusion: drop the temporal cls, treat each frame
    // token as a d-channel 1x1 map, upsample to the patch grid.
    Var fuse_hyper(Graph<S>& g, Var temporal_seq) {
        if (cfg_.variant != VgtVariant::hyper)
            throw ConfigError("fuse_hyper requires the hyper variant");
        Shape ss = g.shape(temporal_seq);
        require(ss.size() == 2 && ss[0] == cfg_.frames + 1 && ss[1] == cfg_.d,
                "fuse_hyper expects the full (1+F, d) sequence, got " + shape_str(ss));
        int64_t F = cfg_.frames, d = cfg_.d, hp = grid_.hp, wp = grid_.wp;
        Var x = g.reshape(g.slice_rows(temporal_seq, 1, F), {F, d, 1, 1, 1});
        for (size_t s = 0; s < hyper_w.size(); ++s) {
            int kk = grid_.hp == 1 ? 1 : 2;
            x = g.add_channel_bias(
                g.conv_transpose3d(x, g.leaf(hyper_w[s]), {1, kk, kk}, {0, 0, 0}),
                g.leaf(hyper_b[s]));
            if (s + 1 < hyper_w.size()) x = g.gelu(x);
        }
        // (F, d, 1, hp, wp) -> (F, hp*wp, d) tokens.
        std::vector<int64_t> map(size_t(F * hp * wp * d));
        size_t i = 0;
        for (int64_t f = 0; f < F; ++f)
            for (int64_t p = 0; p < hp * wp; ++p)
                for (int64_t k = 0; k < d; ++k) map[i++] = (f * d + k) * hp * wp + p;
        return g.gather(x, std::move(map), {F, hp * wp, d});
    }

    // MLP head over fused tokens, then back to latent layout.
    Var head(Graph<S>& g, Var fused) {
        Shape fs = g.shape(fused);
        require(fs.size() == 3 && fs[0] == cfg_.frames && fs[1] == grid_.tokens_per_frame() &&
                    fs[2] == cfg_.d,
                "head expects (F, N, d) tokens, got " + shape_str(fs));
        int64_t F = cfg_.frames, N = grid_.tokens_per_frame();
        Var flat = g.reshape(fused, {F * N, cfg_.d});
        Var h1 = g.gelu(g.add_bias_rows(g.matmul(flat, g.leaf(mlp1_w)), g.leaf(mlp1_b)));
        Var h2 = g.add_bias_rows(g.matmul(h1, g.leaf(mlp2_w)), g.leaf(mlp2_b));
        return g.gather(h2, unpatchify_map(F, grid_),
                        {1, F, cfg_.channels, cfg_.latent_h, cfg_.latent_w});
    }

    // z: (B, F, c, h, w) -> perturbation of the same shape.
    Var forward(Graph<S>& g, Var z, int64_t t) {
        check_step(t);
        Shape zs = g.shape(z);
        require(zs.size() == 5, "vgt input must be (B, F, c, h, w), got " + shape_str(zs));
        ++forward_count_;
        int64_t B = zs[0];
        int64_t stride = zs[1] * zs[2] * zs[3] * zs[4];
        std::vector<Var> outs;
        for (int64_t b = 0; b < B; ++b) {
            Var zb = z;
            if (B > 1) {
                std::vector<int64_t> map(static_cast<size_t>(stride), int64_t(0));
                for (int64_t i = 0; i < stride; ++i) map[size_t(i)] = b * stride + i;
                zb = g.gather(z, std::move(map), {1, zs[1], zs[2], zs[3], zs[4]});
            }
            SpatialOut sp = spatial_decode(g, zb, t);
            TemporalOut tp = temporal_decode(g, sp.cls);
            Var fused = cfg_.variant == VgtVariant::pure ? fuse_pure(g, sp.patches, tp.frames)
                                                         : fuse_hyper(g, tp.seq);
            Var pert = head(g, fused);
            if (B == 1) return pert;
            outs.push_back(g.reshape(pert, {1, stride}));
        }
        return g.reshape(g.concat_rows(outs), zs);
    }

    Tensor<S> perturb(const Tensor<S>& z, int64_t t) {
        Graph<S> g;
        return g.value(forward(g, g.constant(z), t));
    }

    Tensor<S> embed_w, embed_b, cls_s, pos_s, cls_t, pos_t;
    Tensor<S> dproj_w, dproj_b, dln_g, dln_b;
    Tensor<S> mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    std::vector<Tensor<S>> hyper_w, hyper_b;
    std::vector<Block> spatial_, temporal_;

private:
    void check_step(int64_t t) const {
        if (t < 1 || t > cfg_.T)
            throw ContractError("vgt step " + std::to_string(t) + " outside [1, " +
                                std::to_string(cfg_.T) + "]");
    }

    VgtConfig cfg_;
    PatchGrid grid_;
    int64_t forward_count_ = 0;
};

template <typename S>
int64_t count_trainable(const VgtConfig& cfg) {
    Vgt<S> v(cfg);
    return v.param_count();
}

// Run both models in value mode and pair their predictions.
template <typename S>
CombinedPrediction<S> combine(Denoiser<S>& den, Vgt<S>& vgt, const Tensor<S>& z_hat,
                              const Tensor<S>& z, int64_t t, int64_t prompt_id) {
    if (z_hat.shape() != z.shape())
        throw DimError("combine: latent shapes differ, " + shape_str(z_hat.shape()) + " vs " +
                       shape_str(z.shape()));
    return combine_predictions(den.predict(z_hat, t, prompt_id), vgt.perturb(z, t));
}

}  // namespace apla
