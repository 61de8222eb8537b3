#pragma once

// Small trainable noise predictor: two strided downsampling convolutions, a
// conditioned bottleneck, two transposed-convolution upsampling stages with
// additive skips, and a zero-initialized output projection so the prediction
// is exactly zero at construction. All convolutions use frame-local kernels
// (temporal extent 1); temporal structure enters only through conditioning.

#include "apla/embed.hpp"
#include "apla/graph.hpp"

namespace apla {

struct DenoiserConfig {
    int64_t channels = 4;  // latent channels
    int64_t base = 8;      // hidden width
    int64_t d_cond = 16;   // conditioning embedding width
    int64_t n_prompts = 4; // row 0 is the reserved null prompt
    int64_t T = 50;
    uint64_t seed = 1;
};

template <typename S>
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
        if (cfg_.channels < 1 || cfg_.base < 1 || cfg_.n_prompts < 1 || cfg_.T < 1)
            throw ConfigError("denoiser: non-positive config value");
        if (cfg_.d_cond < 2 || cfg_.d_cond % 2 != 0)
            throw ConfigError("denoiser: d_cond must be even and >= 2");
        int64_t c = cfg_.channels, b = cfg_.base;
        Rng rng(cfg_.seed);
        auto conv_init = [&rng](Shape shape) {
            Tensor<S> t(shape);
            int64_t fan_in = apla::numel(Shape(shape.begin() + 1, shape.end()));
            fill_normal(t, rng, 1.0 / std::sqrt(double(fan_in)));
            return t;
        };
        enc_w = conv_init({b, c, 1, 3, 3});
        enc_b = Tensor<S>(Shape{b});
        down1_w = conv_init({2 * b, b, 1, 2, 2});
        down1_b = Tensor<S>(Shape{2 * b});
        down2_w = conv_init({2 * b, 2 * b, 1, 2, 2});
        down2_b = Tensor<S>(Shape{2 * b});
        mid_w = conv_init({2 * b, 2 * b, 1, 3, 3});
        mid_b = Tensor<S>(Shape{2 * b});
        temb_w = conv_init({2 * b, cfg_.d_cond});
        pemb_w = conv_init({2 * b, cfg_.d_cond});
        prompts = Tensor<S>(Shape{cfg_.n_prompts, cfg_.d_cond});
        fill_normal(prompts, rng, 0.1);
        up1_w = conv_init({2 * b, 2 * b, 1, 2, 2});  // transposed layout (C, O, ...)
        up1_b = Tensor<S>(Shape{2 * b});
        up2_w = conv_init({2 * b, b, 1, 2, 2});
        up2_b = Tensor<S>(Shape{b});
        out_w = Tensor<S>(Shape{c, b, 1, 3, 3});  // zero: prediction starts at 0
        out_b = Tensor<S>(Shape{c});
    }

    const DenoiserConfig& config() const { return cfg_; }

    NamedParams<S> params() {
        return {{"den.enc_w", &enc_w},   {"den.enc_b", &enc_b},   {"den.down1_w", &down1_w},
                {"den.down1_b", &down1_b}, {"den.down2_w", &down2_w}, {"den.down2_b", &down2_b},
                {"den.mid_w", &mid_w},   {"den.mid_b", &mid_b},   {"den.temb_w", &temb_w},
                {"den.pemb_w", &pemb_w}, {"den.prompts", &prompts}, {"den.up1_w", &up1_w},
                {"den.up1_b", &up1_b},   {"den.up2_w", &up2_w},   {"den.up2_b", &up2_b},
                {"den.out_w", &out_w},   {"den.out_b", &out_b}};
    }

    int64_t param_count() { return total_numel(params()); }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : params()) t->requires_grad = on;
    }

    // z: (B, F, c, h, w) with h and w divisible by 4. Returns same shape.
    Var forward(Graph<S>& g, Var z, int64_t t, int64_t prompt_id) {
        if (t < 1 || t > cfg_.T)
            throw ContractError("denoiser step " + std::to_string(t) + " outside [1, " +
                                std::to_string(cfg_.T) + "]");
        if (prompt_id < 0 || prompt_id >= cfg_.n_prompts)
            throw ContractError("unknown prompt id " + std::to_string(prompt_id));
        Shape zs = g.shape(z);
        require(zs.size() == 5, "denoiser input must be (B, F, c, h, w), got " + shape_str(zs));
        int64_t B = zs[0], F = zs[1], c = zs[2], h = zs[3], w = zs[4];
        require(c == cfg_.channels, "denoiser latent channels " + std::to_string(c) +
                                        " != configured " + std::to_string(cfg_.channels));
        require(h % 4 == 0 && w % 4 == 0,
                "denoiser needs extents divisible by 4, got " + shape_str(zs));

        Var x = g.gather(z, to_conv_map(B, F, c, h, w), {B, c, F, h, w});
        Var x1 = g.gelu(g.add_channel_bias(
            g.conv3d(x, g.leaf(enc_w), {1, 1, 1}, {0, 1, 1}), g.leaf(enc_b)));
        Var x2 = g.gelu(g.add_channel_bias(
            g.conv3d(x1, g.leaf(down1_w), {1, 2, 2}, {0, 0, 0}), g.leaf(down1_b)));
        Var x3 = g.gelu(g.add_channel_bias(
            g.conv3d(x2, g.leaf(down2_w), {1, 2, 2}, {0, 0, 0}), g.leaf(down2_b)));

        Var m = g.add_channel_bias(g.conv3d(x3, g.leaf(mid_w), {1, 1, 1}, {0, 1, 1}),
                                   g.leaf(mid_b));
        Var temb = g.constant(
            sinusoidal_embedding<S>(t, cfg_.d_cond).reshaped({cfg_.d_cond, 1}));
        m = g.add_channel_bias(m, g.reshape(g.matmul(g.leaf(temb_w), temb), {2 * cfg_.base}));
        Var prow = g.transpose(g.slice_rows(g.leaf(prompts), prompt_id, 1));
        m = g.add_channel_bias(m, g.reshape(g.matmul(g.leaf(pemb_w), prow), {2 * cfg_.base}));
        m = g.gelu(m);

        Var u1 = g.gelu(g.add_channel_bias(
            g.conv_transpose3d(m, g.leaf(up1_w), {1, 2, 2}, {0, 0, 0}), g.leaf(up1_b)));
        u1 = g.add(u1, x2);
        Var u2 = g.gelu(g.add_channel_bias(
            g.conv_transpose3d(u1, g.leaf(up2_w), {1, 2, 2}, {0, 0, 0}), g.leaf(up2_b)));
        u2 = g.add(u2, x1);

        Var out = g.add_channel_bias(g.conv3d(u2, g.leaf(out_w), {1, 1, 1}, {0, 1, 1}),
                                     g.leaf(out_b));
        return g.gather(out, from_conv_map(B, F, c, h, w), {B, F, c, h, w});
    }

    // Value-mode forward for sampling and metrics.
    Tensor<S> predict(const Tensor<S>& z, int64_t t, int64_t prompt_id) {
        Graph<S> g;
        Var out = forward(g, g.constant(z), t, prompt_id);
        return g.value(out);
    }

    // eps_null + w (eps_prompt - eps_null); w = 1 collapses to one forward.
    Tensor<S> guided_epsilon(const Tensor<S>& z, int64_t t, int64_t prompt_id, double w) {
        if (w < 0.0) throw ConfigError("guidance weight must be >= 0");
        Tensor<S> ep = predict(z, t, prompt_id);
        if (w == 1.0) return ep;
        Tensor<S> en = predict(z, t, 0);
        Tensor<S> out(ep.shape());
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = S(double(en[i]) + w * (double(ep[i]) - double(en[i])));
        return out;
    }

    Tensor<S> enc_w, enc_b, down1_w, down1_b, down2_w, down2_b, mid_w, mid_b;
    Tensor<S> temb_w, pemb_w, prompts, up1_w, up1_b, up2_w, up2_b, out_w, out_b;

private:
    // (B, F, c, h, w) -> (B, c, F, h, w) pull map, and its inverse.
    static std::vector<int64_t> to_conv_map(int64_t B, int64_t F, int64_t c, int64_t h, int64_t w) {
        std::vector<int64_t> map(size_t(B * F * c * h * w));
        size_t i = 0;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t cc = 0; cc < c; ++cc)
                for (int64_t f = 0; f < F; ++f)
                    for (int64_t p = 0; p < h * w; ++p)
                        map[i++] = ((b * F + f) * c + cc) * h * w + p;
        return map;
    }
    static std::vector<int64_t> from_conv_map(int64_t B, int64_t F, int64_t c, int64_t h,
                                              int64_t w) {
        std::vector<int64_t> map(size_t(B * F * c * h * w));
        size_t i = 0;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t f = 0; f < F; ++f)
                for (int64_t cc = 0; cc < c; ++cc)
                    for (int64_t p = 0; p < h * w; ++p)
                        map[i++] = ((b * c + cc) * F + f) * h * w + p;
        return map;
    }

    DenoiserConfig cfg_;
};

// The additive pairing of base prediction and perturbation, with the logged
// size ratio guarded against a zero base.
template <typename S>
struct CombinedPrediction {
    Tensor<S> unet_out, vgt_out, combined;
    double norm_ratio = 0.0;
};

template <typename S>
CombinedPrediction<S> combine_predictions(Tensor<S> unet_out, Tensor<S> vgt_out) {
    if (unet_out.shape() != vgt_out.shape())
        throw DimError("combine: shapes differ, " + shape_str(unet_out.shape()) + " vs " +
                       shape_str(vgt_out.shape()));
    CombinedPrediction<S> out;
    out.combined = Tensor<S>(unet_out.shape());
    for (int64_t i = 0; i < unet_out.numel(); ++i) out.combined[i] = unet_out[i] + vgt_out[i];
    out.norm_ratio = l2_norm(vgt_out) / (l2_norm(unet_out) + 1e-12);
    out.unet_out = std::move(unet_out);
    out.vgt_out = std::move(vgt_out);
    return out;
}

}  // namespace apla
