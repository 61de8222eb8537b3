#pragma once

// Fixed linear video codec. Each r x r patch (all channels) of a frame is one
// vector; encode multiplies it by a seeded orthogonal matrix Q, decode by Q^T,
// so the round trip is exact up to float error and every observed
// reconstruction error upstream belongs to the models, not the codec.
// Also owns the patch <-> token index maps used by the transformer.

#include "apla/tensor.hpp"

namespace apla {

struct CodecConfig {
    int64_t r = 2;         // spatial reduction per axis
    int64_t channels = 1;  // pixel channels C; latent channels c = C*r*r
    uint64_t seed = 77;
    bool identity = false;  // Q = I (pass-through when r = 1)
};

template <typename S>
class Codec {
public:
    explicit Codec(CodecConfig cfg) : cfg_(cfg) {
        if (cfg_.r < 1 || cfg_.channels < 1) throw ConfigError("codec: r and channels must be >= 1");
        int64_t D = dim();
        q_ = Tensor<S>(Shape{D, D});
        if (cfg_.identity) {
            for (int64_t i = 0; i < D; ++i) q_[i * D + i] = S(1);
            return;
        }
        // Gram-Schmidt on a seeded Gaussian matrix, done in double.
        std::vector<std::vector<double>> rows(static_cast<size_t>(D),
                                              std::vector<double>(static_cast<size_t>(D), 0.0));
        Rng rng(cfg_.seed);
        for (auto& row : rows)
            for (auto& v : row) v = rng.normal();
        for (size_t i = 0; i < rows.size(); ++i) {
            for (size_t j = 0; j < i; ++j) {
                double dot = 0;
                for (size_t k = 0; k < rows[i].size(); ++k) dot += rows[i][k] * rows[j][k];
                for (size_t k = 0; k < rows[i].size(); ++k) rows[i][k] -= dot * rows[j][k];
            }
            double nrm = 0;
            for (double v : rows[i]) nrm += v * v;
            nrm = std::sqrt(nrm);
            if (nrm < 1e-8) throw NumericError("codec: degenerate basis draw");
            for (auto& v : rows[i]) v /= nrm;
        }
        for (int64_t i = 0; i < D; ++i)
            for (int64_t j = 0; j < D; ++j) q_[i * D + j] = S(rows[size_t(i)][size_t(j)]);
    }

    const CodecConfig& config() const { return cfg_; }
    int64_t dim() const { return cfg_.channels * cfg_.r * cfg_.r; }
    const Tensor<S>& basis() const { return q_; }

    // x: B x F x C x H x W in [0,1] -> z: B x F x c x h x w with c = C*r*r,
    // h = H/r, w = W/r.
    Tensor<S> encode(const Tensor<S>& x) const {
        require(x.rank() == 5, "encode input must be B x F x C x H x W, got " + shape_str(x.shape()));
        int64_t B = x.extent(0), F = x.extent(1), C = x.extent(2), H = x.extent(3), W = x.extent(4);
        require(C == cfg_.channels, "encode channel count " + std::to_string(C) + " != configured " +
                                        std::to_string(cfg_.channels));
        int64_t r = cfg_.r;
        require(H % r == 0 && W % r == 0,
                "encode extents " + shape_str(x.shape()) + " not divisible by r=" + std::to_string(r));
        int64_t h = H / r, w = W / r, D = dim();
        Tensor<S> z(Shape{B, F, D, h, w});
        std::vector<S> v(static_cast<size_t>(D), S(0)), u(static_cast<size_t>(D), S(0));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t f = 0; f < F; ++f)
                for (int64_t ph = 0; ph < h; ++ph)
                    for (int64_t pw = 0; pw < w; ++pw) {
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t dy = 0; dy < r; ++dy)
                                for (int64_t dx = 0; dx < r; ++dx)
                                    v[size_t((c * r + dy) * r + dx)] =
                                        x[(((b * F + f) * C + c) * H + ph * r + dy) * W + pw * r + dx];
                        for (int64_t i = 0; i < D; ++i) {
                            S acc = 0;
                            for (int64_t j = 0; j < D; ++j) acc += q_[i * D + j] * v[size_t(j)];
                            u[size_t(i)] = acc;
                        }
                        for (int64_t i = 0; i < D; ++i)
                            z[(((b * F + f) * D + i) * h + ph) * w + pw] = u[size_t(i)];
                    }
        return z;
    }

    // z: B x F x c x h x w -> x: B x F x C x H x W, clamped to [0,1] unless raw.
    Tensor<S> decode(const Tensor<S>& z, bool clamp = true) const {
        require(z.rank() == 5, "decode input must be B x F x c x h x w, got " + shape_str(z.shape()));
        int64_t B = z.extent(0), F = z.extent(1), c = z.extent(2), h = z.extent(3), w = z.extent(4);
        int64_t D = dim(), r = cfg_.r, C = cfg_.channels;
        require(c == D, "decode latent channels " + std::to_string(c) + " != configured " +
                            std::to_string(D));
        Tensor<S> x(Shape{B, F, C, h * r, w * r});
        int64_t H = h * r, W = w * r;
        std::vector<S> u(static_cast<size_t>(D), S(0)), v(static_cast<size_t>(D), S(0));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t f = 0; f < F; ++f)
                for (int64_t ph = 0; ph < h; ++ph)
                    for (int64_t pw = 0; pw < w; ++pw) {
                        for (int64_t i = 0; i < D; ++i)
                            u[size_t(i)] = z[(((b * F + f) * D + i) * h + ph) * w + pw];
                        for (int64_t j = 0; j < D; ++j) {  // Q^T u
                            S acc = 0;
                            for (int64_t i = 0; i < D; ++i) acc += q_[i * D + j] * u[size_t(i)];
                            v[size_t(j)] = acc;
                        }
                        for (int64_t cc = 0; cc < C; ++cc)
                            for (int64_t dy = 0; dy < r; ++dy)
                                for (int64_t dx = 0; dx < r; ++dx) {
                                    S val = v[size_t((cc * r + dy) * r + dx)];
                                    if (clamp) val = std::min(S(1), std::max(S(0), val));
                                    x[(((b * F + f) * C + cc) * H + ph * r + dy) * W + pw * r + dx] =
                                        val;
                                }
                    }
        return x;
    }

private:
    CodecConfig cfg_;
    Tensor<S> q_;
};

// Token grid over a latent frame: every P x P latent patch (all c channels)
// becomes one token of width c*P*P, rastered row-major.
struct PatchGrid {
    int64_t P = 1;
    int64_t hp = 1, wp = 1;  // grid extents
    int64_t c = 1;           // latent channels
    int64_t tokens_per_frame() const { return hp * wp; }
    int64_t token_width() const { return c * P * P; }
};

inline PatchGrid make_grid(int64_t c, int64_t h, int64_t w, int64_t P) {
    if (P < 1) throw ConfigError("patch size must be >= 1");
    if (h % P != 0 || w % P != 0)
        throw DimError("latent " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by patch size " + std::to_string(P));
    return PatchGrid{P, h / P, w / P, c};
}

// Index map: token layout (F, hp*wp, c*P*P) <- latent layout (F, c, h, w).
// Entry i holds the latent linear index feeding token element i.
inline std::vector<int64_t> patchify_map(int64_t F, const PatchGrid& g) {
    int64_t h = g.hp * g.P, w = g.wp * g.P;
    std::vector<int64_t> map(size_t(F * g.tokens_per_frame() * g.token_width()));
    size_t out = 0;
    for (int64_t f = 0; f < F; ++f)
        for (int64_t ph = 0; ph < g.hp; ++ph)
            for (int64_t pw = 0; pw < g.wp; ++pw)
                for (int64_t c = 0; c < g.c; ++c)
                    for (int64_t dy = 0; dy < g.P; ++dy)
                        for (int64_t dx = 0; dx < g.P; ++dx)
                            map[out++] =
                                ((f * g.c + c) * h + ph * g.P + dy) * w + pw * g.P + dx;
    return map;
}

// Inverse permutation of patchify_map: latent element i <- token element map[i].
inline std::vector<int64_t> unpatchify_map(int64_t F, const PatchGrid& g) {
    std::vector<int64_t> fwd = patchify_map(F, g);
    std::vector<int64_t> inv(fwd.size());
    for (size_t i = 0; i < fwd.size(); ++i) inv[size_t(fwd[i])] = int64_t(i);
    return inv;
}

// Value-mode patchify of a single-batch latent (1, F, c, h, w) -> (F, N, width).
template <typename S>
Tensor<S> patchify(const Tensor<S>& z, const PatchGrid& g) {
    require(z.rank() == 5 && z.extent(0) == 1,
            "patchify expects a single-batch latent, got " + shape_str(z.shape()));
    require(z.extent(2) == g.c && z.extent(3) == g.hp * g.P && z.extent(4) == g.wp * g.P,
            "patchify grid mismatch for latent " + shape_str(z.shape()));
    int64_t F = z.extent(1);
    auto map = patchify_map(F, g);
    Tensor<S> out(Shape{F, g.tokens_per_frame(), g.token_width()});
    for (size_t i = 0; i < map.size(); ++i) out[int64_t(i)] = z[map[i]];
    return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, const PatchGrid& g) {
    require(tokens.rank() == 3 && tokens.extent(1) == g.tokens_per_frame() &&
                tokens.extent(2) == g.token_width(),
            "unpatchify token block " + shape_str(tokens.shape()) + " does not match grid");
    int64_t F = tokens.extent(0);
    auto map = unpatchify_map(F, g);
    Tensor<S> out(Shape{1, F, g.c, g.hp * g.P, g.wp * g.P});
    for (size_t i = 0; i < map.size(); ++i) out[int64_t(i)] = tokens[map[i]];
    return out;
}

}  // namespace apla
