#pragma once

// Training objective: a weighted reconstruction loss (MSE + L1 + perceptual
// feature distance) plus a non-saturating adversarial term driven by a
// minimal 1x1-convolution discriminator over noise residuals.

#include <cmath>
#include <string>
#include <vector>

#include "apla/graph.hpp"
#include "apla/tensor.hpp"

namespace apla {

template <typename S>
struct LossWeights {
    S alpha = S(0.5);   // MSE weight
    S beta = S(0.2);    // L1 weight
    S gamma = S(0.1);   // perceptual weight
    S lambda = S(0.5);  // adversarial weight

    void validate() const {
        auto ok = [](S v) { return std::isfinite(double(v)) && v >= S(0); };
        if (!ok(alpha) || !ok(beta) || !ok(gamma) || !ok(lambda))
            throw ConfigError("loss weights must be finite and non-negative");
    }
};

namespace detail {
template <typename S>
void require_video(const Graph<S>& g, Var x, const char* who) {
    if (g.shape(x).size() != 5)
        throw DimError(std::string(who) + " expects a (B, F, c, h, w) tensor, got rank " +
                       std::to_string(g.shape(x).size()));
}
}  // namespace detail

// Mean of squared element differences.
template <typename S>
Var mse_loss(Graph<S>& g, Var target, Var pred) {
    Var d = g.sub(pred, target);
    return g.mean(g.mul(d, d));
}

// Mean absolute element difference; the kink at zero uses subgradient 0.
template <typename S>
Var l1_loss(Graph<S>& g, Var target, Var pred) {
    return g.mean(g.abs(g.sub(pred, target)));
}

// Fixed, seeded, untrained conv stack used as a deterministic feature space
// for the perceptual distance. Three frame-local 3x3 stages, never updated.
template <typename S>
struct FeatureExtractor {
    int64_t channels = 0;
    int64_t width = 8;  // feature channels per stage
    std::vector<Tensor<S>> w;
    std::vector<Tensor<S>> b;

    explicit FeatureExtractor(int64_t c, uint64_t seed = 911) : channels(c) {
        if (c <= 0) throw ConfigError("feature extractor needs a positive channel count");
        Rng rng(seed);
        int64_t in = c;
        for (int stage = 0; stage < 3; ++stage) {
            Tensor<S> k(Shape{width, in, 1, 3, 3});
            fill_normal(k, rng, S(std::sqrt(2.0 / double(in * 9))));
            w.push_back(std::move(k));
            b.push_back(Tensor<S>(Shape{width}, S(0)));
            in = width;
        }
    }

    // x: (B, F, c, h, w) -> one feature map per stage, frames treated as batch.
    std::vector<Var> features(Graph<S>& g, Var x) const {
        detail::require_video(g, x, "feature extractor");
        Shape xs = g.shape(x);
        if (xs[2] != channels)
            throw DimError("feature extractor built for " + std::to_string(channels) +
                           " channels, got " + std::to_string(xs[2]));
        Var h = g.reshape(x, {xs[0] * xs[1], xs[2], 1, xs[3], xs[4]});
        std::vector<Var> out;
        for (int stage = 0; stage < 3; ++stage) {
            h = g.add_channel_bias(g.conv3d(h, g.constant(w[size_t(stage)]), {1, 1, 1}, {0, 1, 1}),
                                   g.constant(b[size_t(stage)]));
            out.push_back(h);
            if (stage < 2) h = g.gelu(h);
        }
        return out;
    }
};

// Squared feature-map distance, averaged over the extractor's stages.
template <typename S>
Var perceptual_loss(Graph<S>& g, Var target, Var pred, const FeatureExtractor<S>& fx) {
    if (g.shape(target) != g.shape(pred))
        throw DimError("perceptual loss shape mismatch: " + shape_str(g.shape(target)) + " vs " +
                       shape_str(g.shape(pred)));
    std::vector<Var> ft = fx.features(g, target);
    std::vector<Var> fp = fx.features(g, pred);
    Var acc;
    for (size_t i = 0; i < ft.size(); ++i) {
        Var d = g.sub(fp[i], ft[i]);
        Var layer = g.mean(g.mul(d, d));
        acc = i == 0 ? layer : g.add(acc, layer);
    }
    return g.scale(acc, S(1) / S(ft.size()));
}

template <typename S>
struct HyperTerms {
    Var mse, l1, per, total;
};

// total = alpha*MSE + beta*L1 + gamma*perceptual, combined in that order.
template <typename S>
HyperTerms<S> hyper_terms(Graph<S>& g, Var target, Var pred, const FeatureExtractor<S>& fx,
                          const LossWeights<S>& w) {
    w.validate();
    HyperTerms<S> t;
    t.mse = mse_loss(g, target, pred);
    t.l1 = l1_loss(g, target, pred);
    t.per = perceptual_loss(g, target, pred, fx);
    t.total = g.add(g.add(g.scale(t.mse, w.alpha), g.scale(t.l1, w.beta)),
                    g.scale(t.per, w.gamma));
    return t;
}

template <typename S>
Var hyper_loss(Graph<S>& g, Var target, Var pred, const FeatureExtractor<S>& fx,
               const LossWeights<S>& w) {
    return hyper_terms(g, target, pred, fx, w).total;
}

// Minimal discriminator: a single 1x1 convolution over latent channels whose
// per-location scores are averaged across frames and positions into one
// logit per batch element. Trainable parameter count is exactly c + 1.
template <typename S>
struct Discriminator {
    int64_t channels = 0;
    Tensor<S> w;  // (1, c) kernel
    Tensor<S> b;  // (1) bias

    explicit Discriminator(int64_t c) : channels(c), w(Shape{1, c}, S(0)), b(Shape{1}, S(0)) {
        if (c <= 0) throw ConfigError("discriminator needs a positive channel count");
        w.requires_grad = true;
        b.requires_grad = true;
    }

    NamedParams<S> params() {
        return {{"disc.w", &w}, {"disc.b", &b}};
    }
    int64_t param_count() const { return channels + 1; }

    // noise: (B, F, c, h, w) -> (B) logits. `train` controls whether the
    // kernel enters the graph as a leaf (gradients flow) or a constant.
    Var logits(Graph<S>& g, Var noise, bool train) {
        detail::require_video(g, noise, "discriminator");
        Shape ns = g.shape(noise);
        if (ns[2] != channels)
            throw DimError("discriminator built for " + std::to_string(channels) +
                           " channels, got " + std::to_string(ns[2]));
        Var kw = train ? g.leaf(w) : g.constant(w);
        Var kb = train ? g.leaf(b) : g.constant(b);
        Var x = g.reshape(noise, {ns[0] * ns[1], ns[2], ns[3], ns[4]});
        Var scores = g.conv1x1(x, kw);  // (B*F, 1, h, w)
        Var rows = g.reshape(scores, {ns[0], ns[1] * ns[3] * ns[4]});
        Var per_batch = g.reshape(g.mean_rows(rows), {ns[0], 1});
        return g.reshape(g.add_bias_rows(per_batch, kb), {ns[0]});
    }

    Tensor<S> logits_value(const Tensor<S>& noise) {
        Graph<S> g;
        return g.value(logits(g, g.constant(noise), false));
    }
};

// Discriminator objective on a real/predicted noise pair at the same step.
// Both inputs enter as constants: the prediction is detached by construction,
// so no gradient can reach the generator from here.
template <typename S>
Var d_loss(Graph<S>& g, Discriminator<S>& disc, const Tensor<S>& real_noise,
           const Tensor<S>& fake_noise) {
    Var lr = disc.logits(g, g.constant(real_noise), true);
    Var lf = disc.logits(g, g.constant(fake_noise), true);
    // -log sigma(r) - log(1 - sigma(f)) = softplus(-r) + softplus(f)
    return g.add(g.mean(g.softplus(g.scale(lr, S(-1)))), g.mean(g.softplus(lf)));
}

// Generator adversarial term -log sigma(D(fake)) with the prediction still
// attached to its graph; the discriminator enters as constants so its
// parameters receive no gradient from this term.
template <typename S>
Var g_term(Graph<S>& g, Discriminator<S>& disc, Var fake_noise) {
    Var lf = disc.logits(g, fake_noise, false);
    return g.mean(g.softplus(g.scale(lf, S(-1))));
}

// hyper + lambda * L_g.
template <typename S>
Var total_objective(Graph<S>& g, Var hyper, Var adv_term, S lambda) {
    if (!(std::isfinite(double(lambda)) && lambda >= S(0)))
        throw ConfigError("lambda must be finite and non-negative");
    return g.add(hyper, g.scale(adv_term, lambda));
}

}  // namespace apla
