#pragma once

// Finite-difference verification of the tape. Central differences in double
// precision against whatever backward() accumulated; the loss builder is
// re-run from scratch for every probe so it must be deterministic.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "apla/graph.hpp"

namespace apla {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

using LossBuilder = std::function<Var(Graph<double>&)>;

inline double eval_loss(const LossBuilder& make_loss) {
    Graph<double> g;
    Var l = make_loss(g);
    if (g.value(l).numel() != 1) throw ContractError("gradcheck loss must be scalar");
    return g.value(l)[0];
}

// Max relative error between tape gradients and central differences, taken
// over every element of every listed parameter.
inline double check_gradients(const std::vector<Tensor<double>*>& params,
                              const LossBuilder& make_loss, double h = 1e-5) {
    for (auto* p : params) {
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Graph<double> g;
        g.backward(make_loss(g));
    }
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }
    double worst = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& p = *params[pi];
        for (int64_t i = 0; i < p.numel(); ++i) {
            double saved = p[i];
            p[i] = saved + h;
            double lp = eval_loss(make_loss);
            p[i] = saved - h;
            double lm = eval_loss(make_loss);
            p[i] = saved;
            double numeric = (lp - lm) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic[pi][size_t(i)], numeric));
        }
    }
    return worst;
}

// Dot the output against a fixed random probe so every element's adjoint is
// distinct; a plain sum() would hide transposed or misrouted backwards.
inline Var probe_sum(Graph<double>& g, Var v, uint64_t seed) {
    Tensor<double> w(g.shape(v));
    Rng rng(seed);
    fill_normal(w, rng);
    return g.sum(g.mul(v, g.constant(std::move(w))));
}

struct GradCheck {
    std::string name;
    std::function<double()> run;  // max rel err over the check's params
};

namespace detail {

inline std::shared_ptr<Tensor<double>> rand_tensor(Shape shape, uint64_t seed, double lo = -1.0,
                                                   double hi = 1.0) {
    auto t = std::make_shared<Tensor<double>>(std::move(shape));
    Rng rng(seed);
    fill_uniform(*t, rng, lo, hi);
    return t;
}

// Away from zero so abs() is differentiable at every probe point.
inline std::shared_ptr<Tensor<double>> rand_tensor_offzero(Shape shape, uint64_t seed) {
    auto t = std::make_shared<Tensor<double>>(std::move(shape));
    Rng rng(seed);
    for (int64_t i = 0; i < t->numel(); ++i) {
        double mag = 0.2 + rng.uniform();
        (*t)[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

}  // namespace detail

// One entry per differentiable op, tiny shapes, seeded data.
inline std::vector<GradCheck> op_gradient_suite() {
    using detail::rand_tensor;
    using detail::rand_tensor_offzero;
    std::vector<GradCheck> suite;
    auto add = [&suite](std::string name, std::vector<std::shared_ptr<Tensor<double>>> owned,
                        LossBuilder build) {
        suite.push_back(
            {std::move(name), [owned = std::move(owned), build = std::move(build)]() {
                 std::vector<Tensor<double>*> params;
                 for (auto& t : owned) params.push_back(t.get());
                 return check_gradients(params, build);
             }});
    };

    {
        auto a = rand_tensor({2, 3}, 11), b = rand_tensor({2, 3}, 12);
        add("add", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.add(g.leaf(*a), g.leaf(*b)), 101);
        });
    }
    {
        auto a = rand_tensor({2, 3}, 13), b = rand_tensor({2, 3}, 14);
        add("sub", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.sub(g.leaf(*a), g.leaf(*b)), 102);
        });
    }
    {
        auto a = rand_tensor({2, 3}, 15), b = rand_tensor({2, 3}, 16);
        add("mul", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.mul(g.leaf(*a), g.leaf(*b)), 103);
        });
    }
    {
        auto a = rand_tensor({3, 2}, 17);
        add("scale", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.scale(g.leaf(*a), -1.7), 104);
        });
    }
    {
        auto a = rand_tensor({3, 2}, 18);
        add("add_scalar", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.add_scalar(g.leaf(*a), 0.4), 105);
        });
    }
    {
        auto a = rand_tensor({2, 3}, 19), b = rand_tensor({3, 4}, 20);
        add("matmul", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.matmul(g.leaf(*a), g.leaf(*b)), 106);
        });
    }
    {
        auto a = rand_tensor({3, 4}, 21);
        add("transpose", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.transpose(g.leaf(*a)), 107);
        });
    }
    {
        auto a = rand_tensor({2, 6}, 22);
        add("reshape", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.reshape(g.leaf(*a), {3, 4}), 108);
        });
    }
    {
        auto a = rand_tensor({2, 3}, 23);
        // Permutation with a repeated source index: adjoints must accumulate.
        std::vector<int64_t> map{5, 0, 0, 3, 2, 1, 4, 5};
        add("gather", {a}, [a, map](Graph<double>& g) {
            return probe_sum(g, g.gather(g.leaf(*a), map, {2, 4}), 109);
        });
    }
    {
        auto a = rand_tensor({5, 3}, 24);
        add("slice_rows", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.slice_rows(g.leaf(*a), 1, 3), 110);
        });
    }
    {
        auto a = rand_tensor({2, 3}, 25), b = rand_tensor({1, 3}, 26);
        add("concat_rows", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.concat_rows({g.leaf(*a), g.leaf(*b)}), 111);
        });
    }
    {
        auto a = rand_tensor({3, 5}, 27);
        add("slice_cols", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.slice_cols(g.leaf(*a), 1, 3), 112);
        });
    }
    {
        auto a = rand_tensor({3, 2}, 28), b = rand_tensor({3, 3}, 29);
        add("concat_cols", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.concat_cols({g.leaf(*a), g.leaf(*b)}), 113);
        });
    }
    {
        auto a = rand_tensor({3, 4}, 30);
        add("softmax_rows", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.softmax_rows(g.leaf(*a)), 114);
        });
    }
    {
        auto a = rand_tensor({3, 4}, 31);
        auto gain = rand_tensor({4}, 32, 0.5, 1.5);
        auto bias = rand_tensor({4}, 33);
        add("layer_norm", {a, gain, bias}, [a, gain, bias](Graph<double>& g) {
            return probe_sum(g, g.layer_norm(g.leaf(*a), g.leaf(*gain), g.leaf(*bias), 1e-5), 115);
        });
    }
    {
        auto a = rand_tensor({3, 3}, 34, -2.0, 2.0);
        add("gelu", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.gelu(g.leaf(*a)), 116);
        });
    }
    {
        auto a = rand_tensor({3, 3}, 35, -3.0, 3.0);
        add("softplus", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.softplus(g.leaf(*a)), 117);
        });
    }
    {
        auto a = rand_tensor_offzero({3, 3}, 36);
        add("abs", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.abs(g.leaf(*a)), 118);
        });
    }
    {
        auto a = rand_tensor({2, 5}, 37);
        add("sum", {a}, [a](Graph<double>& g) { return g.sum(g.leaf(*a)); });
    }
    {
        auto a = rand_tensor({2, 5}, 38);
        add("mean", {a}, [a](Graph<double>& g) { return g.mean(g.leaf(*a)); });
    }
    {
        auto a = rand_tensor({3, 4}, 39);
        add("mean_rows", {a}, [a](Graph<double>& g) {
            return probe_sum(g, g.mean_rows(g.leaf(*a)), 119);
        });
    }
    {
        auto a = rand_tensor({4, 3}, 40), b = rand_tensor({3}, 41);
        add("add_bias_rows", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.add_bias_rows(g.leaf(*a), g.leaf(*b)), 120);
        });
    }
    {
        auto a = rand_tensor({2, 3, 2, 2}, 42), b = rand_tensor({3}, 43);
        add("add_channel_bias", {a, b}, [a, b](Graph<double>& g) {
            return probe_sum(g, g.add_channel_bias(g.leaf(*a), g.leaf(*b)), 121);
        });
    }
    {
        auto p = rand_tensor({2, 3, 4}, 44), f = rand_tensor({2, 4}, 45);
        add("mul_frames", {p, f}, [p, f](Graph<double>& g) {
            return probe_sum(g, g.mul_frames(g.leaf(*p), g.leaf(*f)), 122);
        });
    }
    {
        auto x = rand_tensor({1, 2, 3, 4, 4}, 46), k = rand_tensor({2, 2, 1, 3, 3}, 47);
        add("conv3d", {x, k}, [x, k](Graph<double>& g) {
            return probe_sum(g, g.conv3d(g.leaf(*x), g.leaf(*k), {1, 1, 1}, {0, 1, 1}), 123);
        });
    }
    {
        auto x = rand_tensor({1, 2, 2, 4, 4}, 48), k = rand_tensor({3, 2, 2, 2, 2}, 49);
        add("conv3d_strided", {x, k}, [x, k](Graph<double>& g) {
            return probe_sum(g, g.conv3d(g.leaf(*x), g.leaf(*k), {1, 2, 2}, {0, 0, 0}), 124);
        });
    }
    {
        auto x = rand_tensor({1, 2, 2, 2, 2}, 50), k = rand_tensor({2, 3, 1, 2, 2}, 51);
        add("conv_transpose3d", {x, k}, [x, k](Graph<double>& g) {
            return probe_sum(g, g.conv_transpose3d(g.leaf(*x), g.leaf(*k), {1, 2, 2}, {0, 0, 0}),
                             125);
        });
    }
    {
        auto x = rand_tensor({1, 2, 3, 2, 2}, 52), k = rand_tensor({2, 3, 3, 2, 2}, 53);
        add("conv_transpose3d_padded", {x, k}, [x, k](Graph<double>& g) {
            return probe_sum(g, g.conv_transpose3d(g.leaf(*x), g.leaf(*k), {1, 2, 2}, {1, 0, 0}),
                             126);
        });
    }
    {
        auto x = rand_tensor({2, 3, 2, 2}, 54), k = rand_tensor({2, 3}, 55);
        add("conv1x1", {x, k}, [x, k](Graph<double>& g) {
            return probe_sum(g, g.conv1x1(g.leaf(*x), g.leaf(*k)), 127);
        });
    }
    {
        // Attention-shaped composite: softmax(s Q K^T + mask) V with all three
        // inputs trainable, then a nonlinear head.
        auto q = rand_tensor({3, 2}, 56), k = rand_tensor({3, 2}, 57), v = rand_tensor({3, 2}, 58);
        add("composite_attention", {q, k, v}, [q, k, v](Graph<double>& g) {
            Var qv = g.leaf(*q), kv = g.leaf(*k), vv = g.leaf(*v);
            Var logits = g.scale(g.matmul(qv, g.transpose(kv)), 1.0 / std::sqrt(2.0));
            Tensor<double> mask({3, 3}, 0.0);
            mask[1] = -1e9;  // one masked slot exercises the stabilized path
            Var att = g.softmax_rows(g.add(logits, g.constant(std::move(mask))));
            return probe_sum(g, g.gelu(g.matmul(att, vv)), 128);
        });
    }
    {
        // Deep reuse: the same leaf feeds three branches that rejoin.
        auto a = rand_tensor({2, 3}, 59);
        add("composite_fanout", {a}, [a](Graph<double>& g) {
            Var x = g.leaf(*a);
            Var y = g.add(g.mul(x, x), g.scale(g.gelu(x), 0.5));
            return g.add(g.sum(y), g.mean(g.softplus(x)));
        });
    }
    return suite;
}

}  // namespace apla

// Composite-stack checks live in a second header section so the per-op suite
// above stays usable without pulling in the model headers.
#include "apla/denoiser.hpp"
#include "apla/losses.hpp"
#include "apla/vgt.hpp"

namespace apla {

// Finite-difference checks over whole model stacks: the denoiser, both
// transformer variants, the critic path, and the loss compositions, all in
// 64-bit mode at tiny geometry. Zero-init heads are woken so upstream
// gradients are nonzero rather than vacuously matching.
inline std::vector<GradCheck> composite_gradient_suite() {
    std::vector<GradCheck> suite;

    suite.push_back({"denoiser_stack", []() {
        DenoiserConfig dc{4, 4, 8, 3, 6, 21};
        auto den = std::make_shared<Denoiser<double>>(dc);
        den->set_requires_grad(true);
        Rng wake(46);
        fill_normal(den->out_w, wake, 0.1);
        auto z = std::make_shared<Tensor<double>>(Shape{1, 2, 4, 4, 4});
        Rng rng(22);
        fill_normal(*z, rng);
        std::vector<Tensor<double>*> params;
        for (auto& [name, p] : den->params()) params.push_back(p);
        return check_gradients(params, [den, z](Graph<double>& g) {
            return probe_sum(g, den->forward(g, g.constant(*z), 3, 1), 501);
        });
    }});

    for (VgtVariant variant : {VgtVariant::pure, VgtVariant::hyper}) {
        std::string name = variant == VgtVariant::pure ? "vgt_pure_stack" : "vgt_hyper_stack";
        suite.push_back({name, [variant]() {
            VgtConfig vc;
            vc.variant = variant;
            vc.L = 1;
            vc.M = 1;
            vc.heads = 2;
            vc.d = 8;
            vc.P = 2;
            vc.frames = 2;
            vc.channels = 1;
            vc.latent_h = 4;
            vc.latent_w = 4;
            vc.T = 6;
            vc.seed = 31;
            auto vgt = std::make_shared<Vgt<double>>(vc);
            vgt->set_requires_grad(true);
            Rng wake(47);
            fill_normal(vgt->mlp2_w, wake, 0.1);
            auto z = std::make_shared<Tensor<double>>(Shape{1, 2, 1, 4, 4});
            Rng rng(32);
            fill_normal(*z, rng);
            std::vector<Tensor<double>*> params;
            for (auto& [name2, p] : vgt->params()) params.push_back(p);
            return check_gradients(params, [vgt, z](Graph<double>& g) {
                return probe_sum(g, vgt->forward(g, g.constant(*z), 2), 502);
            });
        }});
    }

    suite.push_back({"discriminator_stack", []() {
        auto disc = std::make_shared<Discriminator<double>>(3);
        Rng rng(41);
        fill_normal(disc->w, rng);
        fill_normal(disc->b, rng);
        auto noise = std::make_shared<Tensor<double>>(Shape{2, 2, 3, 4, 4});
        fill_normal(*noise, rng);
        return check_gradients({&disc->w, &disc->b}, [disc, noise](Graph<double>& g) {
            return probe_sum(g, disc->logits(g, g.constant(*noise), true), 503);
        });
    }});

    suite.push_back({"hyper_loss_stack", []() {
        auto pred = std::make_shared<Tensor<double>>(Shape{1, 2, 2, 4, 4});
        auto target = std::make_shared<Tensor<double>>(Shape{1, 2, 2, 4, 4});
        Rng rng(51);
        fill_normal(*pred, rng);
        fill_normal(*target, rng);
        pred->requires_grad = true;
        auto fx = std::make_shared<FeatureExtractor<double>>(2);
        LossWeights<double> w;
        return check_gradients({pred.get()}, [pred, target, fx, w](Graph<double>& g) {
            return hyper_terms(g, g.constant(*target), g.leaf(*pred), *fx, w).total;
        });
    }});

    suite.push_back({"objective_stack", []() {
        auto pred = std::make_shared<Tensor<double>>(Shape{1, 2, 2, 4, 4});
        auto target = std::make_shared<Tensor<double>>(Shape{1, 2, 2, 4, 4});
        Rng rng(61);
        fill_normal(*pred, rng);
        fill_normal(*target, rng);
        pred->requires_grad = true;
        auto fx = std::make_shared<FeatureExtractor<double>>(2);
        auto disc = std::make_shared<Discriminator<double>>(2);
        fill_normal(disc->w, rng);
        fill_normal(disc->b, rng);
        LossWeights<double> w;
        return check_gradients({pred.get()}, [pred, target, fx, disc, w](Graph<double>& g) {
            Var p = g.leaf(*pred);
            Var hyper = hyper_terms(g, g.constant(*target), p, *fx, w).total;
            return total_objective(g, hyper, g_term(g, *disc, p), w.lambda);
        });
    }});

    return suite;
}

}  // namespace apla
