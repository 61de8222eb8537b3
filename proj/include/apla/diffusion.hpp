#pragma once

// Noise schedule and deterministic DDIM machinery. Tables are kept in double
// regardless of the model scalar type; alpha_bar[0] is defined as 1 so step
// t=1 lands exactly on the clean latent.

#include <functional>

#include "apla/tensor.hpp"

namespace apla {

struct NoiseSchedule {
    int64_t T = 0;
    // Index t in [0, T]; entry 0 is the "no noise yet" boundary.
    std::vector<double> beta, alpha, alpha_bar;

    void check_step(int64_t t) const {
        if (t < 1 || t > T)
            throw ContractError("step " + std::to_string(t) + " outside [1, " + std::to_string(T) +
                                "]");
    }
};

inline NoiseSchedule make_schedule(int64_t T, double beta_min, double beta_max) {
    if (T < 1) throw ConfigError("schedule needs T >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(size_t(T + 1), 0.0);
    s.alpha.assign(size_t(T + 1), 1.0);
    s.alpha_bar.assign(size_t(T + 1), 1.0);
    for (int64_t t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
        s.beta[size_t(t)] = beta_min + (beta_max - beta_min) * frac;
        s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
        s.alpha_bar[size_t(t)] = s.alpha_bar[size_t(t - 1)] * s.alpha[size_t(t)];
    }
    return s;
}

template <typename S>
struct NoiseRecord {
    int64_t t = 0;
    Tensor<S> eps;  // the exact noise drawn for this record
    Tensor<S> z_t;
};

// Closed form z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <typename S>
NoiseRecord<S> q_sample(const NoiseSchedule& sch, const Tensor<S>& z0, int64_t t,
                        const Tensor<S>& eps) {
    sch.check_step(t);
    require(z0.shape() == eps.shape(), "q_sample noise shape " + shape_str(eps.shape()) +
                                           " != latent shape " + shape_str(z0.shape()));
    double ab = sch.alpha_bar[size_t(t)];
    S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
    NoiseRecord<S> rec;
    rec.t = t;
    rec.eps = eps;
    rec.z_t = Tensor<S>(z0.shape());
    for (int64_t i = 0; i < z0.numel(); ++i) rec.z_t[i] = a * z0[i] + b * eps[i];
    if (!rec.z_t.all_finite()) throw NumericError("q_sample produced non-finite values");
    return rec;
}

// Deterministic (eta = 0) reverse update t -> t-1.
template <typename S>
Tensor<S> ddim_step(const NoiseSchedule& sch, const Tensor<S>& z_t, const Tensor<S>& eps_hat,
                    int64_t t) {
    sch.check_step(t);
    require(z_t.shape() == eps_hat.shape(), "ddim_step shape mismatch: " + shape_str(z_t.shape()) +
                                                " vs " + shape_str(eps_hat.shape()));
    double ab_t = sch.alpha_bar[size_t(t)];
    double ab_p = sch.alpha_bar[size_t(t - 1)];
    double inv_sqrt = 1.0 / std::sqrt(ab_t);
    double sig_t = std::sqrt(1.0 - ab_t);
    double a = std::sqrt(ab_p);
    double b = std::sqrt(1.0 - ab_p);
    Tensor<S> out(z_t.shape());
    for (int64_t i = 0; i < z_t.numel(); ++i) {
        double z0_hat = (double(z_t[i]) - sig_t * double(eps_hat[i])) * inv_sqrt;
        out[i] = S(a * z0_hat + b * double(eps_hat[i]));
    }
    if (!out.all_finite()) throw NumericError("ddim_step produced non-finite values");
    return out;
}

// The same update solved for z_t given z_{t-1}: forward-in-time inversion.
template <typename S>
Tensor<S> ddim_invert_step(const NoiseSchedule& sch, const Tensor<S>& z_prev,
                           const Tensor<S>& eps_hat, int64_t t) {
    sch.check_step(t);
    require(z_prev.shape() == eps_hat.shape(), "ddim_invert_step shape mismatch");
    double ab_t = sch.alpha_bar[size_t(t)];
    double ab_p = sch.alpha_bar[size_t(t - 1)];
    double inv_sqrt = 1.0 / std::sqrt(ab_p);
    double sig_p = std::sqrt(1.0 - ab_p);
    double a = std::sqrt(ab_t);
    double b = std::sqrt(1.0 - ab_t);
    Tensor<S> out(z_prev.shape());
    for (int64_t i = 0; i < z_prev.numel(); ++i) {
        double z0_hat = (double(z_prev[i]) - sig_p * double(eps_hat[i])) * inv_sqrt;
        out[i] = S(a * z0_hat + b * double(eps_hat[i]));
    }
    if (!out.all_finite()) throw NumericError("ddim_invert_step produced non-finite values");
    return out;
}

template <typename S>
using EpsFn = std::function<Tensor<S>(const Tensor<S>&, int64_t)>;

// z0 -> z_T, evaluating the model at (z_{t-1}, t) for each forward step.
template <typename S>
Tensor<S> ddim_invert(const NoiseSchedule& sch, const Tensor<S>& z0, const EpsFn<S>& eps) {
    Tensor<S> z = z0;
    for (int64_t t = 1; t <= sch.T; ++t) z = ddim_invert_step(sch, z, eps(z, t), t);
    return z;
}

// z_T -> z0 by the reverse chain.
template <typename S>
Tensor<S> ddim_sample(const NoiseSchedule& sch, const Tensor<S>& z_T, const EpsFn<S>& eps) {
    Tensor<S> z = z_T;
    for (int64_t t = sch.T; t >= 1; --t) z = ddim_step(sch, z, eps(z, t), t);
    return z;
}

}  // namespace apla
