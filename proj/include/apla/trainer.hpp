#pragma once

// Single-video fine-tuning: encode the reference clip, then per step draw a
// uniform timestep and fresh noise, form the combined noise prediction
// (denoiser + transformer perturbation), update the discriminator on the
// detached prediction, and update the generator on the full objective.
// Includes Adam, byte-stable checkpoints, DDIM sampling, and ablation runs.

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "apla/codec.hpp"
#include "apla/data.hpp"
#include "apla/denoiser.hpp"
#include "apla/diffusion.hpp"
#include "apla/losses.hpp"
#include "apla/metrics.hpp"
#include "apla/vgt.hpp"

namespace apla {

template <typename S>
struct TrainConfig {
    // Run budget.
    int64_t steps = 750;
    double lr = 1e-3;  // desk-scale default; 3e-5 remains selectable
    int64_t batch = 1;
    LossWeights<S> weights;

    // Geometry: pixel video (frames, channels, height, width), codec patch r.
    int64_t frames = 8;
    int64_t channels = 1;
    int64_t height = 32, width = 32;
    int64_t r = 2;
    int64_t T = 50;
    double beta_min = 1e-4, beta_max = 0.02;

    // Transformer branch.
    VgtVariant variant = VgtVariant::pure;
    bool masked = true;
    int64_t vgt_L = 1, vgt_M = 1, vgt_heads = 4, vgt_d = 16, vgt_P = 4;

    // Denoiser.
    int64_t den_base = 8, d_cond = 16, n_prompts = 4;

    // Ablations.
    bool disable_vgt = false;
    bool disable_gan = false;
    bool mse_only = false;

    uint64_t seed = 7;

    int64_t latent_channels() const { return channels * r * r; }
    int64_t latent_h() const { return height / r; }
    int64_t latent_w() const { return width / r; }

    void validate() const {
        if (steps < 0) throw ConfigError("steps must be non-negative");
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("bad learning rate");
        if (batch != 1) throw ConfigError("only batch = 1 is supported");
        weights.validate();
        if (frames < 1 || channels < 1 || height < 1 || width < 1 || r < 1 || T < 1)
            throw ConfigError("non-positive geometry");
        if (height % r != 0 || width % r != 0)
            throw ConfigError("height and width must be divisible by the codec patch");
        if (latent_h() % vgt_P != 0 || latent_w() % vgt_P != 0)
            throw ConfigError("latent grid must be divisible by the transformer patch");
        if (latent_h() % 4 != 0 || latent_w() % 4 != 0)
            throw ConfigError("latent grid must be divisible by 4 for the denoiser");
        if (n_prompts < 2) throw ConfigError("need at least one prompt beside the null row");
    }

    // Canonical key=value line covering everything that defines model
    // identity (run length excluded: checkpoints may resume with any budget).
    std::string canonical() const {
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "lr=%.17g;batch=%lld;alpha=%.17g;beta=%.17g;gamma=%.17g;lambda=%.17g;"
                      "frames=%lld;channels=%lld;height=%lld;width=%lld;r=%lld;T=%lld;"
                      "bmin=%.17g;bmax=%.17g;"
                      "variant=%s;masked=%d;L=%lld;M=%lld;heads=%lld;d=%lld;P=%lld;"
                      "base=%lld;d_cond=%lld;n_prompts=%lld;"
                      "disable_vgt=%d;disable_gan=%d;mse_only=%d;seed=%llu",
                      lr, (long long)batch, double(weights.alpha), double(weights.beta),
                      double(weights.gamma), double(weights.lambda), (long long)frames,
                      (long long)channels, (long long)height, (long long)width, (long long)r,
                      (long long)T, beta_min, beta_max,
                      variant == VgtVariant::pure ? "pure" : "hyper", int(masked),
                      (long long)vgt_L, (long long)vgt_M, (long long)vgt_heads, (long long)vgt_d,
                      (long long)vgt_P, (long long)den_base, (long long)d_cond,
                      (long long)n_prompts, int(disable_vgt), int(disable_gan), int(mse_only),
                      (unsigned long long)seed);
        return std::string(buf);
    }

    uint64_t hash() const {
        uint64_t h = 14695981039346656037ull;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }
};

// Adam with the standard moment defaults; moment arithmetic in double for
// scalar-mode-independent behavior, parameters stored back in S.
template <typename S>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<S>> m, v;

    void init(const NamedParams<S>& params) {
        m.clear();
        v.clear();
        for (auto& [name, p] : params) {
            m.emplace_back(size_t(p->numel()), S(0));
            v.emplace_back(size_t(p->numel()), S(0));
        }
    }

    void step(const NamedParams<S>& params) {
        if (m.size() != params.size()) throw StateError("optimizer moments not initialized");
        ++t;
        double c1 = 1.0 - std::pow(beta1, double(t));
        double c2 = 1.0 - std::pow(beta2, double(t));
        for (size_t k = 0; k < params.size(); ++k) {
            Tensor<S>* p = params[k].second;
            if (m[k].size() != size_t(p->numel()))
                throw StateError("optimizer moment size mismatch for " + params[k].first);
            for (int64_t i = 0; i < p->numel(); ++i) {
                double g = i < int64_t(p->grad.size()) ? double(p->grad[size_t(i)]) : 0.0;
                double mi = beta1 * double(m[k][size_t(i)]) + (1.0 - beta1) * g;
                double vi = beta2 * double(v[k][size_t(i)]) + (1.0 - beta2) * g * g;
                m[k][size_t(i)] = S(mi);
                v[k][size_t(i)] = S(vi);
                (*p)[i] = S(double((*p)[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
            }
        }
    }
};

struct StepRecord {
    int64_t step = 0;
    double mse = 0, l1 = 0, per = 0, lg = 0, total = 0, norm_ratio = 0;
};

inline std::string csv_header() { return "step,mse,l1,per,lg,total,norm_ratio"; }

inline std::string csv_row(const StepRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", (long long)r.step,
                  r.mse, r.l1, r.per, r.lg, r.total, r.norm_ratio);
    return std::string(buf);
}

constexpr uint16_t checkpoint_version = 1;

template <typename S>
class Trainer {
    // First member: every model component below is constructed from it.
    TrainConfig<S> cfg_;

    static TrainConfig<S> validated(TrainConfig<S> c) {
        c.validate();
        return c;
    }

public:
    using Observer = std::function<void(const StepRecord&)>;

    Trainer(TrainConfig<S> cfg, const Tensor<S>& video, int64_t prompt_id)
        : cfg_(validated(std::move(cfg))),
          codec_(CodecConfig{cfg_.r, cfg_.channels, 77, false}),
          sched_(make_schedule(cfg_.T, cfg_.beta_min, cfg_.beta_max)),
          den_(DenoiserConfig{cfg_.latent_channels(), cfg_.den_base, cfg_.d_cond, cfg_.n_prompts,
                              cfg_.T, cfg_.seed + 1}),
          vgt_(make_vgt_config(cfg_)),
          disc_(cfg_.latent_channels()),
          fx_(cfg_.latent_channels()),
          rng_(cfg_.seed),
          prompt_id_(prompt_id) {
        if (prompt_id_ < 1 || prompt_id_ >= cfg_.n_prompts)
            throw ConfigError("prompt id must be in [1, n_prompts)");
        Shape want{cfg_.frames, cfg_.channels, cfg_.height, cfg_.width};
        if (video.shape() != want)
            throw DimError("video shape " + shape_str(video.shape()) + " does not match config " +
                           shape_str(want));
        den_.set_requires_grad(true);
        vgt_.set_requires_grad(true);
        video_ = video.reshaped({1, cfg_.frames, cfg_.channels, cfg_.height, cfg_.width});
        latent_ = codec_.encode(video_);
        opt_g_.lr = cfg_.lr;
        opt_d_.lr = cfg_.lr;
        opt_g_.init(gen_params());
        opt_d_.init(disc_.params());
    }

    const TrainConfig<S>& config() const { return cfg_; }
    int64_t step() const { return step_; }
    int64_t d_updates() const { return d_updates_; }
    int64_t g_updates() const { return g_updates_; }
    const Tensor<S>& reference_video() const { return video_; }
    const Tensor<S>& reference_latent() const { return latent_; }

    NamedParams<S> gen_params() {
        NamedParams<S> ps = den_.params();
        if (!cfg_.disable_vgt)
            for (auto& kv : vgt_.params()) ps.push_back(kv);
        return ps;
    }

    NamedParams<S> all_params() {
        NamedParams<S> ps = den_.params();
        for (auto& kv : vgt_.params()) ps.push_back(kv);
        for (auto& kv : disc_.params()) ps.push_back(kv);
        return ps;
    }

    StepRecord run_step() {
        try {
            return run_step_inner();
        } catch (const NumericError& e) {
            throw NumericError("training aborted at step " + std::to_string(step_) + ": " +
                               e.what());
        }
    }

    std::vector<StepRecord> fine_tune(int64_t n_steps, const Observer& obs = {}) {
        if (n_steps < 0) throw ConfigError("negative step count");
        std::vector<StepRecord> log;
        log.reserve(size_t(n_steps));
        for (int64_t i = 0; i < n_steps; ++i) {
            log.push_back(run_step());
            if (obs) obs(log.back());
        }
        return log;
    }

    // Noise-prediction callable used by the DDIM loops.
    EpsFn<S> eps_model(int64_t prompt_id, double guidance) {
        return [this, prompt_id, guidance](const Tensor<S>& z, int64_t t) {
            Tensor<S> u = den_.guided_epsilon(z, t, prompt_id, guidance);
            if (cfg_.disable_vgt) return u;
            return combine_predictions(u, vgt_.perturb(z, t)).combined;
        };
    }

    // Reconstruction mode inverts the reference latent with the unguided
    // model; generation mode starts from seeded Gaussian noise. Either way
    // the reverse DDIM loop runs with the guided model plus the perturbation,
    // and the final latent is decoded to pixels.
    Tensor<S> sample(int64_t prompt_id, double guidance, bool generation = false,
                     uint64_t noise_seed = 99) {
        Tensor<S> z_T;
        if (generation) {
            z_T = Tensor<S>(latent_.shape());
            Rng noise_rng(noise_seed);
            fill_normal(z_T, noise_rng);
        } else {
            z_T = ddim_invert(sched_, latent_, eps_model(prompt_id, 1.0));
        }
        Tensor<S> z0 = ddim_sample(sched_, z_T, eps_model(prompt_id, guidance));
        Tensor<S> px = codec_.decode(z0);
        return px.reshaped({cfg_.frames, cfg_.channels, cfg_.height, cfg_.width});
    }

    // ------------------------------------------------------- checkpoints ----
    // "APLA", version, scalar width, config hash, counters, RNG stream
    // state, then named blobs in a fixed order. save -> load -> save is
    // byte-identical.

    void save(std::ostream& os) {
        os.write("APLA", 4);
        detail::put_u16(os, checkpoint_version);
        detail::put_u16(os, uint16_t(sizeof(S)));
        put_u64(os, cfg_.hash());
        put_u64(os, uint64_t(step_));
        put_u64(os, uint64_t(d_updates_));
        put_u64(os, uint64_t(g_updates_));
        put_u64(os, uint64_t(opt_g_.t));
        put_u64(os, uint64_t(opt_d_.t));
        std::string rng_state = rng_.save_state();
        detail::put_u32(os, uint32_t(rng_state.size()));
        os.write(rng_state.data(), std::streamsize(rng_state.size()));

        std::vector<std::pair<std::string, const Tensor<S>*>> blobs;
        for (auto& [name, p] : all_params()) blobs.emplace_back(name, p);
        detail::put_u32(os, uint32_t(blobs.size() + 2 * opt_g_.m.size() + 2 * opt_d_.m.size()));
        for (auto& [name, p] : blobs) put_blob(os, name, *p);
        put_moments(os, "optg", opt_g_, gen_params());
        put_moments(os, "optd", opt_d_, disc_.params());
        if (!os) throw FormatError("short write while saving checkpoint");
    }

    void save(const std::string& path) {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open for writing: " + path);
        save(os);
        if (!os) throw FormatError("write failed: " + path);
    }

    void load(std::istream& is, const std::string& context = "<stream>") {
        char magic[4] = {};
        is.read(magic, 4);
        if (!is || std::string(magic, 4) != "APLA")
            throw FormatError("bad checkpoint magic in " + context);
        if (detail::get_u16(is) != checkpoint_version)
            throw FormatError("unsupported checkpoint version in " + context);
        if (detail::get_u16(is) != sizeof(S))
            throw ConfigError("checkpoint scalar width does not match this build");
        uint64_t h = get_u64(is);
        if (h != cfg_.hash())
            throw ConfigError("checkpoint was produced under a different config");
        step_ = int64_t(get_u64(is));
        d_updates_ = int64_t(get_u64(is));
        g_updates_ = int64_t(get_u64(is));
        opt_g_.t = int64_t(get_u64(is));
        opt_d_.t = int64_t(get_u64(is));
        uint32_t rng_len = detail::get_u32(is);
        if (!is || rng_len > (1u << 20)) throw FormatError("bad RNG state in " + context);
        std::string rng_state(rng_len, '\0');
        is.read(rng_state.data(), std::streamsize(rng_len));
        rng_.load_state(rng_state);

        uint32_t n_blobs = detail::get_u32(is);
        std::map<std::string, std::pair<Shape, std::vector<S>>> blobs;
        for (uint32_t i = 0; i < n_blobs; ++i) {
            auto [name, shape, data] = get_blob(is, context);
            if (!blobs.emplace(name, std::make_pair(shape, std::move(data))).second)
                throw FormatError("duplicate blob '" + name + "' in " + context);
        }
        if (!is) throw FormatError("truncated checkpoint in " + context);

        size_t used = 0;
        for (auto& [name, p] : all_params()) used += take_blob(blobs, name, *p, context);
        used += take_moments(blobs, "optg", opt_g_, gen_params(), context);
        used += take_moments(blobs, "optd", opt_d_, disc_.params(), context);
        if (used != blobs.size())
            throw FormatError("checkpoint has unexpected extra blobs in " + context);
    }

    void load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open for reading: " + path);
        load(is, path);
    }

    Codec<S> codec_;
    NoiseSchedule sched_;
    Denoiser<S> den_;
    Vgt<S> vgt_;
    Discriminator<S> disc_;
    FeatureExtractor<S> fx_;
    Adam<S> opt_g_, opt_d_;
    Rng rng_;

private:
    static VgtConfig make_vgt_config(const TrainConfig<S>& c) {
        VgtConfig v;
        v.variant = c.variant;
        v.L = c.vgt_L;
        v.M = c.vgt_M;
        v.heads = c.vgt_heads;
        v.d = c.vgt_d;
        v.P = c.vgt_P;
        v.masked = c.masked;
        v.frames = c.frames;
        v.channels = c.latent_channels();
        v.latent_h = c.latent_h();
        v.latent_w = c.latent_w();
        v.T = c.T;
        v.seed = c.seed + 2;
        return v;
    }

    StepRecord run_step_inner() {
        int64_t t = rng_.uniform_int(1, cfg_.T);
        Tensor<S> eps(latent_.shape());
        fill_normal(eps, rng_);
        NoiseRecord<S> rec = q_sample(sched_, latent_, t, eps);
        bool gan = !(cfg_.disable_gan || cfg_.mse_only);

        Graph<S> g;
        Var zc = g.constant(rec.z_t);
        Var unet = den_.forward(g, zc, t, prompt_id_);
        Var pred = unet;
        StepRecord r;
        r.step = step_;
        if (!cfg_.disable_vgt) {
            Var vperturb = vgt_.forward(g, zc, t);
            pred = g.add(unet, vperturb);
            r.norm_ratio =
                double(l2_norm(g.value(vperturb))) / (double(l2_norm(g.value(unet))) + 1e-12);
        }

        // Discriminator first, on the detached prediction; the generator's
        // adversarial term below then sees the already-updated critic.
        if (gan) {
            for (auto& [name, p] : disc_.params()) p->zero_grad();
            Graph<S> gd;
            gd.backward(d_loss(gd, disc_, rec.eps, g.value(pred)));
            opt_d_.step(disc_.params());
            ++d_updates_;
        }

        Var eps_c = g.constant(rec.eps);
        Var total;
        if (cfg_.mse_only) {
            Var m = mse_loss(g, eps_c, pred);
            r.mse = double(g.value(m)[0]);
            total = m;
        } else {
            HyperTerms<S> ht = hyper_terms(g, eps_c, pred, fx_, cfg_.weights);
            r.mse = double(g.value(ht.mse)[0]);
            r.l1 = double(g.value(ht.l1)[0]);
            r.per = double(g.value(ht.per)[0]);
            total = ht.total;
            if (gan) {
                Var adv = g_term(g, disc_, pred);
                r.lg = double(g.value(adv)[0]);
                total = total_objective(g, ht.total, adv, cfg_.weights.lambda);
            }
        }
        r.total = double(g.value(total)[0]);
        if (!std::isfinite(r.total))
            throw NumericError("non-finite objective (mse=" + std::to_string(r.mse) + ")");

        NamedParams<S> gp = gen_params();
        for (auto& [name, p] : gp) p->zero_grad();
        g.backward(total);
        opt_g_.step(gp);
        ++g_updates_;
        ++step_;
        return r;
    }

    // 64-bit little-endian helpers on top of the 16/32-bit ones.
    static void put_u64(std::ostream& os, uint64_t v) {
        detail::put_u32(os, uint32_t(v & 0xffffffffull));
        detail::put_u32(os, uint32_t(v >> 32));
    }
    static uint64_t get_u64(std::istream& is) {
        uint64_t lo = detail::get_u32(is);
        uint64_t hi = detail::get_u32(is);
        return lo | (hi << 32);
    }
    static void put_scalar(std::ostream& os, S v) {
        if constexpr (sizeof(S) == 4) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(os, bits);
        } else {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(os, bits);
        }
    }
    static S get_scalar(std::istream& is) {
        S v;
        if constexpr (sizeof(S) == 4) {
            uint32_t bits = detail::get_u32(is);
            std::memcpy(&v, &bits, 4);
        } else {
            uint64_t bits = get_u64(is);
            std::memcpy(&v, &bits, 8);
        }
        return v;
    }
    static void put_blob(std::ostream& os, const std::string& name, const Tensor<S>& t) {
        detail::put_u32(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::put_u16(os, uint16_t(t.rank()));
        for (int64_t a = 0; a < int64_t(t.rank()); ++a) detail::put_u32(os, uint32_t(t.extent(a)));
        for (int64_t i = 0; i < t.numel(); ++i) put_scalar(os, t[i]);
    }
    static void put_vec(std::ostream& os, const std::string& name, const std::vector<S>& xs) {
        detail::put_u32(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::put_u16(os, 1);
        detail::put_u32(os, uint32_t(xs.size()));
        for (S x : xs) put_scalar(os, x);
    }
    static void put_moments(std::ostream& os, const std::string& prefix, const Adam<S>& opt,
                            const NamedParams<S>& params) {
        if (opt.m.size() != params.size()) throw StateError("optimizer moments out of sync");
        for (size_t k = 0; k < params.size(); ++k) {
            put_vec(os, prefix + ".m." + params[k].first, opt.m[k]);
            put_vec(os, prefix + ".v." + params[k].first, opt.v[k]);
        }
    }
    static std::tuple<std::string, Shape, std::vector<S>> get_blob(std::istream& is,
                                                                   const std::string& context) {
        uint32_t name_len = detail::get_u32(is);
        if (!is || name_len > 4096) throw FormatError("bad blob name in " + context);
        std::string name(name_len, '\0');
        is.read(name.data(), std::streamsize(name_len));
        uint16_t rank = detail::get_u16(is);
        if (!is || rank > 8) throw FormatError("bad blob rank in " + context);
        Shape shape;
        int64_t n = 1;
        for (uint16_t a = 0; a < rank; ++a) {
            shape.push_back(int64_t(detail::get_u32(is)));
            n *= shape.back();
        }
        if (!is || n < 0 || n > (int64_t(1) << 32))
            throw FormatError("bad blob extents in " + context);
        std::vector<S> data(static_cast<size_t>(n), S(0));
        for (int64_t i = 0; i < n; ++i) data[size_t(i)] = get_scalar(is);
        return {name, shape, data};
    }
    static size_t take_blob(std::map<std::string, std::pair<Shape, std::vector<S>>>& blobs,
                            const std::string& name, Tensor<S>& into, const std::string& context) {
        auto it = blobs.find(name);
        if (it == blobs.end()) throw FormatError("checkpoint lacks blob '" + name + "' in " + context);
        if (it->second.first != into.shape())
            throw FormatError("blob '" + name + "' has shape " + shape_str(it->second.first) +
                              ", expected " + shape_str(into.shape()));
        for (int64_t i = 0; i < into.numel(); ++i) into[i] = it->second.second[size_t(i)];
        return 1;
    }
    static size_t take_moments(std::map<std::string, std::pair<Shape, std::vector<S>>>& blobs,
                               const std::string& prefix, Adam<S>& opt,
                               const NamedParams<S>& params, const std::string& context) {
        opt.init(params);
        size_t used = 0;
        for (size_t k = 0; k < params.size(); ++k) {
            for (auto which : {std::make_pair(std::string(".m."), &opt.m),
                               std::make_pair(std::string(".v."), &opt.v)}) {
                std::string name = prefix + which.first + params[k].first;
                auto it = blobs.find(name);
                if (it == blobs.end())
                    throw FormatError("checkpoint lacks blob '" + name + "' in " + context);
                if (it->second.second.size() != (*which.second)[k].size())
                    throw FormatError("blob '" + name + "' has the wrong length in " + context);
                (*which.second)[k] = it->second.second;
                ++used;
            }
        }
        return used;
    }

    Tensor<S> video_;   // (1, F, C, H, W) reference pixels
    Tensor<S> latent_;  // (1, F, c, h, w) encoded reference
    int64_t prompt_id_ = 1;
    int64_t step_ = 0;
    int64_t d_updates_ = 0, g_updates_ = 0;
};

struct AblationRow {
    std::string name;
    double mse = 0, psnr_db = 0, fci_value = 0, norm_ratio = 0;
};

inline std::string ablation_csv_header() { return "variant,mse,psnr,fci,norm_ratio"; }

inline std::string ablation_csv_row(const AblationRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%.10g", r.name.c_str(), r.mse, r.psnr_db,
                  r.fci_value, r.norm_ratio);
    return std::string(buf);
}

// Trains each configuration variant from scratch on the same video, then
// reconstructs and scores it. MSE is averaged over the last ten steps.
template <typename S>
std::vector<AblationRow> ablate(const TrainConfig<S>& base, const Tensor<S>& video,
                                int64_t prompt_id, int64_t steps,
                                const std::function<void(const std::string&)>& progress = {}) {
    std::vector<std::pair<std::string, TrainConfig<S>>> variants;
    variants.emplace_back("full", base);
    {
        TrainConfig<S> c = base;
        c.disable_gan = true;
        variants.emplace_back("no_discriminator", c);
    }
    {
        TrainConfig<S> c = base;
        c.disable_vgt = true;
        variants.emplace_back("no_vgt", c);
    }
    {
        TrainConfig<S> c = base;
        c.mse_only = true;
        variants.emplace_back("no_hyper_loss", c);
    }

    std::vector<AblationRow> rows;
    for (auto& [name, cfg] : variants) {
        if (progress) progress("ablate: " + name);
        Trainer<S> tr(cfg, video, prompt_id);
        std::vector<StepRecord> log = tr.fine_tune(steps);
        Tensor<S> recon = tr.sample(prompt_id, 1.0);
        AblationRow row;
        row.name = name;
        int64_t window = std::min<int64_t>(10, int64_t(log.size()));
        for (int64_t i = int64_t(log.size()) - window; i < int64_t(log.size()); ++i)
            row.mse += log[size_t(i)].mse / double(window);
        row.psnr_db = psnr(recon, video);
        row.fci_value = fci(recon);
        row.norm_ratio = log.empty() ? 0.0 : log.back().norm_ratio;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace apla
