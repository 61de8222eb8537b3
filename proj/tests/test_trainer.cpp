#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "apla/trainer.hpp"

using namespace apla;

namespace {

// Small geometry that keeps every invariant the full desk config has:
// latent (1, 2, 4, 8, 8), transformer grid 4x4, ten diffusion steps.
TrainConfig<float> tiny_cfg() {
    TrainConfig<float> c;
    c.frames = 2;
    c.height = 16;
    c.width = 16;
    c.T = 10;
    c.vgt_d = 8;
    c.vgt_heads = 2;
    c.vgt_P = 2;
    c.seed = 5;
    return c;
}

Tensor<float> tiny_video(uint64_t seed = 1) {
    SceneSpec spec;
    spec.frames = 2;
    spec.height = 16;
    spec.width = 16;
    spec.size = 5;
    spec.seed = seed;
    return gen_video<float>(spec);
}

std::string save_bytes(Trainer<float>& tr) {
    std::ostringstream os;
    tr.save(os);
    return os.str();
}

}  // namespace

TEST_CASE("train config validation rejects broken geometry") {
    TrainConfig<float> c = tiny_cfg();
    c.height = 15;  // not divisible by r
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = tiny_cfg();
    c.vgt_P = 3;  // latent 8x8 not divisible by 3
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = tiny_cfg();
    c.height = 4;
    c.width = 4;  // latent 2x2 not divisible by 4 (denoiser downsamples twice)
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = tiny_cfg();
    c.batch = 2;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = tiny_cfg();
    c.steps = -1;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = tiny_cfg();
    c.lr = -0.1;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    // Trainer constructor: prompt range and video shape.
    REQUIRE_THROWS_AS(Trainer<float>(tiny_cfg(), tiny_video(), 0), ConfigError);
    REQUIRE_THROWS_AS(Trainer<float>(tiny_cfg(), tiny_video(), 4), ConfigError);
    SceneSpec wrong;
    wrong.frames = 3;
    wrong.height = 16;
    wrong.width = 16;
    wrong.size = 5;
    REQUIRE_THROWS_AS(Trainer<float>(tiny_cfg(), gen_video<float>(wrong), 1), DimError);
}

TEST_CASE("config hash separates configs and ignores the step budget") {
    TrainConfig<float> a = tiny_cfg();
    TrainConfig<float> b = tiny_cfg();
    REQUIRE(a.hash() == b.hash());
    b.steps = 9999;  // run length is not part of model identity
    REQUIRE(a.hash() == b.hash());
    b = tiny_cfg();
    b.seed = 6;
    REQUIRE(a.hash() != b.hash());
    b = tiny_cfg();
    b.variant = VgtVariant::hyper;
    REQUIRE(a.hash() != b.hash());
    b = tiny_cfg();
    b.disable_gan = true;
    REQUIRE(a.hash() != b.hash());
}

TEST_CASE("parameter names are unique across all components") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    NamedParams<float> all = tr.all_params();
    std::set<std::string> names;
    for (auto& [name, p] : all) names.insert(name);
    REQUIRE(names.size() == all.size());
    REQUIRE(all.size() ==
            tr.den_.params().size() + tr.vgt_.params().size() + tr.disc_.params().size());
}

// The prediction head starts at zero, so the step-0 prediction is exactly
// zero and the per-step MSE is the sample mean of eps^2 over the latent.
// With lr = 0 nothing moves, so averaging many steps is a Monte Carlo
// estimate of E[eps^2] = 1 for unit Gaussian noise.
TEST_CASE("initial objective matches the unit-variance noise floor") {
    TrainConfig<float> c = tiny_cfg();
    c.lr = 0.0;
    c.mse_only = true;
    Trainer<float> tr(c, tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(100);
    double mean = 0;
    for (const StepRecord& r : log) mean += r.mse / double(log.size());
    REQUIRE(mean == Catch::Approx(1.0).margin(0.1));
}

TEST_CASE("mse_only reduces the objective to the plain MSE path") {
    TrainConfig<float> c = tiny_cfg();
    c.mse_only = true;
    Trainer<float> tr(c, tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(4);
    for (const StepRecord& r : log) {
        REQUIRE(r.l1 == 0.0);
        REQUIRE(r.per == 0.0);
        REQUIRE(r.lg == 0.0);
        REQUIRE(r.total == r.mse);
    }
    REQUIRE(tr.d_updates() == 0);
    REQUIRE(tr.g_updates() == 4);
}

TEST_CASE("disable_gan keeps the hyper objective but never touches the critic") {
    TrainConfig<float> c = tiny_cfg();
    c.disable_gan = true;
    Trainer<float> tr(c, tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(4);
    for (const StepRecord& r : log) {
        REQUIRE(r.lg == 0.0);
        REQUIRE(r.l1 > 0.0);
        REQUIRE(r.per >= 0.0);
        REQUIRE(r.total == Catch::Approx(r.mse * 0.5 + r.l1 * 0.2 + r.per * 0.1).epsilon(1e-5));
    }
    REQUIRE(tr.d_updates() == 0);
    // Discriminator parameters stayed at their zero init.
    REQUIRE(l2_norm(tr.disc_.w) == 0.0);
    REQUIRE(l2_norm(tr.disc_.b) == 0.0);
}

TEST_CASE("disable_vgt never invokes the transformer") {
    TrainConfig<float> c = tiny_cfg();
    c.disable_vgt = true;
    Trainer<float> tr(c, tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(5);
    REQUIRE(tr.vgt_.forward_count() == 0);
    for (const StepRecord& r : log) REQUIRE(r.norm_ratio == 0.0);
    // Sampling must not call it either.
    Tensor<float> recon = tr.sample(1, 1.5);
    REQUIRE(tr.vgt_.forward_count() == 0);
    REQUIRE(recon.shape() == Shape{2, 1, 16, 16});
}

TEST_CASE("critic and generator alternate strictly every step") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    tr.fine_tune(7);
    REQUIRE(tr.step() == 7);
    REQUIRE(tr.d_updates() == 7);
    REQUIRE(tr.g_updates() == 7);
}

TEST_CASE("perturbation branch wakes up and its log ratio is recomputable") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(6);
    REQUIRE(log.front().norm_ratio == 0.0);  // zero-init head: exact zero
    REQUIRE(log.back().norm_ratio > 0.0);    // first update wakes the head

    // The logged ratio must be reproducible from checkpointed tensors: a
    // reloaded trainer produces bitwise the same combined prediction.
    std::string bytes = save_bytes(tr);
    Trainer<float> tr2(tiny_cfg(), tiny_video(), 1);
    std::istringstream is(bytes);
    tr2.load(is);
    Rng probe(123);
    Tensor<float> eps(tr.reference_latent().shape());
    fill_normal(eps, probe);
    NoiseRecord<float> rec = q_sample(tr.sched_, tr.reference_latent(), 3, eps);
    CombinedPrediction<float> a = combine(tr.den_, tr.vgt_, rec.z_t, rec.z_t, 3, 1);
    CombinedPrediction<float> b = combine(tr2.den_, tr2.vgt_, rec.z_t, rec.z_t, 3, 1);
    REQUIRE(a.norm_ratio == b.norm_ratio);
    REQUIRE(a.norm_ratio > 0.0);
    REQUIRE(max_abs_diff(a.combined, b.combined) == 0.0);
}

TEST_CASE("csv rows round-trip through the trajectory parser") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(5);
    std::stringstream csv;
    csv << csv_header() << "\n";
    for (const StepRecord& r : log) csv << csv_row(r) << "\n";
    std::vector<std::pair<int64_t, double>> traj = ratio_trajectory(csv);
    REQUIRE(traj.size() == log.size());
    for (size_t i = 0; i < traj.size(); ++i) {
        REQUIRE(traj[i].first == log[i].step);
        REQUIRE(traj[i].second == Catch::Approx(log[i].norm_ratio).margin(1e-9));
    }
}

TEST_CASE("checkpoint save-load-save is byte-identical") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    tr.fine_tune(3);
    std::string bytes = save_bytes(tr);

    Trainer<float> tr2(tiny_cfg(), tiny_video(), 1);
    std::istringstream is(bytes);
    tr2.load(is);
    REQUIRE(save_bytes(tr2) == bytes);
    REQUIRE(tr2.step() == 3);
    REQUIRE(tr2.d_updates() == 3);
    REQUIRE(tr2.g_updates() == 3);

    NamedParams<float> pa = tr.all_params();
    NamedParams<float> pb = tr2.all_params();
    for (size_t i = 0; i < pa.size(); ++i)
        REQUIRE(max_abs_diff(*pa[i].second, *pb[i].second) == 0.0);
}

TEST_CASE("resumed training is bitwise identical to an unbroken run") {
    Trainer<float> straight(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> full = straight.fine_tune(5);

    Trainer<float> part(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> head = part.fine_tune(2);
    std::string bytes = save_bytes(part);

    Trainer<float> resumed(tiny_cfg(), tiny_video(), 1);
    std::istringstream is(bytes);
    resumed.load(is);
    std::vector<StepRecord> tail = resumed.fine_tune(3);

    REQUIRE(save_bytes(straight) == save_bytes(resumed));
    for (size_t i = 0; i < 2; ++i) REQUIRE(full[i].total == head[i].total);
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE(full[i + 2].total == tail[i].total);
        REQUIRE(full[i + 2].step == tail[i].step);
    }
}

TEST_CASE("same config and seed reproduce the run exactly") {
    Trainer<float> a(tiny_cfg(), tiny_video(), 1);
    Trainer<float> b(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> la = a.fine_tune(4);
    std::vector<StepRecord> lb = b.fine_tune(4);
    for (size_t i = 0; i < la.size(); ++i) {
        REQUIRE(la[i].total == lb[i].total);
        REQUIRE(la[i].norm_ratio == lb[i].norm_ratio);
    }
    REQUIRE(save_bytes(a) == save_bytes(b));
}

TEST_CASE("checkpoints guard magic, config identity, and scalar width") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    tr.fine_tune(1);
    std::string bytes = save_bytes(tr);

    {  // magic
        std::string bad = bytes;
        bad[0] = 'X';
        Trainer<float> t2(tiny_cfg(), tiny_video(), 1);
        std::istringstream is(bad);
        REQUIRE_THROWS_AS(t2.load(is), FormatError);
    }
    {  // truncation
        std::string bad = bytes.substr(0, bytes.size() / 2);
        Trainer<float> t2(tiny_cfg(), tiny_video(), 1);
        std::istringstream is(bad);
        REQUIRE_THROWS_AS(t2.load(is), FormatError);
    }
    {  // different config (seed changes the hash)
        TrainConfig<float> other = tiny_cfg();
        other.seed = 99;
        Trainer<float> t2(other, tiny_video(), 1);
        std::istringstream is(bytes);
        REQUIRE_THROWS_AS(t2.load(is), ConfigError);
    }
    {  // scalar width: a double build must refuse a float checkpoint
        TrainConfig<double> dc;
        dc.frames = 2;
        dc.height = 16;
        dc.width = 16;
        dc.T = 10;
        dc.vgt_d = 8;
        dc.vgt_heads = 2;
        dc.vgt_P = 2;
        dc.seed = 5;
        // Scalar width is checked before the config hash, so the width
        // mismatch is reported even though float/double weight defaults
        // round-trip to different canonical strings.
        SceneSpec spec;
        spec.frames = 2;
        spec.height = 16;
        spec.width = 16;
        spec.size = 5;
        Trainer<double> t2(dc, gen_video<double>(spec), 1);
        std::istringstream is(bytes);
        REQUIRE_THROWS_AS(t2.load(is), ConfigError);
    }
}

TEST_CASE("zero steps still produce a valid checkpoint") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(0);
    REQUIRE(log.empty());
    std::string bytes = save_bytes(tr);
    Trainer<float> tr2(tiny_cfg(), tiny_video(), 1);
    std::istringstream is(bytes);
    tr2.load(is);
    REQUIRE(tr2.step() == 0);
    REQUIRE(save_bytes(tr2) == bytes);
}

TEST_CASE("non-finite parameters abort with a step diagnostic") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    tr.fine_tune(1);
    (*tr.den_.params()[0].second)[0] = std::numeric_limits<float>::quiet_NaN();
    bool threw = false;
    try {
        tr.fine_tune(1);
    } catch (const NumericError& e) {
        threw = true;
        REQUIRE(std::string(e.what()).find("training aborted at step 1") != std::string::npos);
    }
    REQUIRE(threw);
}

// DDIM inversion followed by sampling with the same noise model is a near
// round trip, so an untrained model must already reconstruct the input to
// high accuracy: this pins the inversion/sampling pair against each other.
TEST_CASE("untrained reconstruction is a faithful round trip") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    Tensor<float> recon = tr.sample(1, 1.0);
    REQUIRE(recon.shape() == tiny_video().shape());
    REQUIRE(max_abs_diff(recon, tiny_video()) < 1e-2);
}

TEST_CASE("sampling is deterministic and does not disturb training state") {
    Trainer<float> tr(tiny_cfg(), tiny_video(), 1);
    tr.fine_tune(2);
    std::string before = save_bytes(tr);
    Tensor<float> g1 = tr.sample(1, 1.5, true, 42);
    Tensor<float> g2 = tr.sample(1, 1.5, true, 42);
    Tensor<float> g3 = tr.sample(1, 1.5, true, 43);
    REQUIRE(max_abs_diff(g1, g2) == 0.0);
    REQUIRE(max_abs_diff(g1, g3) > 0.0);
    REQUIRE(save_bytes(tr) == before);  // local noise stream only
}

TEST_CASE("short training run lowers the noise-prediction error") {
    TrainConfig<float> c = tiny_cfg();
    Trainer<float> tr(c, tiny_video(), 1);
    std::vector<StepRecord> log = tr.fine_tune(120);
    double head = 0, tail = 0;
    for (size_t i = 0; i < 20; ++i) head += log[i].mse / 20.0;
    for (size_t i = log.size() - 20; i < log.size(); ++i) tail += log[i].mse / 20.0;
    REQUIRE(tail < head);
}

TEST_CASE("ablation grid runs every variant and scores it") {
    TrainConfig<float> c = tiny_cfg();
    std::vector<AblationRow> rows = ablate(c, tiny_video(), 1, 12);
    REQUIRE(rows.size() == 4);
    REQUIRE(rows[0].name == "full");
    REQUIRE(rows[1].name == "no_discriminator");
    REQUIRE(rows[2].name == "no_vgt");
    REQUIRE(rows[3].name == "no_hyper_loss");
    for (const AblationRow& r : rows) {
        REQUIRE(std::isfinite(r.mse));
        REQUIRE(std::isfinite(r.psnr_db));
        REQUIRE(std::isfinite(r.fci_value));
        REQUIRE(std::isfinite(r.norm_ratio));
        REQUIRE(r.mse > 0.0);
        REQUIRE(r.psnr_db > 10.0);
    }
    REQUIRE(rows[0].norm_ratio > 0.0);
    REQUIRE(rows[2].norm_ratio == 0.0);
    std::string row = ablation_csv_row(rows[0]);
    REQUIRE(row.substr(0, 5) == "full,");
    REQUIRE(ablation_csv_header() == "variant,mse,psnr,fci,norm_ratio");
}
