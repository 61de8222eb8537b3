// Command-line surface: synthetic data generation, single-video fine-tuning,
// sampling, video metrics, the ablation grid, and the finite-difference
// gradient audit. Exit codes: 0 success, 1 failed check, 2 usage or config
// error, 3 numerical failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "apla/gradcheck.hpp"
#include "apla/trainer.hpp"

namespace fs = std::filesystem;
using namespace apla;

namespace {

TrainConfig<float> config_from_map(const ConfigMap& m) {
    TrainConfig<float> c;
    c.steps = config_i64(m, "steps", c.steps);
    c.lr = config_f64(m, "lr", c.lr);
    c.batch = config_i64(m, "batch", c.batch);
    c.weights.alpha = float(config_f64(m, "alpha", double(c.weights.alpha)));
    c.weights.beta = float(config_f64(m, "beta", double(c.weights.beta)));
    c.weights.gamma = float(config_f64(m, "gamma", double(c.weights.gamma)));
    c.weights.lambda = float(config_f64(m, "lambda", double(c.weights.lambda)));
    c.frames = config_i64(m, "frames", c.frames);
    c.channels = config_i64(m, "channels", c.channels);
    c.height = config_i64(m, "height", c.height);
    c.width = config_i64(m, "width", c.width);
    c.r = config_i64(m, "r", c.r);
    c.T = config_i64(m, "T", c.T);
    c.beta_min = config_f64(m, "beta_min", c.beta_min);
    c.beta_max = config_f64(m, "beta_max", c.beta_max);
    std::string variant = config_str(m, "variant", "pure");
    if (variant == "pure")
        c.variant = VgtVariant::pure;
    else if (variant == "hyper")
        c.variant = VgtVariant::hyper;
    else
        throw ConfigError("unknown variant '" + variant + "' (pure|hyper)");
    c.masked = config_bool(m, "masked", c.masked);
    c.vgt_L = config_i64(m, "L", c.vgt_L);
    c.vgt_M = config_i64(m, "M", c.vgt_M);
    c.vgt_heads = config_i64(m, "heads", c.vgt_heads);
    c.vgt_d = config_i64(m, "d", c.vgt_d);
    c.vgt_P = config_i64(m, "P", c.vgt_P);
    c.den_base = config_i64(m, "base", c.den_base);
    c.d_cond = config_i64(m, "d_cond", c.d_cond);
    c.n_prompts = config_i64(m, "n_prompts", c.n_prompts);
    c.disable_vgt = config_bool(m, "disable_vgt", c.disable_vgt);
    c.disable_gan = config_bool(m, "disable_gan", c.disable_gan);
    c.mse_only = config_bool(m, "mse_only", c.mse_only);
    c.seed = uint64_t(config_i64(m, "seed", int64_t(c.seed)));
    c.validate();
    return c;
}

// Effective settings echoed into every output directory so a run is
// reproducible from the directory contents alone.
void echo_config(const TrainConfig<float>& c, const ConfigMap& m, const fs::path& dir,
                 const std::string& extra) {
    std::ofstream os(dir / "config.txt");
    if (!os) throw FormatError("cannot write config echo in " + dir.string());
    char buf[1024];
    std::snprintf(buf, sizeof buf,
                  "steps = %lld\nlr = %.17g\nbatch = %lld\n"
                  "alpha = %.17g\nbeta = %.17g\ngamma = %.17g\nlambda = %.17g\n"
                  "frames = %lld\nchannels = %lld\nheight = %lld\nwidth = %lld\n"
                  "r = %lld\nT = %lld\nbeta_min = %.17g\nbeta_max = %.17g\n"
                  "variant = %s\nmasked = %d\nL = %lld\nM = %lld\nheads = %lld\n"
                  "d = %lld\nP = %lld\nbase = %lld\nd_cond = %lld\nn_prompts = %lld\n"
                  "disable_vgt = %d\ndisable_gan = %d\nmse_only = %d\nseed = %llu\n",
                  (long long)c.steps, c.lr, (long long)c.batch, double(c.weights.alpha),
                  double(c.weights.beta), double(c.weights.gamma), double(c.weights.lambda),
                  (long long)c.frames, (long long)c.channels, (long long)c.height,
                  (long long)c.width, (long long)c.r, (long long)c.T, c.beta_min, c.beta_max,
                  c.variant == VgtVariant::pure ? "pure" : "hyper", int(c.masked),
                  (long long)c.vgt_L, (long long)c.vgt_M, (long long)c.vgt_heads,
                  (long long)c.vgt_d, (long long)c.vgt_P, (long long)c.den_base,
                  (long long)c.d_cond, (long long)c.n_prompts, int(c.disable_vgt),
                  int(c.disable_gan), int(c.mse_only), (unsigned long long)c.seed);
    os << buf;
    os << "prompt = " << config_i64(m, "prompt", 1) << "\n";
    os << "guidance = " << config_f64(m, "guidance", 1.5) << "\n";
    if (!extra.empty()) os << extra;
}

Tensor<float> load_video(const std::string& path) {
    Tensor<float> v = read_vten<float>(path);
    if (v.rank() != 4)
        throw DimError("expected a (frames, channels, height, width) tensor in " + path);
    return v;
}

int run_gen_data(const SceneSpec& spec, const std::string& out, const std::string& ppm_dir) {
    Tensor<float> video = gen_video<float>(spec);
    write_vten(out, video);
    std::cerr << "wrote " << out << " shape " << shape_str(video.shape()) << "\n";
    if (!ppm_dir.empty()) {
        fs::create_directories(ppm_dir);
        std::vector<std::string> files = export_frames(video, ppm_dir);
        std::cerr << "wrote " << files.size() << " ppm frames to " << ppm_dir << "\n";
    }
    return 0;
}

int run_train(const std::string& config_path, const std::string& video_path,
              const std::string& out_dir, int64_t steps_override, const std::string& resume) {
    ConfigMap m = parse_config_file(config_path);
    TrainConfig<float> cfg = config_from_map(m);
    if (steps_override >= 0) cfg.steps = steps_override;
    int64_t prompt = config_i64(m, "prompt", 1);
    Tensor<float> video = load_video(video_path);
    fs::create_directories(out_dir);
    echo_config(cfg, m, out_dir, "");

    Trainer<float> tr(cfg, video, prompt);
    if (!resume.empty()) {
        tr.load(resume);
        std::cerr << "resumed from " << resume << " at step " << tr.step() << "\n";
    }
    std::ofstream log(fs::path(out_dir) / "log.csv");
    if (!log) throw FormatError("cannot write log.csv in " + out_dir);
    log << csv_header() << "\n";
    int64_t next_report = 0;
    Trainer<float>::Observer obs = [&](const StepRecord& r) {
        log << csv_row(r) << "\n";
        if (r.step >= next_report) {
            std::cerr << "step " << r.step << " total " << r.total << " mse " << r.mse
                      << " ratio " << r.norm_ratio << "\n";
            next_report = r.step + std::max<int64_t>(1, cfg.steps / 10);
        }
    };
    tr.fine_tune(cfg.steps, obs);
    std::string ckpt = (fs::path(out_dir) / "checkpoint.apla").string();
    tr.save(ckpt);
    std::cerr << "wrote " << ckpt << " at step " << tr.step() << "\n";
    return 0;
}

int run_sample(const std::string& config_path, const std::string& video_path,
               const std::string& ckpt, const std::string& out_dir, const std::string& mode,
               double guidance_flag, int64_t prompt_flag, uint64_t noise_seed) {
    ConfigMap m = parse_config_file(config_path);
    TrainConfig<float> cfg = config_from_map(m);
    int64_t prompt = prompt_flag >= 0 ? prompt_flag : config_i64(m, "prompt", 1);
    double guidance = guidance_flag >= 0 ? guidance_flag : config_f64(m, "guidance", 1.5);
    bool generation;
    if (mode == "reconstruct")
        generation = false;
    else if (mode == "generate")
        generation = true;
    else
        throw ConfigError("unknown mode '" + mode + "' (reconstruct|generate)");

    Tensor<float> video = load_video(video_path);
    Trainer<float> tr(cfg, video, prompt);
    if (!ckpt.empty()) tr.load(ckpt);
    Tensor<float> out = tr.sample(prompt, guidance, generation, noise_seed);

    fs::create_directories(out_dir);
    echo_config(cfg, m, out_dir, "mode = " + mode + "\n");
    std::string vten = (fs::path(out_dir) / "sample.vten").string();
    write_vten(vten, out);
    fs::path frames = fs::path(out_dir) / "frames";
    fs::create_directories(frames);
    std::vector<std::string> files = export_frames(out, frames.string());
    std::cerr << "wrote " << vten << " and " << files.size() << " frames\n";
    return 0;
}

int run_metrics(const std::string& video_path, const std::string& ref_path,
                const std::string& out_path) {
    Tensor<float> video = load_video(video_path);
    std::string lines = "metric,value\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "fci,%.10g\n", fci(video));
    lines += buf;
    std::fputs(buf, stdout);
    if (!ref_path.empty()) {
        Tensor<float> ref = load_video(ref_path);
        std::snprintf(buf, sizeof buf, "psnr,%.10g\n", psnr(video, ref));
        lines += buf;
        std::fputs(buf, stdout);
    }
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        if (!os) throw FormatError("cannot write " + out_path);
        os << lines;
    }
    return 0;
}

int run_ablate(const std::string& config_path, const std::string& video_path,
               const std::string& out_path, int64_t steps_override) {
    ConfigMap m = parse_config_file(config_path);
    TrainConfig<float> cfg = config_from_map(m);
    int64_t steps = steps_override >= 0 ? steps_override : cfg.steps;
    int64_t prompt = config_i64(m, "prompt", 1);
    Tensor<float> video = load_video(video_path);
    std::vector<AblationRow> rows =
        ablate(cfg, video, prompt, steps, [](const std::string& s) { std::cerr << s << "\n"; });
    std::string csv = ablation_csv_header() + "\n";
    for (const AblationRow& r : rows) csv += ablation_csv_row(r) + "\n";
    std::fputs(csv.c_str(), stdout);
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        if (!os) throw FormatError("cannot write " + out_path);
        os << csv;
    }
    return 0;
}

int run_gradcheck(double tol) {
    int failures = 0;
    auto run_suite = [&](std::vector<GradCheck> suite) {
        for (GradCheck& check : suite) {
            double err = check.run();
            bool ok = err < tol;
            std::printf("%s %s max_rel_err %.3e\n", ok ? "ok  " : "FAIL", check.name.c_str(), err);
            if (!ok) ++failures;
        }
    };
    run_suite(op_gradient_suite());
    run_suite(composite_gradient_suite());
    if (failures) std::printf("%d gradient check(s) failed\n", failures);
    return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale text-to-video fine-tuning pipeline"};
    app.require_subcommand(1);

    // gen-data
    SceneSpec spec;
    std::string scene = "moving_square", gen_out, gen_ppm;
    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic video tensor");
    gen->add_option("--scene", scene, "moving_square|bouncing_ball|static");
    gen->add_option("--frames", spec.frames);
    gen->add_option("--height", spec.height);
    gen->add_option("--width", spec.width);
    gen->add_option("--size", spec.size, "object size in pixels");
    gen->add_option("--vel-y", spec.vel_y);
    gen->add_option("--vel-x", spec.vel_x);
    gen->add_option("--seed", spec.seed);
    gen->add_option("--out", gen_out, "output .vten path")->required();
    gen->add_option("--ppm-dir", gen_ppm, "also export frames here");

    // train
    std::string tr_config, tr_video, tr_out, tr_resume;
    int64_t tr_steps = -1;
    CLI::App* train = app.add_subcommand("train", "fine-tune on one video");
    train->add_option("--config", tr_config, "flat key = value config file")->required();
    train->add_option("--video", tr_video, "reference video .vten")->required();
    train->add_option("--out", tr_out, "output directory")->required();
    train->add_option("--steps", tr_steps, "override the config step budget");
    train->add_option("--resume", tr_resume, "checkpoint to resume from");

    // sample
    std::string sm_config, sm_video, sm_ckpt, sm_out, sm_mode = "reconstruct";
    double sm_guidance = -1;
    int64_t sm_prompt = -1;
    uint64_t sm_noise_seed = 99;
    CLI::App* sample = app.add_subcommand("sample", "run the sampler from a checkpoint");
    sample->add_option("--config", sm_config)->required();
    sample->add_option("--video", sm_video, "reference video .vten")->required();
    sample->add_option("--checkpoint", sm_ckpt, "trained checkpoint (omit for init weights)");
    sample->add_option("--out", sm_out, "output directory")->required();
    sample->add_option("--mode", sm_mode, "reconstruct|generate");
    sample->add_option("--guidance", sm_guidance, "guidance weight (default from config)");
    sample->add_option("--prompt", sm_prompt, "prompt id (default from config)");
    sample->add_option("--noise-seed", sm_noise_seed, "generation-mode noise seed");

    // metrics
    std::string mt_video, mt_ref, mt_out;
    CLI::App* metrics = app.add_subcommand("metrics", "flow consistency and PSNR of a video");
    metrics->add_option("--video", mt_video)->required();
    metrics->add_option("--ref", mt_ref, "reference video for PSNR");
    metrics->add_option("--out", mt_out, "also write CSV here");

    // ablate
    std::string ab_config, ab_video, ab_out;
    int64_t ab_steps = -1;
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train every variant and tabulate");
    ablate_cmd->add_option("--config", ab_config)->required();
    ablate_cmd->add_option("--video", ab_video)->required();
    ablate_cmd->add_option("--out", ab_out, "CSV output path");
    ablate_cmd->add_option("--steps", ab_steps, "override the config step budget");

    // gradcheck
    double gc_tol = 1e-4;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_option("--tol", gc_tol, "max relative error allowed");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            spec.kind = scene_kind_from(scene);
            return run_gen_data(spec, gen_out, gen_ppm);
        }
        if (train->parsed()) return run_train(tr_config, tr_video, tr_out, tr_steps, tr_resume);
        if (sample->parsed())
            return run_sample(sm_config, sm_video, sm_ckpt, sm_out, sm_mode, sm_guidance,
                              sm_prompt, sm_noise_seed);
        if (metrics->parsed()) return run_metrics(mt_video, mt_ref, mt_out);
        if (ablate_cmd->parsed()) return run_ablate(ab_config, ab_video, ab_out, ab_steps);
        if (gradcheck->parsed()) return run_gradcheck(gc_tol);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
