#pragma once

// Command-line front end. Kept in a header so tests can drive the exact code
// paths the executable runs.

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "diffmorph/data.hpp"
#include "diffmorph/io.hpp"
#include "diffmorph/metrics.hpp"
#include "diffmorph/nets.hpp"
#include "diffmorph/schedule.hpp"
#include "diffmorph/train.hpp"

namespace diffmorph::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4, kModel = 5 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

// Accepts [H,W], [1,H,W] or [1,1,H,W]; returns [1,1,H,W].
inline Tensor as_batch(const Tensor& t, const std::string& what) {
    const auto& s = t.shape();
    const bool ok = (s.size() == 2) || (s.size() == 3 && s[0] == 1) || (s.size() == 4 && s[0] == 1 && s[1] == 1);
    if (!ok) throw ShapeError(what + ": expected a single-channel 2-D image, got " + shape_str(s));
    return Tensor({1, 1, s[s.size() - 2], s[s.size() - 1]}, t.vec());
}

inline Tensor strip_batch(const Tensor& t) { return diffmorph::detail::drop_batch_axis(t); }

inline void check_fits(const Model<float>& model, const Tensor& m, const Tensor& f) {
    if (m.shape() != f.shape()) {
        throw ShapeError("moving " + shape_str(m.shape()) + " and fixed " + shape_str(f.shape()) + " differ in shape");
    }
    const std::size_t mult = model.arch().size_multiple();
    if (m.dim(2) % mult != 0 || m.dim(3) % mult != 0) {
        throw ShapeError("image size " + std::to_string(m.dim(2)) + "x" + std::to_string(m.dim(3)) +
                         " is not a multiple of " + std::to_string(mult) + " required by the checkpoint");
    }
}

inline std::vector<double> parse_etas(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = diffmorph::detail::trim(item);
        double v = 0.0;
        auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (res.ec != std::errc() || res.ptr != item.data() + item.size()) throw UsageError("bad eta value '" + item + "'");
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("eta " + item + " outside [0,1]");
        out.push_back(v);
    }
    if (out.empty()) throw UsageError("no eta values given");
    return out;
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline void ensure_parent(const std::filesystem::path& p) {
    if (p.has_parent_path()) ensure_dir(p.parent_path());
}

}  // namespace detail

struct SynthArgs {
    std::string out;
    std::size_t count = 200;
    std::size_t size = 32;
    std::uint64_t seed = 0;
    double blur = 4.0;
    double max_mag = 3.0;
};

inline int cmd_synth_data(const SynthArgs& a) {
    write_synthetic_dataset(a.out, a.count, a.seed, SynthParams{a.size, a.blur, a.max_mag});
    return kOk;
}

inline int cmd_train(const std::string& config_path, bool quiet) {
    const TrainingConfig cfg = load_config(config_path);
    train(cfg, [quiet](const TrainProgress& p) {
        if (!quiet) {
            std::fprintf(stderr, "step %llu epoch %d  diffusion %.5f  regist %.5f  total %.5f\n",
                         static_cast<unsigned long long>(p.step), p.epoch, p.losses.diffusion, p.losses.regist,
                         p.losses.total);
        }
    });
    return kOk;
}

struct RegisterArgs {
    std::string checkpoint, moving, fixed, out_field, out_warped, report;
    std::string mask_moving, mask_fixed;
};

inline int cmd_register(const RegisterArgs& a) {
    auto model = load_model(a.checkpoint);
    const Tensor m = detail::as_batch(load_tensor(a.moving), a.moving);
    const Tensor f = detail::as_batch(load_tensor(a.fixed), a.fixed);
    detail::check_fits(*model, m, f);
    const auto reg = register_pair(*model, m, f);
    detail::ensure_parent(a.out_field);
    detail::ensure_parent(a.out_warped);
    save_field(a.out_field, detail::strip_batch(reg.field));
    save_tensor(a.out_warped, detail::strip_batch(reg.warped));
    if (!a.report.empty()) {
        PairSample s{detail::strip_batch(m), detail::strip_batch(f), {}, {}, {}};
        if (!a.mask_moving.empty() && !a.mask_fixed.empty()) {
            s.mask_m = detail::strip_batch(detail::as_batch(load_tensor(a.mask_moving), a.mask_moving));
            s.mask_f = detail::strip_batch(detail::as_batch(load_tensor(a.mask_fixed), a.mask_fixed));
        } else {
            std::fprintf(stderr, "note: no masks given, dice column left empty\n");
        }
        const auto r = evaluate_pair(s, reg.field);
        detail::ensure_parent(a.report);
        std::ofstream os(a.report, std::ios::binary);
        os << kReportHeader << "\n" << std::filesystem::path(a.moving).stem().string() << "," << report_cells(r) << "\n";
        if (!os) throw IoError("cannot write " + a.report);
    }
    return kOk;
}

/// File stem for one eta frame, using the shortest exact decimal form.
inline std::string eta_name(double eta) {
    return "eta_" + diffmorph::detail::fmt_double(eta);
}

struct InterpolateArgs {
    std::string checkpoint, moving, fixed, out_dir;
    std::string etas = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
};

inline int cmd_interpolate(const InterpolateArgs& a) {
    const auto etas = detail::parse_etas(a.etas);
    auto model = load_model(a.checkpoint);
    const Tensor m = detail::as_batch(load_tensor(a.moving), a.moving);
    const Tensor f = detail::as_batch(load_tensor(a.fixed), a.fixed);
    detail::check_fits(*model, m, f);
    detail::ensure_dir(a.out_dir);
    NoGradGuard no_grad;
    const Tensor score = latent_at_eta(*model, m, f, 1.0);
    for (double eta : etas) {
        const auto reg = register_with_latent(*model, m, scale(score, static_cast<float>(eta)));
        const std::filesystem::path base = std::filesystem::path(a.out_dir) / eta_name(eta);
        save_field(base.string() + ".field.dmt", detail::strip_batch(reg.field));
        save_tensor(base.string() + ".warped.dmt", detail::strip_batch(reg.warped));
        save_image(base.string() + ".warped.pgm", reg.warped);
    }
    return kOk;
}

struct GenerateArgs {
    std::string checkpoint, moving, fixed, out;
    int t_forward = 200;
    int steps = 80;
    std::uint64_t seed = 0;
    bool save_trajectory = false;
};

inline int cmd_generate(const GenerateArgs& a) {
    TrainingConfig cfg;
    auto model = load_model(a.checkpoint, &cfg);
    if (a.t_forward < 1 || a.t_forward > cfg.T_train) {
        throw UsageError("--t-forward must lie in [1, " + std::to_string(cfg.T_train) + "]");
    }
    if (a.steps < 1 || a.steps > a.t_forward) throw UsageError("--steps must lie in [1, t-forward]");
    const Tensor m = detail::as_batch(load_tensor(a.moving), a.moving);
    const Tensor f = detail::as_batch(load_tensor(a.fixed), a.fixed);
    detail::check_fits(*model, m, f);
    const NoiseSchedule sched = cfg.schedule();
    ScoreFn<float> score = [&](const Tensor& x, int t) { return score_forward(*model, m, f, x, {t}); };
    detail::ensure_parent(a.out);
    const std::filesystem::path out(a.out);
    std::function<void(int, const Tensor&)> dump;
    if (a.save_trajectory) {
        dump = [&](int i, const Tensor& x) {
            char buf[32];
            std::snprintf(buf, sizeof buf, ".step%04d.dmt", i);
            auto p = out;
            p.replace_filename(out.stem().string() + buf);
            save_tensor(p, detail::strip_batch(x));
        };
    }
    const Tensor sample = generate(m, score, sched, a.t_forward, a.steps, a.seed, dump);
    save_tensor(out, detail::strip_batch(sample));
    auto preview = out;
    preview.replace_extension(".pgm");
    save_image(preview, sample);
    return kOk;
}

struct EvaluateArgs {
    std::string checkpoint, data, out;
    std::string baseline;
    int iters = 300;
};

inline int cmd_evaluate(const EvaluateArgs& a) {
    if (!a.baseline.empty() && a.baseline != "classical") throw UsageError("unknown baseline '" + a.baseline + "'");
    TrainingConfig cfg;
    auto model = load_model(a.checkpoint, &cfg);
    const auto ids = read_manifest(a.data);
    const bool with_base = !a.baseline.empty();
    std::string header = kReportHeader;
    if (with_base) header += ",classical_nmse,classical_ssim,classical_psnr_db,classical_dice,classical_fold_pct";
    std::string body;
    std::vector<MetricReport> learned, classical;
    for (const auto& id : ids) {
        const PairSample s = load_pair(a.data, id);
        const Tensor m = detail::as_batch(s.m, id), f = detail::as_batch(s.f, id);
        detail::check_fits(*model, m, f);
        const auto reg = register_pair(*model, m, f);
        learned.push_back(evaluate_pair(s, reg.field));
        body += id + "," + report_cells(learned.back());
        if (with_base) {
            const auto base = classical_register(m, f, cfg.weights, a.iters);
            classical.push_back(evaluate_pair(s, base.field));
            body += "," + report_cells(classical.back());
        }
        body += "\n";
    }
    detail::ensure_parent(a.out);
    std::ofstream os(a.out, std::ios::binary);
    os << header << "\n" << body;
    if (!ids.empty()) {
        os << "mean (std)," << summary_cells(learned);
        if (with_base) os << "," << summary_cells(classical);
        os << "\n";
    }
    if (!os) throw IoError("cannot write " + a.out);
    return kOk;
}

/// Parses argv and runs one subcommand; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    CLI::App app{"Joint diffusion and deformation model for deformable image registration"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth-data", "Write a synthetic pair dataset");
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--count", synth.count, "Number of pairs")->capture_default_str();
    c_synth->add_option("--size", synth.size, "Image side length (>= 16)")->capture_default_str();
    c_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
    c_synth->add_option("--blur", synth.blur, "Displacement smoothness sigma, voxels")->capture_default_str();
    c_synth->add_option("--max-mag", synth.max_mag, "Peak displacement, voxels")->capture_default_str();

    std::string config_path;
    bool quiet = false;
    auto* c_train = app.add_subcommand("train", "Train both networks from a config file");
    c_train->add_option("--config", config_path, "key = value config file")->required();
    c_train->add_flag("--quiet", quiet, "Do not print per-step losses");

    RegisterArgs reg;
    auto* c_reg = app.add_subcommand("register", "Single-pass registration of one pair");
    c_reg->add_option("--checkpoint", reg.checkpoint, "Model checkpoint")->required();
    c_reg->add_option("--moving", reg.moving, "Moving image (DMT)")->required();
    c_reg->add_option("--fixed", reg.fixed, "Fixed image (DMT)")->required();
    c_reg->add_option("--out-field", reg.out_field, "Output displacement field (DMT)")->required();
    c_reg->add_option("--out-warped", reg.out_warped, "Output warped image (DMT)")->required();
    c_reg->add_option("--report", reg.report, "Optional one-row metric CSV");
    c_reg->add_option("--mask-moving", reg.mask_moving, "Moving mask for the report's dice column");
    c_reg->add_option("--mask-fixed", reg.mask_fixed, "Fixed mask for the report's dice column");

    InterpolateArgs interp;
    auto* c_interp = app.add_subcommand("interpolate", "Deformations along a grid of latent scales eta");
    c_interp->add_option("--checkpoint", interp.checkpoint, "Model checkpoint")->required();
    c_interp->add_option("--moving", interp.moving, "Moving image (DMT)")->required();
    c_interp->add_option("--fixed", interp.fixed, "Fixed image (DMT)")->required();
    c_interp->add_option("--etas", interp.etas, "Comma separated values in [0,1]")->capture_default_str();
    c_interp->add_option("--out-dir", interp.out_dir, "Output directory")->required();

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "Reverse diffusion started from the noised moving image");
    c_gen->add_option("--checkpoint", gen.checkpoint, "Model checkpoint")->required();
    c_gen->add_option("--moving", gen.moving, "Moving image (DMT)")->required();
    c_gen->add_option("--fixed", gen.fixed, "Fixed image (DMT)")->required();
    c_gen->add_option("--t-forward", gen.t_forward, "Forward noise level")->capture_default_str();
    c_gen->add_option("--steps", gen.steps, "Number of reverse steps")->capture_default_str();
    c_gen->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
    c_gen->add_option("--out", gen.out, "Output sample (DMT); a PGM preview is written next to it")->required();
    c_gen->add_flag("--save-trajectory", gen.save_trajectory, "Also write every intermediate state");

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Metric report over a dataset directory");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
    c_eval->add_option("--data", ev.data, "Dataset directory")->required();
    c_eval->add_option("--out", ev.out, "Report CSV")->required();
    c_eval->add_option("--baseline", ev.baseline, "Add a baseline column group (classical)");
    c_eval->add_option("--iters", ev.iters, "Baseline iterations")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        std::ostringstream out;
        const int code = app.exit(e, out, err);
        std::cout << out.str();
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*c_synth) return cmd_synth_data(synth);
        if (*c_train) return cmd_train(config_path, quiet);
        if (*c_reg) return cmd_register(reg);
        if (*c_interp) return cmd_interpolate(interp);
        if (*c_gen) return cmd_generate(gen);
        if (*c_eval) return cmd_evaluate(ev);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const SynthError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return kNumerical;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
        return kModel;
    } catch (const ModelMismatch& e) {
        err << "model mismatch: " << e.what() << "\n";
        return kModel;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    }
    return kUsage;
}

}  // namespace diffmorph::cli
