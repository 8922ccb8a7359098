#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>

#include "carn/checkpoint.hpp"
#include "carn/enhance.hpp"
#include "carn/metrics.hpp"
#include "carn/train.hpp"
#include "carn/wav.hpp"

namespace carn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFormat = 2, kCheckpoint = 3 };

inline constexpr double kMaxEnhanceSeconds = 60.0;

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Model and training keys may share one key=value file.
inline void load_config_file(const std::string& path, CarnConfig& model, TrainConfig& train) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key=value");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (!model.set(key, value) && !train.set(key, value)) {
            throw ConfigError(path + ":" + std::to_string(n) + ": unknown key '" + key + "'");
        }
    }
}

inline void require_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty() && !std::filesystem::is_directory(parent)) {
        throw UsageError("output directory " + parent.string() + " does not exist");
    }
}

struct TrainArgs {
    std::string config, out, loss;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    std::string variant;
    bool steps_set = false, seed_set = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
    CarnConfig model_cfg;
    TrainConfig train_cfg;
    if (!a.config.empty()) load_config_file(a.config, model_cfg, train_cfg);
    if (a.steps_set) train_cfg.max_steps = a.steps;
    if (a.seed_set) {
        model_cfg.seed = a.seed;
        train_cfg.seed = a.seed;
    }
    if (!a.variant.empty()) model_cfg.variant = a.variant == "gated" ? Variant::gated : Variant::plain;
    model_cfg.validate();
    train_cfg.validate();
    const std::string loss_path = a.loss.empty() ? a.out + ".loss.csv" : a.loss;
    require_parent_dir(a.out);
    require_parent_dir(loss_path);

    CarnModel<float> model(model_cfg);
    if (train_cfg.output_init == OutputInit::identity) identity_output_init(model);
    TrainState<float> state;
    out << "training " << model.count_parameters() << " parameters for up to " << train_cfg.max_steps << " steps\n";
    const auto result = train_loop(model, train_cfg, state, [&](const LossRow& row) {
        if (!std::isnan(row.eval_loss)) {
            out << "step " << row.step << " lr " << row.lr << " train " << row.train_loss << " eval " << row.eval_loss
                << '\n';
        }
        return false;
    });
    if (result.early_stopped) out << "early stop at step " << result.curve.back().step << '\n';
    save_checkpoint(a.out, model);
    std::ofstream csv(loss_path);
    if (!csv) throw UsageError("cannot write " + loss_path);
    write_loss_csv(csv, result.curve);
    out << "wrote " << a.out << " and " << loss_path << '\n';
    return kOk;
}

inline int cmd_enhance(const std::string& model_path, const std::string& in_path, const std::string& out_path,
                       std::ostream& out) {
    require_parent_dir(out_path);
    auto model = load_checkpoint<float>(model_path);
    const auto noisy = read_wav(in_path);
    const double seconds = static_cast<double>(noisy.size()) / dsp::kSampleRate;
    if (seconds > kMaxEnhanceSeconds) {
        throw WavError("input is " + std::to_string(seconds) + " s long; the limit is 60 s, split the file first");
    }
    if (noisy.size() == 0) throw WavError("input has no samples");
    const auto clean = enhance(model, noisy);
    for (float v : clean.samples) {
        if (!std::isfinite(v)) throw CheckpointError("model produced non-finite samples; the checkpoint is unusable");
    }
    write_wav(out_path, clean);
    out << "wrote " << clean.size() << " samples to " << out_path << '\n';
    return kOk;
}

inline int cmd_eval(const std::string& ref_path, const std::string& deg_path, std::ostream& out) {
    const auto ref = read_wav(ref_path), deg = read_wav(deg_path);
    if (ref.size() != deg.size()) {
        throw WavError("length mismatch: reference has " + std::to_string(ref.size()) + " samples, degraded has " +
                       std::to_string(deg.size()));
    }
    MetricReport report;
    try {
        report = evaluate(deg, ref);
    } catch (const std::invalid_argument& e) {
        throw WavError(e.what());
    }
    write_metric_csv(out, {report});
    return kOk;
}

inline int cmd_info(const std::string& model_path, std::ostream& out) {
    const auto model = load_checkpoint<float>(model_path);
    out << model.config().to_text();
    out << "parameters=" << model.count_parameters() << '\n';
    for (const auto& p : model.parameters()) {
        out << p->name << ' ' << to_string(p->value.shape()) << (p->trainable ? "" : " (buffer)") << '\n';
    }
    return kOk;
}

// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"CARN speech enhancement: train, enhance, eval, info"};
    app.require_subcommand(1);

    TrainArgs t;
    auto* train = app.add_subcommand("train", "Train on synthetic mixtures and write a checkpoint");
    train->add_option("--config", t.config, "key=value file with model and training settings");
    train->add_option("--out", t.out, "checkpoint path")->required();
    train->add_option("--loss", t.loss, "loss table path (default: <out>.loss.csv)");
    auto* steps = train->add_option("--steps", t.steps, "maximum training steps");
    auto* seed = train->add_option("--seed", t.seed, "seed for initialisation and data");
    train->add_option("--variant", t.variant, "plain or gated")->check(CLI::IsMember({"plain", "gated"}));

    std::string model_path, in_path, out_path, ref_path, deg_path;
    auto* enh = app.add_subcommand("enhance", "Enhance a 16 kHz mono 16-bit WAV file");
    enh->add_option("--model", model_path, "checkpoint")->required();
    enh->add_option("--in", in_path, "noisy WAV")->required();
    enh->add_option("--out", out_path, "enhanced WAV")->required();

    auto* ev = app.add_subcommand("eval", "Compare a degraded WAV against a clean reference");
    ev->add_option("--ref", ref_path, "clean WAV")->required();
    ev->add_option("--deg", deg_path, "degraded or enhanced WAV")->required();

    auto* info = app.add_subcommand("info", "Print the config, parameter count and shapes of a checkpoint");
    info->add_option("--model", model_path, "checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun with --help for usage\n";
        return kUsage;
    }

    try {
        if (train->parsed()) {
            t.steps_set = steps->count() > 0;
            t.seed_set = seed->count() > 0;
            return cmd_train(t, out);
        }
        if (enh->parsed()) return cmd_enhance(model_path, in_path, out_path, out);
        if (ev->parsed()) return cmd_eval(ref_path, deg_path, out);
        return cmd_info(model_path, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const WavError& e) {
        err << "error: " << e.what() << '\n';
        return kFormat;
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << '\n';
        return kCheckpoint;
    } catch (const std::runtime_error& e) {
        // File-system failures on inputs.
        err << "error: " << e.what() << '\n';
        return kFormat;
    }
}

}  // namespace carn::cli
