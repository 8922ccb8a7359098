#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/loss.hpp"
#include "carn/mask.hpp"
#include "carn/model.hpp"
#include "carn/synth.hpp"

namespace carn {

enum class OutputInit { fan_in, identity };

struct TrainConfig {
    double peak_lr = 1e-3;
    std::size_t warmup_steps = 500;
    std::size_t batch = 4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double early_stop_threshold = 0.05;
    bool early_stopping = true;
    std::size_t eval_interval = 100;
    std::size_t eval_clips = 10;
    std::size_t max_steps = 1000;
    bool fixed_batch = false;  // reuse one batch every step (overfitting runs)
    OutputInit output_init = OutputInit::fan_in;
    std::uint64_t seed = 0;
    SynthConfig data;

    void validate() const {
        if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("train: peak_lr must be positive");
        if (!(early_stop_threshold > 0.0 && early_stop_threshold < 1.0)) {
            throw ConfigError("train: early_stop_threshold must lie in (0, 1)");
        }
        if (batch == 0) throw ConfigError("train: batch must be at least 1");
        if (eval_interval == 0) throw ConfigError("train: eval_interval must be at least 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("train: adam betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
        data.validate();
    }

    bool set(const std::string& key, const std::string& value) {
        auto real = [&] {
            try {
                std::size_t pos = 0;
                const double v = std::stod(value, &pos);
                if (pos != value.size()) throw std::invalid_argument(value);
                return v;
            } catch (const std::exception&) {
                throw ConfigError("config: " + key + " expects a number, got '" + value + "'");
            }
        };
        auto flag = [&] {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw ConfigError("config: " + key + " expects true or false, got '" + value + "'");
        };
        if (key == "peak_lr") {
            peak_lr = real();
        } else if (key == "warmup_steps") {
            warmup_steps = CarnConfig::parse_size(key, value);
        } else if (key == "batch") {
            batch = CarnConfig::parse_size(key, value);
        } else if (key == "adam_beta1") {
            beta1 = real();
        } else if (key == "adam_beta2") {
            beta2 = real();
        } else if (key == "adam_eps") {
            adam_eps = real();
        } else if (key == "early_stop_threshold") {
            early_stop_threshold = real();
        } else if (key == "early_stopping") {
            early_stopping = flag();
        } else if (key == "eval_interval") {
            eval_interval = CarnConfig::parse_size(key, value);
        } else if (key == "eval_clips") {
            eval_clips = CarnConfig::parse_size(key, value);
        } else if (key == "max_steps") {
            max_steps = CarnConfig::parse_size(key, value);
        } else if (key == "fixed_batch") {
            fixed_batch = flag();
        } else if (key == "output_init") {
            if (value == "fan_in") {
                output_init = OutputInit::fan_in;
            } else if (value == "identity") {
                output_init = OutputInit::identity;
            } else {
                throw ConfigError("config: output_init expects fan_in or identity, got '" + value + "'");
            }
        } else if (key == "train_seed") {
            seed = CarnConfig::parse_size(key, value);
        } else if (key == "clip_samples") {
            data.clip_samples = CarnConfig::parse_size(key, value);
        } else if (key == "snr_min_db") {
            data.snr_min_db = real();
        } else if (key == "snr_max_db") {
            data.snr_max_db = real();
        } else if (key == "noises") {
            data.noises.clear();
            std::stringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (item == "white") {
                    data.noises.push_back(NoiseKind::white);
                } else if (item == "pink") {
                    data.noises.push_back(NoiseKind::pink);
                } else if (item == "babble") {
                    data.noises.push_back(NoiseKind::babble);
                } else {
                    throw ConfigError("config: unknown noise kind '" + item + "'");
                }
            }
        } else {
            return false;
        }
        return true;
    }
};

// Linear ramp to the peak over the warmup, then inverse square-root decay.
inline double warmup_lr(std::size_t step, const TrainConfig& cfg) {
    const double s = static_cast<double>(step), w = static_cast<double>(cfg.warmup_steps);
    if (cfg.warmup_steps == 0) return cfg.peak_lr;
    if (step <= cfg.warmup_steps) return cfg.peak_lr * s / w;
    return cfg.peak_lr * std::sqrt(w / s);
}

// |L_prev - L_cur| / L_cur < threshold on the two most recent entries.
inline bool early_stop(const std::vector<double>& history, double threshold) {
    if (history.size() < 2) return false;
    const double prev = history[history.size() - 2], cur = history.back();
    if (cur == 0.0) return prev == 0.0;
    return std::abs(prev - cur) / std::abs(cur) < threshold;
}

template <typename T>
struct TrainState {
    std::size_t step = 0;  // optimizer updates applied so far
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::vector<double> loss_history;  // evaluation losses
};

// One Adam update with bias correction. Parameters without a gradient are
// treated as having a zero gradient.
template <typename T>
void adam_step(ParameterStore<T>& params, TrainState<T>& state, double lr, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = params[i];
        if (!p.trainable) continue;
        const std::size_t n = p.value.numel();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != n) {
            m.assign(n, T{0});
            v.assign(n, T{0});
        }
        if (!p.grad.empty() && p.grad.size() != n) throw std::logic_error("adam: gradient size mismatch for " + p.name);
        for (std::size_t k = 0; k < n; ++k) {
            const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[k]);
            const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            p.value[k] -= static_cast<T>(lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps));
        }
    }
}

// Network-ready view of a batch of equal-length mixtures.
template <typename T>
struct SpectralBatch {
    Tensor<T> input;  // [B, 2, T, F]
    Tensor<T> noisy_real, noisy_imag, clean_real, clean_imag;  // [B, T, F]
};

template <typename T>
SpectralBatch<T> make_batch(const std::vector<Mixture<T>>& items) {
    if (items.empty()) throw std::invalid_argument("make_batch: no items");
    const std::size_t len = items.front().noisy.size();
    const std::size_t frames = dsp::frame_count(len, {}), bins = dsp::FrameParams{}.bins() - 1;
    const std::size_t plane = frames * bins, b = items.size();
    SpectralBatch<T> out{Tensor<T>(Shape{b, 2, frames, bins}), Tensor<T>(Shape{b, frames, bins}),
                         Tensor<T>(Shape{b, frames, bins}), Tensor<T>(Shape{b, frames, bins}),
                         Tensor<T>(Shape{b, frames, bins})};
    for (std::size_t i = 0; i < b; ++i) {
        if (items[i].noisy.size() != len || items[i].clean.size() != len) {
            throw std::invalid_argument("make_batch: all clips in a batch must have the same length");
        }
        const auto noisy = dsp::spec_to_tensor(dsp::stft(items[i].noisy));
        const auto clean = dsp::spec_to_tensor(dsp::stft(items[i].clean));
        std::copy(noisy.data().begin(), noisy.data().end(), out.input.data().begin() + i * 2 * plane);
        for (std::size_t k = 0; k < plane; ++k) {
            out.noisy_real[i * plane + k] = noisy[k];
            out.noisy_imag[i * plane + k] = noisy[plane + k];
            out.clean_real[i * plane + k] = clean[k];
            out.clean_imag[i * plane + k] = clean[plane + k];
        }
    }
    return out;
}

// forward -> complex mask -> compressed loss against the clean spectrum.
template <typename T>
Var<T> batch_loss(CarnModel<T>& model, const Context<T>& ctx, const SpectralBatch<T>& batch) {
    const auto mask = model.forward(ctx, Var<T>(batch.input));
    const auto [est_r, est_i] = apply_mask(mask.real, mask.imag, batch.noisy_real, batch.noisy_imag);
    return compressed_loss(est_r, est_i, batch.clean_real, batch.clean_imag);
}

template <typename T>
double eval_loss(CarnModel<T>& model, const std::vector<Mixture<T>>& set, std::size_t chunk) {
    double total = 0.0;
    for (std::size_t i = 0; i < set.size(); i += chunk) {
        const std::size_t n = std::min(chunk, set.size() - i);
        const std::vector<Mixture<T>> part(set.begin() + static_cast<std::ptrdiff_t>(i),
                                           set.begin() + static_cast<std::ptrdiff_t>(i + n));
        Tape<T> tape(false);
        total += static_cast<double>(batch_loss(model, Context<T>{tape, Mode::eval}, make_batch(part)).value()[0]) *
                 static_cast<double>(n);
    }
    return total / static_cast<double>(set.size());
}

struct LossRow {
    std::size_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double eval_loss = std::numeric_limits<double>::quiet_NaN();  // NaN between evaluations
};

struct TrainResult {
    std::vector<LossRow> curve;
    bool early_stopped = false;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& curve) {
    os << "step,lr,train_loss,eval_loss\n";
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& r : curve) {
        os << r.step << ',' << r.lr << ',' << r.train_loss << ',';
        if (!std::isnan(r.eval_loss)) os << r.eval_loss;
        os << '\n';
    }
}

inline constexpr std::uint64_t kEvalSeedSalt = 0x6576616C5345ULL;

// Runs from state.step + 1 to cfg.max_steps. `on_step` may return true to
// stop after the current step.
template <typename T>
TrainResult train_loop(CarnModel<T>& model, const TrainConfig& cfg, TrainState<T>& state,
                       const std::function<bool(const LossRow&)>& on_step = {}) {
    cfg.validate();
    TrainResult result;
    const auto eval_set =
        cfg.eval_clips > 0 ? synth_batch<T>(cfg.data, cfg.seed ^ kEvalSeedSalt, cfg.eval_clips) : std::vector<Mixture<T>>{};
    std::optional<SpectralBatch<T>> fixed;
    if (cfg.fixed_batch) fixed = make_batch(synth_batch<T>(cfg.data, cfg.seed, cfg.batch));

    for (std::size_t step = state.step + 1; step <= cfg.max_steps; ++step) {
        const SpectralBatch<T> fresh =
            fixed ? SpectralBatch<T>{} : make_batch(synth_batch<T>(cfg.data, derive_seed(cfg.seed, step), cfg.batch));
        const SpectralBatch<T>& batch = fixed ? *fixed : fresh;
        for (auto& p : model.parameters()) p->zero_grad();
        LossRow row;
        row.step = step;
        row.lr = warmup_lr(step, cfg);
        {
            Tape<T> tape;
            const auto loss = batch_loss(model, Context<T>{tape, Mode::train}, batch);
            row.train_loss = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(row.train_loss)) {
                throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step));
            }
            tape.backward(loss);
        }
        adam_step(model.parameters(), state, row.lr, cfg);

        bool stop = false;
        if (!eval_set.empty() && (step % cfg.eval_interval == 0 || step == cfg.max_steps)) {
            row.eval_loss = eval_loss(model, eval_set, cfg.batch);
            state.loss_history.push_back(row.eval_loss);
            if (cfg.early_stopping && early_stop(state.loss_history, cfg.early_stop_threshold)) {
                result.early_stopped = true;
                stop = true;
            }
        }
        result.curve.push_back(row);
        if (on_step && on_step(row)) stop = true;
        if (stop) break;
    }
    return result;
}

}  // namespace carn
