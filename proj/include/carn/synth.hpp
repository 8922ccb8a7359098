#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/dsp.hpp"

namespace carn {

enum class NoiseKind { white, pink, babble };

template <typename T>
struct Mixture {
    dsp::Waveform<T> noisy;
    dsp::Waveform<T> clean;  // carries the same normalisation gain as noisy
    double snr_db = 0.0;
};

struct SynthConfig {
    std::size_t clip_samples = dsp::kSampleRate;
    double snr_min_db = 0.0;
    double snr_max_db = 40.0;
    std::vector<NoiseKind> noises{NoiseKind::white, NoiseKind::pink, NoiseKind::babble};

    // Narrow toy task: pseudo-speech in white noise at 0..10 dB.
    static SynthConfig narrow() {
        SynthConfig c;
        c.snr_max_db = 10.0;
        c.noises = {NoiseKind::white};
        return c;
    }

    void validate() const {
        if (clip_samples == 0) throw std::invalid_argument("synth: clip length must be positive");
        if (!(snr_min_db <= snr_max_db) || !std::isfinite(snr_min_db) || !std::isfinite(snr_max_db)) {
            throw std::invalid_argument("synth: snr range is empty");
        }
        if (noises.empty()) throw std::invalid_argument("synth: no noise kinds selected");
    }

    bool operator==(const SynthConfig&) const = default;
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline double power(const std::vector<double>& x) {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return acc / static_cast<double>(x.size());
}

inline void scale_to_rms(std::vector<double>& x, double rms) {
    const double p = power(x);
    if (p <= 0.0) return;
    const double g = rms / std::sqrt(p);
    for (double& v : x) v *= g;
}

}  // namespace detail

// Seed for item `index` of a stream, so items can be generated independently.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return detail::splitmix(detail::splitmix(seed) ^ (index * 0xD1B54A32D192ED03ULL));
}

// Harmonic voice with a gliding pitch and syllable-rate amplitude envelope,
// plus a couple of steady tones.
inline std::vector<double> pseudo_speech(std::size_t n, Rng& rng) {
    constexpr double fs = dsp::kSampleRate, two_pi = 2.0 * std::numbers::pi;
    const double f0 = rng.uniform(100.0, 240.0), glide = rng.uniform(-0.2, 0.2);
    const double rate = rng.uniform(2.5, 6.0), env_phase = rng.uniform(0.0, two_pi);
    const double formant = rng.uniform(300.0, 1200.0);
    const std::size_t harmonics = 3 + rng.index(6);
    std::vector<double> amp(harmonics), ph(harmonics);
    for (std::size_t k = 0; k < harmonics; ++k) {
        const double fk = f0 * static_cast<double>(k + 1);
        amp[k] = (1.0 + 2.0 * std::exp(-std::pow((fk - formant) / 250.0, 2))) / static_cast<double>(k + 1);
        ph[k] = rng.uniform(0.0, two_pi);
    }
    const double tone_f[2] = {rng.uniform(200.0, 3500.0), rng.uniform(200.0, 3500.0)};
    const double tone_a[2] = {rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
    const double tone_p[2] = {rng.uniform(0.0, two_pi), rng.uniform(0.0, two_pi)};

    std::vector<double> x(n);
    double phase = 0.0;
    const double dur = static_cast<double>(n) / fs;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / fs;
        phase += two_pi * f0 * (1.0 + glide * t / dur) / fs;
        const double env = 0.05 + 0.95 * 0.5 * (1.0 - std::cos(two_pi * rate * t + env_phase));
        double v = 0.0;
        for (std::size_t k = 0; k < harmonics; ++k) {
            if (f0 * static_cast<double>(k + 1) * (1.0 + std::abs(glide)) > 7500.0) break;
            v += amp[k] * std::sin(static_cast<double>(k + 1) * phase + ph[k]);
        }
        x[i] = env * v;
        for (int j = 0; j < 2; ++j) x[i] += tone_a[j] * std::sin(two_pi * tone_f[j] * t + tone_p[j]);
    }
    detail::scale_to_rms(x, rng.uniform(0.05, 0.2));
    return x;
}

inline std::vector<double> white_noise(std::size_t n, Rng& rng) {
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    return x;
}

// Kellet's filter bank approximation of 1/f noise.
inline std::vector<double> pink_noise(std::size_t n, Rng& rng) {
    std::vector<double> x(n);
    double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
    for (double& v : x) {
        const double w = rng.normal();
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        v = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
    }
    return x;
}

// Several overlapping pseudo-speech voices.
inline std::vector<double> babble_noise(std::size_t n, Rng& rng) {
    std::vector<double> x(n, 0.0);
    const std::size_t voices = 4 + rng.index(3);
    for (std::size_t k = 0; k < voices; ++k) {
        const auto v = pseudo_speech(n, rng);
        for (std::size_t i = 0; i < n; ++i) x[i] += v[i];
    }
    return x;
}

inline std::vector<double> make_noise(NoiseKind kind, std::size_t n, Rng& rng) {
    switch (kind) {
        case NoiseKind::white: return white_noise(n, rng);
        case NoiseKind::pink: return pink_noise(n, rng);
        case NoiseKind::babble: return babble_noise(n, rng);
    }
    throw std::invalid_argument("unknown noise kind");
}

// Scales noise to the requested SNR against clean, adds it, and pulls the
// peak down to 0.99 if needed (the clean reference gets the same gain).
template <typename T>
Mixture<T> mix_at_snr(const dsp::Waveform<T>& clean, const dsp::Waveform<T>& noise, double snr_db) {
    dsp::require_pipeline_rate(clean.sample_rate);
    dsp::require_pipeline_rate(noise.sample_rate);
    if (clean.size() != noise.size() || clean.size() == 0) {
        throw std::invalid_argument("mix_at_snr: clean and noise need the same non-zero length (" +
                                    std::to_string(clean.size()) + " vs " + std::to_string(noise.size()) + ")");
    }
    if (!std::isfinite(snr_db)) throw std::invalid_argument("mix_at_snr: snr must be finite");
    const std::vector<double> c(clean.samples.begin(), clean.samples.end());
    const std::vector<double> z(noise.samples.begin(), noise.samples.end());
    const double pc = detail::power(c), pz = detail::power(z);
    if (!(pc > 0.0)) throw std::invalid_argument("mix_at_snr: clean signal is silent");
    if (!(pz > 0.0)) throw std::invalid_argument("mix_at_snr: noise signal is silent");
    const double g = std::sqrt(pc / (pz * std::pow(10.0, snr_db / 10.0)));
    std::vector<double> y(c.size());
    double peak = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = c[i] + g * z[i];
        peak = std::max(peak, std::abs(y[i]));
    }
    const double s = peak > 0.99 ? 0.99 / peak : 1.0;
    Mixture<T> m;
    m.snr_db = snr_db;
    m.noisy.samples.resize(y.size());
    m.clean.samples.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        m.noisy.samples[i] = static_cast<T>(s * y[i]);
        m.clean.samples[i] = static_cast<T>(s * c[i]);
    }
    return m;
}

template <typename T>
Mixture<T> synth_mixture(const SynthConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const auto clean = pseudo_speech(cfg.clip_samples, rng);
    const NoiseKind kind = cfg.noises[rng.index(cfg.noises.size())];
    const auto noise = make_noise(kind, cfg.clip_samples, rng);
    const double snr = rng.uniform(cfg.snr_min_db, cfg.snr_max_db);
    return mix_at_snr(dsp::Waveform<T>{std::vector<T>(clean.begin(), clean.end())},
                      dsp::Waveform<T>{std::vector<T>(noise.begin(), noise.end())}, snr);
}

// Item i depends only on (seed, i).
template <typename T>
std::vector<Mixture<T>> synth_batch(const SynthConfig& cfg, std::uint64_t seed, std::size_t count) {
    cfg.validate();
    std::vector<Mixture<T>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synth_mixture<T>(cfg, derive_seed(seed, i)));
    return out;
}

}  // namespace carn
