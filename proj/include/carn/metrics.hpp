#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/dsp.hpp"

namespace carn {

inline constexpr double kSdrCap = 100.0;

struct MetricReport {
    double si_sdr_db = 0.0;
    double seg_snr_db = 0.0;
    double lsd = 0.0;
};

namespace detail {

template <typename T>
void require_pair(const dsp::Waveform<T>& est, const dsp::Waveform<T>& ref, const char* what) {
    if (est.size() != ref.size()) {
        throw std::invalid_argument(std::string(what) + ": estimate has " + std::to_string(est.size()) +
                                    " samples, reference has " + std::to_string(ref.size()));
    }
    if (ref.size() == 0) throw std::invalid_argument(std::string(what) + ": empty signals");
}

inline double capped_db(double num, double den, double lo, double hi) {
    if (num <= 0.0) return lo;
    if (den <= 0.0) return hi;
    return std::clamp(10.0 * std::log10(num / den), lo, hi);
}

}  // namespace detail

// Scale-invariant SDR: project the estimate onto the reference, compare the
// projection with the residual. Capped at +-100 dB.
template <typename T>
double si_sdr(const dsp::Waveform<T>& est, const dsp::Waveform<T>& ref) {
    detail::require_pair(est, ref, "si_sdr");
    double er = 0.0, rr = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        er += double(est.samples[i]) * double(ref.samples[i]);
        rr += double(ref.samples[i]) * double(ref.samples[i]);
    }
    if (!(rr > 0.0)) throw std::invalid_argument("si_sdr: reference is silent");
    const double alpha = er / rr;
    double target = 0.0, resid = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double t = alpha * double(ref.samples[i]);
        const double e = double(est.samples[i]) - t;
        target += t * t;
        resid += e * e;
    }
    return detail::capped_db(target, resid, -kSdrCap, kSdrCap);
}

// Mean of per-frame SNR over non-overlapping frames, each clamped to
// [lo, hi]. Frames whose reference is silent are skipped.
template <typename T>
double seg_snr(const dsp::Waveform<T>& est, const dsp::Waveform<T>& ref, std::size_t frame = 256, double lo = -10.0,
               double hi = 35.0) {
    detail::require_pair(est, ref, "seg_snr");
    if (frame == 0) throw std::invalid_argument("seg_snr: frame length must be positive");
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t start = 0; start < ref.size(); start += frame) {
        const std::size_t end = std::min(ref.size(), start + frame);
        double sig = 0.0, noise = 0.0;
        for (std::size_t i = start; i < end; ++i) {
            const double r = ref.samples[i], d = double(est.samples[i]) - r;
            sig += r * r;
            noise += d * d;
        }
        if (sig <= 0.0) continue;
        total += detail::capped_db(sig, noise, lo, hi);
        ++used;
    }
    if (used == 0) throw std::invalid_argument("seg_snr: reference is silent in every frame");
    return total / static_cast<double>(used);
}

// Log-spectral distance over the analysis STFT.
template <typename T>
double lsd(const dsp::Waveform<T>& est, const dsp::Waveform<T>& ref, double eps = 1e-8) {
    detail::require_pair(est, ref, "lsd");
    const dsp::Waveform<double> e{std::vector<double>(est.samples.begin(), est.samples.end()), est.sample_rate};
    const dsp::Waveform<double> r{std::vector<double>(ref.samples.begin(), ref.samples.end()), ref.sample_rate};
    const auto se = dsp::stft(e), sr = dsp::stft(r);
    const std::size_t frames = se.frames(), bins = se.bins();
    double total = 0.0;
    for (std::size_t m = 0; m < frames; ++m) {
        double acc = 0.0;
        for (std::size_t k = 0; k < bins; ++k) {
            const std::size_t i = m * bins + k;
            const double d = 20.0 * std::log10((std::hypot(se.real[i], se.imag[i]) + eps) /
                                               (std::hypot(sr.real[i], sr.imag[i]) + eps));
            acc += d * d;
        }
        total += std::sqrt(acc / static_cast<double>(bins));
    }
    return total / static_cast<double>(frames);
}

template <typename T>
MetricReport evaluate(const dsp::Waveform<T>& est, const dsp::Waveform<T>& ref) {
    return {si_sdr(est, ref), seg_snr(est, ref), lsd(est, ref)};
}

inline void write_metric_csv(std::ostream& os, const std::vector<MetricReport>& rows) {
    os << "si_sdr_db,seg_snr_db,lsd\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& r : rows) os << r.si_sdr_db << ',' << r.seg_snr_db << ',' << r.lsd << '\n';
}

}  // namespace carn
