#pragma once

#include <cmath>

#include "carn/dsp.hpp"
#include "carn/ops.hpp"

namespace carn {

inline constexpr double kMagFloor = 1e-8;
inline constexpr double kCompress = 0.3;
inline constexpr double kComplexWeight = 0.2;

namespace detail {

// Per-bin loss and its gradient w.r.t. the estimate (er, ei).
//   L = (|E|^c - |S|^c)^2 + w |E|E|^(c-1) - S|S|^(c-1)|^2
// Values use exact magnitudes (a zero bin compresses to zero). Derivative
// terms use max(|E|, floor) so they stay finite at the origin.
struct BinLoss {
    double value;
    double d_re;
    double d_im;
};

inline BinLoss compressed_bin(double er, double ei, double sr, double si, double floor) {
    const double a = std::hypot(er, ei), b = std::hypot(sr, si);
    const double ca = std::pow(a, kCompress), cb = std::pow(b, kCompress);
    const double ka = a > 0.0 ? ca / a : 0.0, kb = b > 0.0 ? cb / b : 0.0;
    const double pr = er * ka, pi = ei * ka, qr = sr * kb, qi = si * kb;
    const double dm = ca - cb, dr = pr - qr, di = pi - qi;
    BinLoss out{dm * dm + kComplexWeight * (dr * dr + di * di), 0.0, 0.0};

    const double af = std::max(a, floor);
    const double g1 = 2.0 * dm * kCompress * std::pow(af, kCompress - 2.0);
    const double base = std::pow(af, kCompress - 1.0);
    const double cross = (kCompress - 1.0) * std::pow(af, kCompress - 3.0);
    const double w2 = 2.0 * kComplexWeight;
    out.d_re = g1 * er + w2 * (dr * (base + cross * er * er) + di * (cross * er * ei));
    out.d_im = g1 * ei + w2 * (di * (base + cross * ei * ei) + dr * (cross * er * ei));
    return out;
}

}  // namespace detail

// Mean over bins of the power-compressed spectral loss. The target planes are
// constants; the estimate planes carry gradient.
template <typename T>
Var<T> compressed_loss(const Var<T>& est_real, const Var<T>& est_imag, const Tensor<T>& ref_real,
                       const Tensor<T>& ref_imag, double floor = kMagFloor) {
    if (est_real.shape() != est_imag.shape() || ref_real.shape() != ref_imag.shape() ||
        est_real.shape() != ref_real.shape()) {
        throw ShapeError("compressed_loss: estimate " + to_string(est_real.shape()) + " and target " +
                         to_string(ref_real.shape()) + " differ");
    }
    const std::size_t n = est_real.numel();
    if (n == 0) throw ShapeError("compressed_loss: empty input");
    auto gr = std::make_shared<std::vector<T>>(n), gi = std::make_shared<std::vector<T>>(n);
    const auto& er = est_real.value();
    const auto& ei = est_imag.value();
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto b = detail::compressed_bin(er[k], ei[k], ref_real[k], ref_imag[k], floor);
        total += b.value;
        (*gr)[k] = static_cast<T>(b.d_re / static_cast<double>(n));
        (*gi)[k] = static_cast<T>(b.d_im / static_cast<double>(n));
    }
    Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<double>(n)));
    return detail::emit<T>(std::move(out), {&est_real, &est_imag},
                           [est_real, est_imag, gr, gi](Tape<T>& tape, std::span<const T> g) {
                               if (tape.requires_grad(est_real)) {
                                   auto& dst = tape.grad_buffer(est_real);
                                   for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[0] * (*gr)[k];
                               }
                               if (tape.requires_grad(est_imag)) {
                                   auto& dst = tape.grad_buffer(est_imag);
                                   for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[0] * (*gi)[k];
                               }
                           });
}

// Plain-value form over whole spectrograms.
template <typename T>
double compressed_loss(const dsp::ComplexSpectrogram<T>& estimate, const dsp::ComplexSpectrogram<T>& target) {
    return static_cast<double>(
        compressed_loss(Var<T>(estimate.real), Var<T>(estimate.imag), target.real, target.imag).value()[0]);
}

}  // namespace carn
