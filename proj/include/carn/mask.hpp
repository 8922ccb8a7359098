#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "carn/dsp.hpp"
#include "carn/ops.hpp"

namespace carn {

// Two-plane complex ratio mask.
template <typename T>
struct Mask {
    Tensor<T> real;
    Tensor<T> imag;
};

inline constexpr double kCrmEps = 1e-8;

namespace detail {

template <typename T>
void require_planes(const Tensor<T>& ar, const Tensor<T>& ai, const Tensor<T>& br, const Tensor<T>& bi,
                    const char* op) {
    if (ar.shape() != ai.shape() || br.shape() != bi.shape() || ar.shape() != br.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(ar.shape()) + " vs " +
                         to_string(br.shape()));
    }
}

}  // namespace detail

// Oracle CRM = S conj(Y) / max(|Y|^2, eps). Exact S / Y wherever |Y|^2 > eps.
template <typename T>
Mask<T> oracle_crm(const dsp::ComplexSpectrogram<T>& noisy, const dsp::ComplexSpectrogram<T>& clean,
                   T eps = static_cast<T>(kCrmEps)) {
    detail::require_planes(noisy.real, noisy.imag, clean.real, clean.imag, "oracle_crm");
    if (!(eps > T{0})) throw std::invalid_argument("oracle_crm: eps must be positive");
    Mask<T> m{Tensor<T>(noisy.real.shape()), Tensor<T>(noisy.real.shape())};
    for (std::size_t i = 0; i < m.real.numel(); ++i) {
        const T yr = noisy.real[i], yi = noisy.imag[i], sr = clean.real[i], si = clean.imag[i];
        const T den = std::max(yr * yr + yi * yi, eps);
        m.real[i] = (yr * sr + yi * si) / den;
        m.imag[i] = (yr * si - yi * sr) / den;
    }
    return m;
}

// S_hat = M * Y (complex product).
template <typename T>
dsp::ComplexSpectrogram<T> apply_mask(const Mask<T>& mask, const dsp::ComplexSpectrogram<T>& noisy) {
    detail::require_planes(mask.real, mask.imag, noisy.real, noisy.imag, "apply_mask");
    dsp::ComplexSpectrogram<T> out{Tensor<T>(noisy.real.shape()), Tensor<T>(noisy.real.shape()), noisy.params};
    for (std::size_t i = 0; i < out.real.numel(); ++i) {
        const T mr = mask.real[i], mi = mask.imag[i], yr = noisy.real[i], yi = noisy.imag[i];
        out.real[i] = mr * yr - mi * yi;
        out.imag[i] = mr * yi + mi * yr;
    }
    return out;
}

// Differentiable form used during training; the noisy planes are constants.
template <typename T>
std::pair<Var<T>, Var<T>> apply_mask(const Var<T>& mask_real, const Var<T>& mask_imag, const Tensor<T>& noisy_real,
                                     const Tensor<T>& noisy_imag) {
    detail::require_planes(mask_real.value(), mask_imag.value(), noisy_real, noisy_imag, "apply_mask");
    const Var<T> yr(noisy_real), yi(noisy_imag);
    return {sub(mul(mask_real, yr), mul(mask_imag, yi)), add(mul(mask_real, yi), mul(mask_imag, yr))};
}

// Diagnostic helper: scales entries whose magnitude exceeds `limit` back onto it.
template <typename T>
Mask<T> clamp_magnitude(Mask<T> m, T limit = T(100)) {
    for (std::size_t i = 0; i < m.real.numel(); ++i) {
        const T mag = std::hypot(m.real[i], m.imag[i]);
        if (mag > limit) {
            m.real[i] *= limit / mag;
            m.imag[i] *= limit / mag;
        }
    }
    return m;
}

}  // namespace carn
