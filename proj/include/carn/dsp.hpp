#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/tensor.hpp"

namespace carn::dsp {

inline constexpr int kSampleRate = 16000;

template <typename T>
struct Waveform {
    std::vector<T> samples;
    int sample_rate = kSampleRate;

    std::size_t size() const { return samples.size(); }
};

// 32 ms Hann window, 16 ms hop, 512-point FFT at 16 kHz.
struct FrameParams {
    std::size_t window_length = 512;
    std::size_t hop = 256;
    std::size_t fft_size = 512;

    std::size_t bins() const { return fft_size / 2 + 1; }
    // Zeros added in front of the signal (and at least as many behind it).
    std::size_t pad() const { return window_length - hop; }

    void validate() const {
        if (window_length != fft_size) throw std::invalid_argument("frame params: window length must equal fft size");
        if (hop * 2 != window_length) throw std::invalid_argument("frame params: hop must be half the window");
        if (fft_size == 0 || (fft_size & (fft_size - 1)) != 0) {
            throw std::invalid_argument("frame params: fft size must be a power of two");
        }
    }
};

// Frame count for a signal of `length` samples: ceil(length / hop) + 1.
inline std::size_t frame_count(std::size_t length, const FrameParams& p) { return (length + p.hop - 1) / p.hop + 1; }

template <typename T>
struct ComplexSpectrogram {
    Tensor<T> real;  // [frames, bins]
    Tensor<T> imag;  // [frames, bins]
    FrameParams params;

    std::size_t frames() const { return real.dim(0); }
    std::size_t bins() const { return real.dim(1); }
};

// Periodic Hann: w[k] = 0.5 (1 - cos(2 pi k / n)).
template <typename T = double>
std::vector<T> hann_window(std::size_t n) {
    std::vector<T> w(n);
    for (std::size_t k = 0; k < n; ++k) {
        w[k] = static_cast<T>(0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) /
                                                    static_cast<double>(n))));
    }
    return w;
}

// In-place iterative radix-2 transform. The inverse includes the 1/N factor.
template <typename T>
void fft_inplace(std::vector<std::complex<T>>& x, bool inverse = false) {
    const std::size_t n = x.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw std::invalid_argument("fft: length " + std::to_string(n) + " is not a power of two");
    }
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(x[i], x[j]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t k = 0; k < len / 2; ++k) {
            const std::complex<T> tw(static_cast<T>(std::cos(ang * static_cast<double>(k))),
                                     static_cast<T>(std::sin(ang * static_cast<double>(k))));
            for (std::size_t i = 0; i < n; i += len) {
                const std::complex<T> u = x[i + k];
                const std::complex<T> v = x[i + k + len / 2] * tw;
                x[i + k] = u + v;
                x[i + k + len / 2] = u - v;
            }
        }
    }
    if (inverse) {
        const T inv = T{1} / static_cast<T>(n);
        for (auto& v : x) v *= inv;
    }
}

template <typename T>
std::vector<std::complex<T>> fft(std::vector<std::complex<T>> x) {
    fft_inplace(x, false);
    return x;
}

template <typename T>
std::vector<std::complex<T>> ifft(std::vector<std::complex<T>> x) {
    fft_inplace(x, true);
    return x;
}

inline void require_pipeline_rate(int rate) {
    if (rate != kSampleRate) {
        throw std::invalid_argument("sample rate " + std::to_string(rate) + " Hz is not supported; expected " +
                                    std::to_string(kSampleRate) + " Hz");
    }
}

// One-sided STFT. The signal is preceded by pad() zeros and followed by
// enough zeros to complete the last frame, so every sample lies under two
// frames.
template <typename T>
ComplexSpectrogram<T> stft(const Waveform<T>& wave, const FrameParams& params = {}) {
    params.validate();
    require_pipeline_rate(wave.sample_rate);
    if (wave.samples.empty()) throw std::invalid_argument("stft: empty waveform");
    const std::size_t n = params.fft_size, hop = params.hop, bins = params.bins();
    const std::size_t frames = frame_count(wave.size(), params);
    std::vector<T> padded((frames - 1) * hop + n, T{0});
    std::copy(wave.samples.begin(), wave.samples.end(), padded.begin() + static_cast<std::ptrdiff_t>(params.pad()));
    const auto window = hann_window<T>(n);

    ComplexSpectrogram<T> spec{Tensor<T>(Shape{frames, bins}), Tensor<T>(Shape{frames, bins}), params};
    std::vector<std::complex<T>> buf(n);
    for (std::size_t m = 0; m < frames; ++m) {
        for (std::size_t k = 0; k < n; ++k) buf[k] = std::complex<T>(padded[m * hop + k] * window[k], T{0});
        fft_inplace(buf);
        for (std::size_t k = 0; k < bins; ++k) {
            spec.real[m * bins + k] = buf[k].real();
            spec.imag[m * bins + k] = buf[k].imag();
        }
    }
    return spec;
}

// Largest waveform length istft can reconstruct from `frames` frames.
inline std::size_t max_istft_length(std::size_t frames, const FrameParams& p) { return frames * p.hop; }

// Weighted overlap-add inverse, normalised by the summed squared window
// (floored at 1e-10), trimmed to `out_length` samples.
template <typename T>
Waveform<T> istft(const ComplexSpectrogram<T>& spec, std::size_t out_length) {
    const FrameParams& params = spec.params;
    params.validate();
    const std::size_t n = params.fft_size, hop = params.hop, bins = params.bins();
    if (spec.real.shape() != spec.imag.shape() || spec.real.rank() != 2 || spec.bins() != bins) {
        throw ShapeError("istft: spectrogram planes must both be [frames," + std::to_string(bins) + "]");
    }
    const std::size_t frames = spec.frames();
    if (out_length > max_istft_length(frames, params)) {
        throw std::invalid_argument("istft: " + std::to_string(frames) + " frames support at most " +
                                    std::to_string(max_istft_length(frames, params)) + " samples, requested " +
                                    std::to_string(out_length));
    }
    const auto window = hann_window<T>(n);
    std::vector<T> acc((frames - 1) * hop + n, T{0}), wsum(acc.size(), T{0});
    std::vector<std::complex<T>> buf(n);
    for (std::size_t m = 0; m < frames; ++m) {
        for (std::size_t k = 0; k < bins; ++k) buf[k] = {spec.real[m * bins + k], spec.imag[m * bins + k]};
        for (std::size_t k = bins; k < n; ++k) buf[k] = std::conj(buf[n - k]);
        fft_inplace(buf, true);
        for (std::size_t k = 0; k < n; ++k) {
            acc[m * hop + k] += buf[k].real() * window[k];
            wsum[m * hop + k] += window[k] * window[k];
        }
    }
    Waveform<T> out;
    out.samples.resize(out_length);
    const std::size_t pad = params.pad();
    for (std::size_t i = 0; i < out_length; ++i) {
        out.samples[i] = acc[pad + i] / std::max(wsum[pad + i], static_cast<T>(1e-10));
    }
    return out;
}

// Network input layout: [2, frames, bins - 1]; channel 0 real, channel 1
// imaginary. The Nyquist bin is dropped so the frequency axis is 256 wide.
template <typename T>
Tensor<T> spec_to_tensor(const ComplexSpectrogram<T>& spec) {
    const std::size_t frames = spec.frames(), bins = spec.bins(), width = bins - 1;
    Tensor<T> t(Shape{2, frames, width});
    for (std::size_t m = 0; m < frames; ++m) {
        for (std::size_t k = 0; k < width; ++k) {
            t[m * width + k] = spec.real[m * bins + k];
            t[(frames + m) * width + k] = spec.imag[m * bins + k];
        }
    }
    return t;
}

// Inverse of spec_to_tensor; the Nyquist bin comes back as zero.
template <typename T>
ComplexSpectrogram<T> tensor_to_spec(const Tensor<T>& t, const FrameParams& params = {}) {
    if (t.rank() != 3 || t.dim(0) != 2 || t.dim(2) + 1 != params.bins()) {
        throw ShapeError("tensor_to_spec: expected [2,frames," + std::to_string(params.bins() - 1) + "], got " +
                         to_string(t.shape()));
    }
    const std::size_t frames = t.dim(1), width = t.dim(2), bins = params.bins();
    ComplexSpectrogram<T> spec{Tensor<T>(Shape{frames, bins}), Tensor<T>(Shape{frames, bins}), params};
    for (std::size_t m = 0; m < frames; ++m) {
        for (std::size_t k = 0; k < width; ++k) {
            spec.real[m * bins + k] = t[m * width + k];
            spec.imag[m * bins + k] = t[(frames + m) * width + k];
        }
    }
    return spec;
}

}  // namespace carn::dsp
