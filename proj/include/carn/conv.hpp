#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "carn/gemm.hpp"
#include "carn/ops.hpp"

namespace carn {

struct Stride2d {
    std::size_t t = 1;
    std::size_t f = 1;
};

// Zero padding (conv2d) or output cropping (conv_transpose2d), per side.
struct Padding2d {
    std::size_t t_before = 0;
    std::size_t t_after = 0;
    std::size_t f_before = 0;
    std::size_t f_after = 0;

    static Padding2d symmetric(std::size_t t, std::size_t f) { return {t, t, f, f}; }
};

struct OutputPadding2d {
    std::size_t t = 0;
    std::size_t f = 0;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t s, std::size_t pb, std::size_t pa) {
    const std::size_t padded = in + pb + pa;
    if (k == 0 || s == 0) throw ShapeError("conv: kernel and stride must be positive");
    if (padded < k) {
        throw ShapeError("conv: padded extent " + std::to_string(padded) + " is smaller than kernel " +
                         std::to_string(k));
    }
    return (padded - k) / s + 1;
}

inline std::size_t conv_transpose_output_size(std::size_t in, std::size_t k, std::size_t s, std::size_t pb,
                                              std::size_t pa, std::size_t op) {
    if (k == 0 || s == 0) throw ShapeError("conv_transpose: kernel and stride must be positive");
    if (op >= s) {
        throw ShapeError("conv_transpose: output_padding " + std::to_string(op) + " must be smaller than stride " +
                         std::to_string(s));
    }
    const std::size_t full = (in - 1) * s + k + op;
    if (full <= pb + pa) throw ShapeError("conv_transpose: cropping removes the whole output");
    return full - pb - pa;
}

namespace detail {

// One spatial axis of a correlation: output o reads input o*stride - pad + k.
struct AxisGeom {
    std::size_t in;
    std::size_t out;
    std::size_t k;
    std::size_t stride;
    std::size_t pad;
};

// Output positions [lo, hi) whose tap k lands inside the input.
inline std::pair<std::size_t, std::size_t> valid_range(const AxisGeom& g, std::size_t k) {
    const std::size_t lo = g.pad > k ? (g.pad - k + g.stride - 1) / g.stride : 0;
    if (g.in + g.pad <= k) return {0, 0};
    const std::size_t hi = std::min(g.out, (g.in + g.pad - k + g.stride - 1) / g.stride);
    return {std::min(lo, hi), hi};
}

// x: [C, gt.in, gf.in] -> cols: [C*kt*kf, gt.out*gf.out]
template <typename T>
void im2col(const T* x, std::size_t channels, const AxisGeom& gt, const AxisGeom& gf, T* cols) {
    const std::size_t plane = gt.out * gf.out;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t kt = 0; kt < gt.k; ++kt) {
            const auto [t_lo, t_hi] = valid_range(gt, kt);
            for (std::size_t kf = 0; kf < gf.k; ++kf) {
                const auto [f_lo, f_hi] = valid_range(gf, kf);
                T* row = cols + ((c * gt.k + kt) * gf.k + kf) * plane;
                std::fill(row, row + t_lo * gf.out, T{0});
                std::fill(row + t_hi * gf.out, row + plane, T{0});
                for (std::size_t ot = t_lo; ot < t_hi; ++ot) {
                    T* dst = row + ot * gf.out;
                    std::fill(dst, dst + f_lo, T{0});
                    std::fill(dst + f_hi, dst + gf.out, T{0});
                    if (f_lo == f_hi) continue;
                    const T* src = x + (c * gt.in + ot * gt.stride + kt - gt.pad) * gf.in + f_lo * gf.stride + kf - gf.pad;
                    if (gf.stride == 1) {
                        std::copy(src, src + (f_hi - f_lo), dst + f_lo);
                    } else {
                        for (std::size_t of = f_lo; of < f_hi; ++of) dst[of] = src[(of - f_lo) * gf.stride];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates cols back into x.
template <typename T>
void col2im(const T* cols, std::size_t channels, const AxisGeom& gt, const AxisGeom& gf, T* x) {
    const std::size_t plane = gt.out * gf.out;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t kt = 0; kt < gt.k; ++kt) {
            const auto [t_lo, t_hi] = valid_range(gt, kt);
            for (std::size_t kf = 0; kf < gf.k; ++kf) {
                const auto [f_lo, f_hi] = valid_range(gf, kf);
                const T* row = cols + ((c * gt.k + kt) * gf.k + kf) * plane;
                if (f_lo == f_hi) continue;
                for (std::size_t ot = t_lo; ot < t_hi; ++ot) {
                    const T* src = row + ot * gf.out;
                    T* dst = x + (c * gt.in + ot * gt.stride + kt - gt.pad) * gf.in + f_lo * gf.stride + kf - gf.pad;
                    for (std::size_t of = f_lo; of < f_hi; ++of) dst[(of - f_lo) * gf.stride] += src[of];
                }
            }
        }
    }
}

inline void require_rank4(const Shape& s, const char* op, const char* what) {
    if (s.size() != 4) throw ShapeError(std::string(op) + ": " + what + " must be rank 4, got " + to_string(s));
}

template <typename T>
void add_channel_bias(T* y, const T* bias, std::size_t channels, std::size_t plane) {
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] += bias[c];
    }
}

template <typename T>
void accumulate_channel_bias_grad(const T* g, T* gb, std::size_t channels, std::size_t plane) {
    for (std::size_t c = 0; c < channels; ++c) {
        T acc{0};
        for (std::size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
        gb[c] += acc;
    }
}

}  // namespace detail

// Cross-correlation. input [B,C_in,T,F], weight [C_out,C_in,kT,kF], bias [C_out].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Stride2d stride, Padding2d pad) {
    detail::require_rank4(input.shape(), "conv2d", "input");
    detail::require_rank4(weight.shape(), "conv2d", "weight");
    if (input.dim(1) != weight.dim(1)) {
        throw ShapeError("conv2d: input " + to_string(input.shape()) + " has " + std::to_string(input.dim(1)) +
                         " channels but weight " + to_string(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)));
    }
    if (bias.numel() != weight.dim(0)) {
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
    }
    const std::size_t batch = input.dim(0), c_in = input.dim(1), c_out = weight.dim(0);
    const detail::AxisGeom gt{input.dim(2),
                              conv_output_size(input.dim(2), weight.dim(2), stride.t, pad.t_before, pad.t_after),
                              weight.dim(2), stride.t, pad.t_before};
    const detail::AxisGeom gf{input.dim(3),
                              conv_output_size(input.dim(3), weight.dim(3), stride.f, pad.f_before, pad.f_after),
                              weight.dim(3), stride.f, pad.f_before};
    const std::size_t ck = c_in * gt.k * gf.k, in_plane = gt.in * gf.in, out_plane = gt.out * gf.out;

    Tensor<T> out(Shape{batch, c_out, gt.out, gf.out});
    std::vector<T> cols(ck * out_plane);
    for (std::size_t b = 0; b < batch; ++b) {
        detail::im2col(input.value().vec().data() + b * c_in * in_plane, c_in, gt, gf, cols.data());
        T* y = out.vec().data() + b * c_out * out_plane;
        detail::gemm<T>(false, false, c_out, out_plane, ck, weight.value().vec().data(), cols.data(), y, false);
        detail::add_channel_bias(y, bias.value().vec().data(), c_out, out_plane);
    }
    return detail::emit<T>(
        std::move(out), {&input, &weight, &bias},
        [input, weight, bias, batch, c_in, c_out, gt, gf, ck, in_plane, out_plane](Tape<T>& tape,
                                                                                    std::span<const T> g) {
            const bool need_x = tape.requires_grad(input);
            const bool need_w = tape.requires_grad(weight);
            std::vector<T> cols(ck * out_plane);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* gy = g.data() + b * c_out * out_plane;
                if (need_w) {
                    detail::im2col(input.value().vec().data() + b * c_in * in_plane, c_in, gt, gf, cols.data());
                    detail::gemm<T>(false, true, c_out, ck, out_plane, gy, cols.data(),
                                    tape.grad_buffer(weight).data(), true);
                }
                if (need_x) {
                    detail::gemm<T>(true, false, ck, out_plane, c_out, weight.value().vec().data(), gy, cols.data(),
                                    false);
                    detail::col2im(cols.data(), c_in, gt, gf, tape.grad_buffer(input).data() + b * c_in * in_plane);
                }
                if (tape.requires_grad(bias)) {
                    detail::accumulate_channel_bias_grad(gy, tape.grad_buffer(bias).data(), c_out, out_plane);
                }
            }
        });
}

// Adjoint of conv2d w.r.t. its input. input [B,C_in,T,F], weight [C_in,C_out,kT,kF],
// bias [C_out]. `crop` removes rows/columns from each side of the full output;
// output_padding extends the far side and must be smaller than the stride.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Stride2d stride,
                        Padding2d crop, OutputPadding2d output_padding = {}) {
    detail::require_rank4(input.shape(), "conv_transpose2d", "input");
    detail::require_rank4(weight.shape(), "conv_transpose2d", "weight");
    if (input.dim(1) != weight.dim(0)) {
        throw ShapeError("conv_transpose2d: input " + to_string(input.shape()) + " has " +
                         std::to_string(input.dim(1)) + " channels but weight " + to_string(weight.shape()) +
                         " expects " + std::to_string(weight.dim(0)));
    }
    if (bias.numel() != weight.dim(1)) {
        throw ShapeError("conv_transpose2d: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
    }
    const std::size_t batch = input.dim(0), c_in = input.dim(1), c_out = weight.dim(1);
    const std::size_t t_out = conv_transpose_output_size(input.dim(2), weight.dim(2), stride.t, crop.t_before,
                                                         crop.t_after, output_padding.t);
    const std::size_t f_out = conv_transpose_output_size(input.dim(3), weight.dim(3), stride.f, crop.f_before,
                                                         crop.f_after, output_padding.f);
    // Geometry of the forward correlation this op is the adjoint of.
    const detail::AxisGeom gt{t_out, input.dim(2), weight.dim(2), stride.t, crop.t_before};
    const detail::AxisGeom gf{f_out, input.dim(3), weight.dim(3), stride.f, crop.f_before};
    const std::size_t ck = c_out * gt.k * gf.k, in_plane = gt.out * gf.out, out_plane = t_out * f_out;

    Tensor<T> out(Shape{batch, c_out, t_out, f_out});
    std::vector<T> cols(ck * in_plane);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.value().vec().data() + b * c_in * in_plane;
        detail::gemm<T>(true, false, ck, in_plane, c_in, weight.value().vec().data(), x, cols.data(), false);
        T* y = out.vec().data() + b * c_out * out_plane;
        detail::col2im(cols.data(), c_out, gt, gf, y);
        detail::add_channel_bias(y, bias.value().vec().data(), c_out, out_plane);
    }
    return detail::emit<T>(
        std::move(out), {&input, &weight, &bias},
        [input, weight, bias, batch, c_in, c_out, gt, gf, ck, in_plane, out_plane](Tape<T>& tape,
                                                                                    std::span<const T> g) {
            const bool need_x = tape.requires_grad(input);
            const bool need_w = tape.requires_grad(weight);
            std::vector<T> cols(ck * in_plane);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* gy = g.data() + b * c_out * out_plane;
                if (need_x || need_w) detail::im2col(gy, c_out, gt, gf, cols.data());
                if (need_x) {
                    detail::gemm<T>(false, false, c_in, in_plane, ck, weight.value().vec().data(), cols.data(),
                                    tape.grad_buffer(input).data() + b * c_in * in_plane, true);
                }
                if (need_w) {
                    detail::gemm<T>(false, true, c_in, ck, in_plane, input.value().vec().data() + b * c_in * in_plane,
                                    cols.data(), tape.grad_buffer(weight).data(), true);
                }
                if (tape.requires_grad(bias)) {
                    detail::accumulate_channel_bias_grad(gy, tape.grad_buffer(bias).data(), c_out, out_plane);
                }
            }
        });
}

}  // namespace carn
