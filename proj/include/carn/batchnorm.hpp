#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "carn/ops.hpp"

namespace carn {

enum class Mode { train, eval };

template <typename T>
struct BatchNormStats {
    Tensor<T>* running_mean;
    Tensor<T>* running_var;
    T momentum = T(0.1);
};

// Per-channel normalisation of [B,C,...]. Train mode uses batch statistics over
// every axis but 1 and updates the running averages; eval mode uses them.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T> stats, Mode mode,
                   T eps = T(1e-5)) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("batchnorm2d: input must have a channel axis, got " + to_string(s));
    const std::size_t batch = s[0], channels = s[1], plane = x.numel() / (batch * channels);
    if (gamma.numel() != channels || beta.numel() != channels || stats.running_mean->numel() != channels ||
        stats.running_var->numel() != channels) {
        throw ShapeError("batchnorm2d: affine/statistics size does not match channels of " + to_string(s));
    }
    const std::size_t count = batch * plane;
    const auto& xv = x.value().vec();

    std::vector<T> mu(channels), inv_std(channels);
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < channels; ++c) {
            T acc{0};
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = xv.data() + (b * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            }
            const T m = acc / static_cast<T>(count);
            T var{0};
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = xv.data() + (b * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) var += (p[i] - m) * (p[i] - m);
            }
            const T biased = var / static_cast<T>(count);
            const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : biased;
            mu[c] = m;
            inv_std[c] = T{1} / std::sqrt(biased + eps);
            auto& rm = (*stats.running_mean)[c];
            auto& rv = (*stats.running_var)[c];
            rm = (T{1} - stats.momentum) * rm + stats.momentum * m;
            rv = (T{1} - stats.momentum) * rv + stats.momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mu[c] = (*stats.running_mean)[c];
            inv_std[c] = T{1} / std::sqrt((*stats.running_var)[c] + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    Tensor<T> out(s);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * plane;
            const T gm = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < plane; ++i) {
                const T h = (xv[base + i] - mu[c]) * inv_std[c];
                (*xhat)[base + i] = h;
                out[base + i] = gm * h + bt;
            }
        }
    }

    return detail::emit<T>(
        std::move(out), {&x, &gamma, &beta},
        [x, gamma, beta, xhat, inv_std, mode, batch, channels, plane, count](Tape<T>& tape, std::span<const T> g) {
            const auto& h = *xhat;
            std::vector<T> sum_g(channels, T{0}), sum_gh(channels, T{0});
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g[c] += g[base + i];
                        sum_gh[c] += g[base + i] * h[base + i];
                    }
                }
            }
            if (tape.requires_grad(gamma)) {
                auto& gg = tape.grad_buffer(gamma);
                for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gh[c];
            }
            if (tape.requires_grad(beta)) {
                auto& gb = tape.grad_buffer(beta);
                for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
            }
            if (!tape.requires_grad(x)) return;
            auto& gx = tape.grad_buffer(x);
            const T n = static_cast<T>(count);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t base = (b * channels + c) * plane;
                    const T k = gamma.value()[c] * inv_std[c];
                    if (mode == Mode::train) {
                        const T mg = sum_g[c] / n, mgh = sum_gh[c] / n;
                        for (std::size_t i = 0; i < plane; ++i) {
                            gx[base + i] += k * (g[base + i] - mg - h[base + i] * mgh);
                        }
                    } else {
                        for (std::size_t i = 0; i < plane; ++i) gx[base + i] += k * g[base + i];
                    }
                }
            }
        });
}

}  // namespace carn
