#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "carn/gemm.hpp"
#include "carn/ops.hpp"

namespace carn {

template <typename T>
struct LstmLayerWeights {
    Var<T> w_ih;  // [4H, D_in], gate blocks ordered input, forget, cell, output
    Var<T> w_hh;  // [4H, H]
    Var<T> bias;  // [4H]
};

template <typename T>
struct LstmState {
    Tensor<T> h;  // [B, H]
    Tensor<T> c;  // [B, H]
};

template <typename T>
struct LstmResult {
    Var<T> output;  // [B, T, H]
    std::vector<LstmState<T>> final_state;  // one per layer
};

namespace detail {

template <typename T>
T sigm(T v) {
    return T{1} / (T{1} + std::exp(-v));
}

}  // namespace detail

// One unidirectional layer from a zero initial state. x: [B, T, D_in].
template <typename T>
std::pair<Var<T>, LstmState<T>> lstm_layer(const Var<T>& x, const LstmLayerWeights<T>& w) {
    if (x.shape().size() != 3) throw ShapeError("lstm: input must be [B,T,D], got " + to_string(x.shape()));
    const std::size_t batch = x.dim(0), steps = x.dim(1), d_in = x.dim(2);
    if (w.w_hh.shape().size() != 2 || w.w_hh.dim(0) != 4 * w.w_hh.dim(1)) {
        throw ShapeError("lstm: recurrent weight must be [4H,H], got " + to_string(w.w_hh.shape()));
    }
    const std::size_t hidden = w.w_hh.dim(1), g4 = 4 * hidden;
    if (w.w_ih.shape() != Shape{g4, d_in}) {
        throw ShapeError("lstm: input weight " + to_string(w.w_ih.shape()) + " does not match input " +
                         to_string(x.shape()) + " and hidden size " + std::to_string(hidden));
    }
    if (w.bias.numel() != g4) throw ShapeError("lstm: bias must have 4H entries, got " + to_string(w.bias.shape()));

    const std::size_t rows = batch * steps;
    // Post-activation gates [B,T,4H] and cell states [B,T,H], kept for backward.
    auto gates = std::make_shared<std::vector<T>>(rows * g4);
    auto cells = std::make_shared<std::vector<T>>(rows * hidden);
    detail::gemm<T>(false, true, rows, g4, d_in, x.value().vec().data(), w.w_ih.value().vec().data(), gates->data(), false);

    Tensor<T> out(Shape{batch, steps, hidden});
    std::vector<T> h_prev(batch * hidden, T{0}), c_prev(batch * hidden, T{0}), rec(batch * g4);
    const auto& bias = w.bias.value().vec();
    for (std::size_t t = 0; t < steps; ++t) {
        detail::gemm<T>(false, true, batch, g4, hidden, h_prev.data(), w.w_hh.value().vec().data(), rec.data(), false);
        for (std::size_t b = 0; b < batch; ++b) {
            T* z = gates->data() + (b * steps + t) * g4;
            const T* r = rec.data() + b * g4;
            T* c_out = cells->data() + (b * steps + t) * hidden;
            T* h_out = out.vec().data() + (b * steps + t) * hidden;
            for (std::size_t j = 0; j < hidden; ++j) {
                const T ig = detail::sigm(z[j] + r[j] + bias[j]);
                const T fg = detail::sigm(z[hidden + j] + r[hidden + j] + bias[hidden + j]);
                const T gg = std::tanh(z[2 * hidden + j] + r[2 * hidden + j] + bias[2 * hidden + j]);
                const T og = detail::sigm(z[3 * hidden + j] + r[3 * hidden + j] + bias[3 * hidden + j]);
                z[j] = ig;
                z[hidden + j] = fg;
                z[2 * hidden + j] = gg;
                z[3 * hidden + j] = og;
                const T c = fg * c_prev[b * hidden + j] + ig * gg;
                c_out[j] = c;
                h_out[j] = og * std::tanh(c);
            }
            std::copy_n(c_out, hidden, c_prev.begin() + static_cast<std::ptrdiff_t>(b * hidden));
            std::copy_n(h_out, hidden, h_prev.begin() + static_cast<std::ptrdiff_t>(b * hidden));
        }
    }
    LstmState<T> state{Tensor<T>(Shape{batch, hidden}, h_prev), Tensor<T>(Shape{batch, hidden}, c_prev)};

    auto out_ptr = std::make_shared<const Tensor<T>>(std::move(out));
    auto hs = out_ptr;
    Tape<T>* tape = nullptr;
    for (const Var<T>* v : {&x, &w.w_ih, &w.w_hh, &w.bias}) {
        if (v->tracked()) tape = v->tape();
    }
    if (tape == nullptr) return {Var<T>(out_ptr, nullptr, Var<T>::kNoNode), std::move(state)};

    Var<T> result = tape->record(
        out_ptr, {&x, &w.w_ih, &w.w_hh, &w.bias},
        [x, w, gates, cells, hs, batch, steps, d_in, hidden, g4, rows](Tape<T>& tp, std::span<const T> g) {
            const auto& G = *gates;
            const auto& C = *cells;
            const auto& H = hs->vec();
            std::vector<T> dz(rows * g4, T{0});
            std::vector<T> dh_next(batch * hidden, T{0}), dc_next(batch * hidden, T{0});
            std::vector<T> dz_step(batch * g4);
            const T* w_hh = w.w_hh.value().vec().data();
            for (std::size_t t = steps; t-- > 0;) {
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t r = b * steps + t;
                    const T* z = G.data() + r * g4;
                    T* d = dz.data() + r * g4;
                    for (std::size_t j = 0; j < hidden; ++j) {
                        const T ig = z[j], fg = z[hidden + j], gg = z[2 * hidden + j], og = z[3 * hidden + j];
                        const T c = C[r * hidden + j];
                        const T c_prev = t > 0 ? C[(r - 1) * hidden + j] : T{0};
                        const T tc = std::tanh(c);
                        const T dh = g[r * hidden + j] + dh_next[b * hidden + j];
                        const T dc = dh * og * (T{1} - tc * tc) + dc_next[b * hidden + j];
                        d[j] = dc * gg * ig * (T{1} - ig);
                        d[hidden + j] = dc * c_prev * fg * (T{1} - fg);
                        d[2 * hidden + j] = dc * ig * (T{1} - gg * gg);
                        d[3 * hidden + j] = dh * tc * og * (T{1} - og);
                        dc_next[b * hidden + j] = dc * fg;
                    }
                    std::copy_n(d, g4, dz_step.begin() + static_cast<std::ptrdiff_t>(b * g4));
                }
                detail::gemm<T>(false, false, batch, hidden, g4, dz_step.data(), w_hh, dh_next.data(), false);
            }
            if (tp.requires_grad(w.w_hh)) {
                // h_{t-1} aligned with dz rows; zero for t = 0.
                std::vector<T> h_prev(rows * hidden, T{0});
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t t = 1; t < steps; ++t) {
                        std::copy_n(H.data() + (b * steps + t - 1) * hidden, hidden,
                                    h_prev.begin() + static_cast<std::ptrdiff_t>((b * steps + t) * hidden));
                    }
                }
                detail::gemm<T>(true, false, g4, hidden, rows, dz.data(), h_prev.data(),
                                tp.grad_buffer(w.w_hh).data(), true);
            }
            if (tp.requires_grad(w.w_ih)) {
                detail::gemm<T>(true, false, g4, d_in, rows, dz.data(), x.value().vec().data(),
                                tp.grad_buffer(w.w_ih).data(), true);
            }
            if (tp.requires_grad(w.bias)) {
                auto& gb = tp.grad_buffer(w.bias);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < g4; ++j) gb[j] += dz[r * g4 + j];
                }
            }
            if (tp.requires_grad(x)) {
                detail::gemm<T>(false, false, rows, d_in, g4, dz.data(), w.w_ih.value().vec().data(),
                                tp.grad_buffer(x).data(), true);
            }
        });
    return {result, std::move(state)};
}

// Stacked unidirectional LSTM; layer l feeds layer l+1.
template <typename T>
LstmResult<T> lstm_forward(const Var<T>& x, const std::vector<LstmLayerWeights<T>>& layers) {
    if (layers.empty()) throw std::invalid_argument("lstm: at least one layer is required");
    LstmResult<T> res{x, {}};
    for (const auto& w : layers) {
        auto [y, state] = lstm_layer(res.output, w);
        res.output = std::move(y);
        res.final_state.push_back(std::move(state));
    }
    return res;
}

}  // namespace carn
