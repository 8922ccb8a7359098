#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "carn/gemm.hpp"
#include "carn/tape.hpp"

namespace carn {

namespace detail {

template <typename T>
Var<T> emit(Tensor<T> out, const std::vector<const Var<T>*>& inputs, typename Tape<T>::BackwardFn fn) {
    Tape<T>* tape = nullptr;
    for (const Var<T>* v : inputs) {
        if (v->tracked()) {
            tape = v->tape();
            break;
        }
    }
    auto shared = std::make_shared<const Tensor<T>>(std::move(out));
    if (tape == nullptr) return Var<T>(std::move(shared), nullptr, Var<T>::kNoNode);
    return tape->record(std::move(shared), inputs, std::move(fn));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

template <typename T, typename Fn>
Var<T> unary(const Var<T>& x, Fn&& fwd, auto&& dfn) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value().vec();
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return emit<T>(std::move(out), {&x}, [x, dfn](Tape<T>& tape, std::span<const T> g) {
        if (!tape.requires_grad(x)) return;
        auto& gx = tape.grad_buffer(x);
        const auto& xv = x.value().vec();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfn(xv[i]);
    });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::emit<T>(std::move(out), {&a, &b}, [a, b](Tape<T>& tape, std::span<const T> g) {
        tape.accumulate(a, g);
        tape.accumulate(b, g);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return detail::emit<T>(std::move(out), {&a, &b}, [a, b](Tape<T>& tape, std::span<const T> g) {
        tape.accumulate(a, g);
        if (tape.requires_grad(b)) {
            auto& gb = tape.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

// Hadamard product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::emit<T>(std::move(out), {&a, &b}, [a, b](Tape<T>& tape, std::span<const T> g) {
        if (tape.requires_grad(a)) {
            auto& ga = tape.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.value()[i];
        }
        if (tape.requires_grad(b)) {
            auto& gb = tape.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.value()[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    return detail::unary<T>(
        x, [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T{1} / (T{1} + std::exp(-x.value()[i]));
    auto shared = std::make_shared<const Tensor<T>>(std::move(out));
    auto y = shared;
    if (!x.tracked()) return Var<T>(std::move(shared), nullptr, Var<T>::kNoNode);
    return x.tape()->record(std::move(shared), {&x}, [x, y](Tape<T>& tape, std::span<const T> g) {
        auto& gx = tape.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T s = (*y)[i];
            gx[i] += g[i] * s * (T{1} - s);
        }
    });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x.value()[i]);
    auto shared = std::make_shared<const Tensor<T>>(std::move(out));
    auto y = shared;
    if (!x.tracked()) return Var<T>(std::move(shared), nullptr, Var<T>::kNoNode);
    return x.tape()->record(std::move(shared), {&x}, [x, y](Tape<T>& tape, std::span<const T> g) {
        auto& gx = tape.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T t = (*y)[i];
            gx[i] += g[i] * (T{1} - t * t);
        }
    });
}

// (|x| + eps)^p, p > 0. Acts on magnitudes; the sign of x only enters the gradient.
template <typename T>
Var<T> pow(const Var<T>& x, T p, T eps = T(1e-8)) {
    if (!(p > T{0})) throw std::invalid_argument("pow: exponent must be positive");
    return detail::unary<T>(
        x, [p, eps](T v) { return std::pow(std::abs(v) + eps, p); },
        [p, eps](T v) {
            const T s = v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
            return p * std::pow(std::abs(v) + eps, p - T{1}) * s;
        });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc{0};
    for (T v : x.value().vec()) acc += v;
    return detail::emit<T>(Tensor<T>(Shape{}, std::vector<T>{acc}), {&x}, [x](Tape<T>& tape, std::span<const T> g) {
        if (!tape.requires_grad(x)) return;
        for (T& v : tape.grad_buffer(x)) v += g[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    const T n = static_cast<T>(x.numel());
    T acc{0};
    for (T v : x.value().vec()) acc += v;
    return detail::emit<T>(Tensor<T>(Shape{}, std::vector<T>{acc / n}), {&x},
                           [x, n](Tape<T>& tape, std::span<const T> g) {
                               if (!tape.requires_grad(x)) return;
                               for (T& v : tape.grad_buffer(x)) v += g[0] / n;
                           });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return detail::emit<T>(std::move(out), {&x}, [x](Tape<T>& tape, std::span<const T> g) { tape.accumulate(x, g); });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Maps each output flat index to its source flat index.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
    const auto in_strides = strides_of(in);
    Shape out(in.size());
    for (std::size_t d = 0; d < perm.size(); ++d) out[d] = in[perm[d]];
    const std::size_t n = numel(in);
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t s = 0;
        for (std::size_t d = 0; d < perm.size(); ++d) s += idx[d] * in_strides[perm[d]];
        src[o] = s;
        for (std::size_t d = out.size(); d-- > 0;) {
            if (++idx[d] < out[d]) break;
            idx[d] = 0;
        }
    }
    return src;
}

}  // namespace detail

// out.shape[d] = x.shape[perm[d]].
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
    const Shape& in = x.shape();
    if (perm.size() != in.size()) throw ShapeError("permute: rank mismatch for " + to_string(in));
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid axis permutation");
        seen[p] = true;
    }
    Shape out_shape(in.size());
    for (std::size_t d = 0; d < perm.size(); ++d) out_shape[d] = in[perm[d]];
    auto src = std::make_shared<const std::vector<std::size_t>>(detail::permute_index(in, perm));
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < out.numel(); ++o) out[o] = x.value()[(*src)[o]];
    return detail::emit<T>(std::move(out), {&x}, [x, src](Tape<T>& tape, std::span<const T> g) {
        if (!tape.requires_grad(x)) return;
        auto& gx = tape.grad_buffer(x);
        for (std::size_t o = 0; o < g.size(); ++o) gx[(*src)[o]] += g[o];
    });
}

namespace detail {

// Splits a shape around `axis` into outer * axis * inner.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
}

}  // namespace detail

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 0, inner = 0;
    detail::split_axis(out_shape, axis, outer, inner);
    Tensor<T> out(out_shape);
    const std::size_t out_row = out_shape[axis] * inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t row = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.value().vec().begin() + static_cast<std::ptrdiff_t>(o * row), row,
                        out.vec().begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
        }
        offset += row;
    }
    std::vector<const Var<T>*> inputs;
    for (const auto& p : parts) inputs.push_back(&p);
    return detail::emit<T>(std::move(out), inputs, [parts, outer, out_row](Tape<T>& tape, std::span<const T> g) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t row = p.numel() / outer;
            if (tape.requires_grad(p)) {
                auto& gp = tape.grad_buffer(p);
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + off + i];
                }
            }
            off += row;
        }
    });
}

// Contiguous range [start, start+length) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& in = x.shape();
    if (axis >= in.size() || start + length > in[axis]) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") out of bounds for axis " + std::to_string(axis) + " of " + to_string(in));
    }
    Shape out_shape = in;
    out_shape[axis] = length;
    std::size_t outer = 0, inner = 0;
    detail::split_axis(in, axis, outer, inner);
    const std::size_t in_row = in[axis] * inner;
    const std::size_t row = length * inner;
    const std::size_t off = start * inner;
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.value().vec().begin() + static_cast<std::ptrdiff_t>(o * in_row + off), row,
                    out.vec().begin() + static_cast<std::ptrdiff_t>(o * row));
    }
    return detail::emit<T>(std::move(out), {&x}, [x, outer, in_row, row, off](Tape<T>& tape, std::span<const T> g) {
        if (!tape.requires_grad(x)) return;
        auto& gx = tape.grad_buffer(x);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < row; ++i) gx[o * in_row + off + i] += g[o * row + i];
        }
    });
}

// Per-channel PReLU on axis 1 of a [B, C, ...] tensor.
template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
    const Shape& s = x.shape();
    if (s.size() < 2 || slope.numel() != s[1]) {
        throw ShapeError("prelu: slope " + to_string(slope.shape()) + " does not match channels of " + to_string(s));
    }
    const std::size_t batch = s[0], channels = s[1], inner = x.numel() / (s[0] * s[1]);
    Tensor<T> out(s);
    const auto& xv = x.value().vec();
    const auto& a = slope.value().vec();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const T v = xv[base + i];
                out[base + i] = v >= T{0} ? v : a[c] * v;
            }
        }
    }
    return detail::emit<T>(std::move(out), {&x, &slope},
                           [x, slope, batch, channels, inner](Tape<T>& tape, std::span<const T> g) {
                               const auto& xv = x.value().vec();
                               const auto& a = slope.value().vec();
                               const bool gx_on = tape.requires_grad(x);
                               const bool ga_on = tape.requires_grad(slope);
                               std::vector<T>* gx = gx_on ? &tape.grad_buffer(x) : nullptr;
                               std::vector<T>* ga = ga_on ? &tape.grad_buffer(slope) : nullptr;
                               for (std::size_t b = 0; b < batch; ++b) {
                                   for (std::size_t c = 0; c < channels; ++c) {
                                       const std::size_t base = (b * channels + c) * inner;
                                       T acc{0};
                                       for (std::size_t i = 0; i < inner; ++i) {
                                           const T v = xv[base + i];
                                           if (v >= T{0}) {
                                               if (gx) (*gx)[base + i] += g[base + i];
                                           } else {
                                               if (gx) (*gx)[base + i] += g[base + i] * a[c];
                                               acc += g[base + i] * v;
                                           }
                                       }
                                       if (ga) (*ga)[c] += acc;
                                   }
                               }
                           });
}

// Affine map on the last axis: y = x W^T + b, W is [D_out, D_in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& s = x.shape();
    if (weight.shape().size() != 2 || s.empty() || weight.dim(1) != s.back()) {
        throw ShapeError("linear: input " + to_string(s) + " incompatible with weight " + to_string(weight.shape()));
    }
    const std::size_t d_out = weight.dim(0), d_in = weight.dim(1), rows = x.numel() / d_in;
    if (bias.numel() != d_out) {
        throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(weight.shape()));
    }
    Shape out_shape = s;
    out_shape.back() = d_out;
    Tensor<T> out(out_shape);
    detail::gemm<T>(false, true, rows, d_out, d_in, x.value().vec().data(), weight.value().vec().data(),
                    out.vec().data(), false);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < d_out; ++o) out[r * d_out + o] += bias.value()[o];
    }
    return detail::emit<T>(std::move(out), {&x, &weight, &bias},
                           [x, weight, bias, rows, d_in, d_out](Tape<T>& tape, std::span<const T> g) {
                               if (tape.requires_grad(x)) {
                                   detail::gemm<T>(false, false, rows, d_in, d_out, g.data(),
                                                   weight.value().vec().data(), tape.grad_buffer(x).data(), true);
                               }
                               if (tape.requires_grad(weight)) {
                                   detail::gemm<T>(true, false, d_out, d_in, rows, g.data(), x.value().vec().data(),
                                                   tape.grad_buffer(weight).data(), true);
                               }
                               if (tape.requires_grad(bias)) {
                                   auto& gb = tape.grad_buffer(bias);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t o = 0; o < d_out; ++o) gb[o] += g[r * d_out + o];
                                   }
                               }
                           });
}

}  // namespace carn
