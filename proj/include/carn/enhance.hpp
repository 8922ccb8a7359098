#pragma once

#include <algorithm>
#include <stdexcept>

#include "carn/mask.hpp"
#include "carn/model.hpp"

namespace carn {

// noisy -> STFT -> network mask -> masked STFT -> overlap-add, clipped to
// [-1, 1]. The output has exactly as many samples as the input.
template <typename T>
dsp::Waveform<T> enhance(CarnModel<T>& model, const dsp::Waveform<T>& noisy) {
    const auto spec = dsp::stft(noisy);
    const auto planes = dsp::spec_to_tensor(spec);
    const std::size_t frames = planes.dim(1), bins = planes.dim(2);
    if (bins != model.config().freq_bins) {
        throw ShapeError("enhance: model expects " + std::to_string(model.config().freq_bins) +
                         " frequency bins, the STFT gives " + std::to_string(bins));
    }
    Tape<T> tape(false);
    const auto mask = model.forward(Context<T>{tape, Mode::eval}, Var<T>(planes.reshaped({1, 2, frames, bins})));

    const std::size_t plane = frames * bins;
    Tensor<T> noisy_r(Shape{1, frames, bins}), noisy_i(Shape{1, frames, bins});
    std::copy_n(planes.data().begin(), plane, noisy_r.data().begin());
    std::copy_n(planes.data().begin() + plane, plane, noisy_i.data().begin());
    const auto [est_r, est_i] = apply_mask(mask.real, mask.imag, noisy_r, noisy_i);

    Tensor<T> out(Shape{2, frames, bins});
    std::copy_n(est_r.value().data().begin(), plane, out.data().begin());
    std::copy_n(est_i.value().data().begin(), plane, out.data().begin() + plane);
    auto wave = dsp::istft(dsp::tensor_to_spec(out, spec.params), noisy.size());
    for (T& v : wave.samples) v = std::clamp(v, T{-1}, T{1});
    return wave;
}

}  // namespace carn
