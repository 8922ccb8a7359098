#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace carn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major n-d array. Plain value type; gradients live on the tape.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(carn::numel(shape_), T{0}) {}
    Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(carn::numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (carn::numel(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    Tensor reshaped(Shape shape) const {
        if (carn::numel(shape) != numel()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

   private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + to_string(shape_));
        std::size_t off = 0;
        std::size_t d = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[d]) throw std::out_of_range("tensor index out of range");
            off = off * shape_[d] + i;
            ++d;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

// Seeded generator with platform-independent real conversions.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // Box-Muller; u1 kept away from zero.
        const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    // Child seed for per-item streams.
    std::uint64_t fork() { return engine_() ^ 0x9E3779B97F4A7C15ULL; }

   private:
    std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(stddev * rng.normal());
    return t;
}

}  // namespace carn
