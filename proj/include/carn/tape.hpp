#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "carn/tensor.hpp"

namespace carn {

template <typename T>
class Tape;

// Named learnable tensor (or non-trainable buffer such as batch-norm running stats).
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    std::vector<T> grad;
    bool trainable = true;

    void zero_grad() { grad.assign(value.numel(), T{0}); }
};

// Handle to a value that may be recorded on a tape. Values are immutable and
// shared, so a Var without a tape is just a constant.
template <typename T>
class Var {
   public:
    static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

    Var() = default;
    explicit Var(Tensor<T> value) : value_(std::make_shared<const Tensor<T>>(std::move(value))) {}
    Var(std::shared_ptr<const Tensor<T>> value, Tape<T>* tape, std::size_t id)
        : value_(std::move(value)), tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return *value_; }
    const std::shared_ptr<const Tensor<T>>& value_ptr() const { return value_; }
    const Shape& shape() const { return value_->shape(); }
    std::size_t dim(std::size_t i) const { return value_->dim(i); }
    std::size_t numel() const { return value_->numel(); }

    Tape<T>* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool tracked() const { return tape_ != nullptr && id_ != kNoNode; }

   private:
    std::shared_ptr<const Tensor<T>> value_;
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = kNoNode;
};

// Records operations in execution order; backward walks them in reverse.
// Single-threaded by contract.
template <typename T>
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::span<const T> out_grad)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    // Trainable leaf bound to a parameter; backward accumulates into p.grad.
    Var<T> param(Parameter<T>& p) {
        auto shared = std::shared_ptr<const Tensor<T>>(std::shared_ptr<void>{}, &p.value);
        if (!grad_enabled_ || !p.trainable) return Var<T>(shared, nullptr, Var<T>::kNoNode);
        nodes_.push_back(Node{p.value.numel(), {}, {}, &p});
        return Var<T>(std::move(shared), this, nodes_.size() - 1);
    }

    // Differentiable leaf not tied to a parameter (used by gradient checks).
    Var<T> leaf(Tensor<T> value) {
        auto shared = std::make_shared<const Tensor<T>>(std::move(value));
        if (!grad_enabled_) return Var<T>(shared, nullptr, Var<T>::kNoNode);
        nodes_.push_back(Node{shared->numel(), {}, {}, nullptr});
        return Var<T>(std::move(shared), this, nodes_.size() - 1);
    }

    // Records an op output. Returns an untracked Var if no input is tracked.
    Var<T> record(std::shared_ptr<const Tensor<T>> shared, const std::vector<const Var<T>*>& inputs,
                  BackwardFn backward) {
        bool any = false;
        for (const Var<T>* in : inputs) {
            if (in->tracked()) {
                if (in->tape() != this) throw std::logic_error("operands recorded on different tapes");
                any = true;
            }
        }
        if (!any || !grad_enabled_) return Var<T>(shared, nullptr, Var<T>::kNoNode);
        nodes_.push_back(Node{shared->numel(), {}, std::move(backward), nullptr});
        return Var<T>(std::move(shared), this, nodes_.size() - 1);
    }

    bool requires_grad(const Var<T>& v) const { return v.tracked() && v.tape() == this; }

    // Zero-initialised gradient buffer of a tracked node.
    std::vector<T>& grad_buffer(const Var<T>& v) {
        Node& n = nodes_.at(v.id());
        if (n.grad.empty()) n.grad.assign(n.numel, T{0});
        return n.grad;
    }

    void accumulate(const Var<T>& v, std::span<const T> g) {
        if (!requires_grad(v)) return;
        auto& buf = grad_buffer(v);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }

    // Gradient of a node after backward; empty if unreachable.
    const std::vector<T>& grad(const Var<T>& v) const {
        static const std::vector<T> kEmpty;
        if (!requires_grad(v)) return kEmpty;
        return nodes_[v.id()].grad;
    }

    // Node gradients are recomputed from scratch on every call; parameter
    // gradients accumulate until the caller zeroes them.
    void backward(const Var<T>& root) {
        if (root.numel() != 1) {
            throw ShapeError("backward needs a scalar root, got shape " + to_string(root.shape()));
        }
        if (!requires_grad(root)) throw std::logic_error("backward root is not recorded on this tape");
        for (Node& n : nodes_) n.grad.clear();
        grad_buffer(root)[0] = T{1};
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param != nullptr) {
                auto& pg = n.param->grad;
                if (pg.size() != n.numel) pg.assign(n.numel, T{0});
                for (std::size_t k = 0; k < n.numel; ++k) pg[k] += n.grad[k];
            }
        }
    }

   private:
    struct Node {
        std::size_t numel;
        std::vector<T> grad;
        BackwardFn backward;
        Parameter<T>* param;
    };

    bool grad_enabled_;
    std::vector<Node> nodes_;
};

}  // namespace carn
