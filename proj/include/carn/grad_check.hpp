#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "carn/tape.hpp"

namespace carn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Relative error with a small floor so coordinates whose true gradient is
// (near) zero are compared on an absolute scale.
inline double relative_error(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares tape gradients of a scalar function of `inputs` against central
// differences with step eps * max(1, |x|).
inline GradCheckResult grad_check(
    const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps = 1e-4) {
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> leaves;
        for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
        Var<double> root = fn(tape, leaves);
        tape.backward(root);
        for (const auto& l : leaves) {
            auto g = tape.grad(l);
            if (g.empty()) g.assign(l.numel(), 0.0);
            analytic.push_back(std::move(g));
        }
    }
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape(false);
        std::vector<Var<double>> leaves;
        for (const auto& t : xs) leaves.push_back(Var<double>(t));
        return fn(tape, leaves).value()[0];
    };
    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
            const double x0 = inputs[k][i];
            const double h = eps * std::max(1.0, std::abs(x0));
            inputs[k][i] = x0 + h;
            const double fp = eval(inputs);
            inputs[k][i] = x0 - h;
            const double fm = eval(inputs);
            inputs[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = relative_error(analytic[k][i], numeric);
            if (err > res.max_rel_error) res = {err, k, i, analytic[k][i], numeric};
        }
    }
    return res;
}

}  // namespace carn
