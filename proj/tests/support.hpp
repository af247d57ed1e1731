#pragma once

// Shared helpers for the unit and acceptance suites: central-difference
// gradient checks and random tensors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "krt/ops.hpp"
#include "krt/rng.hpp"

namespace krt::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst;  // "param[index]" of the largest error
    std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor): relative where the gradient is sizeable,
// absolute against `floor` where both sides vanish.
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares tape gradients of the scalar `loss` with central differences of
// step h on every element of every trainable parameter.
inline GradCheck check_gradients(const std::vector<Parameter<double>*>& params,
                                 const std::function<Var<double>(Tape<double>&)>& loss, double h = 1e-5) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        tape.backward(loss(tape));
    }
    auto value = [&] {
        Tape<double> tape;
        return loss(tape).value().item();
    };
    GradCheck out;
    for (auto* p : params) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double up = value();
            p->value[i] = saved - h;
            const double down = value();
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = rel_error(p->grad[i], numeric);
            ++out.checked;
            if (err > out.max_rel_error) {
                out.max_rel_error = err;
                out.worst = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return out;
}

// Projects a tensor-valued op onto a scalar with fixed random weights so
// every output element contributes to the checked gradient.
inline Var<double> project(const Var<double>& y, const Tensor<double>& weights) {
    Tape<double>& tape = *y.tape();
    return sum(mul(y, tape.constant(weights)));
}

}  // namespace krt::testing
