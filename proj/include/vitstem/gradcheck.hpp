#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vitstem/tensor.hpp"

namespace vitstem {

// Central-difference check of reverse-mode gradients. `f` maps the inputs to
// a scalar; returns the max over all input elements of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
// Run at double precision; h = 1e-5 is a good default.
inline double grad_check(const std::function<Tensor64(std::vector<Tensor64>&)>& f,
                         std::vector<Tensor64> inputs, double h = 1e-5) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor64 out = f(inputs);
    out.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) {
        analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.data().size(), 0.0));
    }
    double worst = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& values = inputs[t].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double fp = f(inputs).item();
            values[i] = saved - h;
            const double fm = f(inputs).item();
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[t][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace vitstem
