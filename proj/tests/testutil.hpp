#pragma once

// Shared helpers for the test suites: numerical gradient checking against
// central finite differences, and small tensor constructors.

#include <functional>
#include <vector>

#include "counterfax/tensor.hpp"

namespace cfxtest {

using counterfax::Tensor;

/// Max relative error between analytic gradients of `f` (a scalar-valued
/// function of `inputs`) and central finite differences with step h.
/// Relative error is |a - n| / max(1, |a|, |n|) per coordinate.
inline double gradcheck(const std::function<Tensor<double>()>& f,
                        std::vector<Tensor<double>> inputs, double h = 1e-4) {
    for (auto& in : inputs) in.set_requires_grad(true);
    Tensor<double> out = f();
    auto analytic = counterfax::grad(out, inputs);

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].data();
        for (size_t k = 0; k < data.size(); ++k) {
            double orig = data[k];
            data[k] = orig + h;
            double fp;
            {
                counterfax::NoGradGuard ng;
                fp = f().item();
            }
            data[k] = orig - h;
            double fm;
            {
                counterfax::NoGradGuard ng;
                fm = f().item();
            }
            data[k] = orig;
            double num = (fp - fm) / (2 * h);
            double ana = analytic[i].data()[k];
            double denom = std::max({1.0, std::abs(num), std::abs(ana)});
            worst = std::max(worst, std::abs(num - ana) / denom);
        }
    }
    return worst;
}

inline Tensor<double> randt(counterfax::Shape shape, counterfax::RandomStream& rng,
                            double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(size_t(counterfax::shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(shape), std::move(v));
}

}  // namespace cfxtest
