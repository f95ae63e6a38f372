#pragma once

// Central finite-difference gradient oracle. Independent of the autograd
// path: it only calls the forward closure and compares against whatever
// analytic gradients backward() produced.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ebaker/tensor.hpp"

namespace testsupport {

using ebaker::Tensor;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;
};

// loss must build a fresh scalar tape from the inputs on every call.
inline GradCheckResult gradient_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> inputs, double step = 1e-5) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor out = loss(inputs);
    for (auto& t : inputs) t.zero_grad();
    ebaker::backward(out);

    GradCheckResult result;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        const std::vector<double> analytic =
            t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0);
        for (std::size_t j = 0; j < t.numel(); ++j) {
            double saved = t.values()[j];
            t.mutable_values()[j] = saved + step;
            double up = loss(inputs).value();
            t.mutable_values()[j] = saved - step;
            double down = loss(inputs).value();
            t.mutable_values()[j] = saved;
            double numeric = (up - down) / (2.0 * step);
            double denom = std::max({1.0, std::abs(numeric), std::abs(analytic[j])});
            double rel = std::abs(numeric - analytic[j]) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst = "input " + std::to_string(ti) + " elem " +
                               std::to_string(j) + ": analytic " +
                               std::to_string(analytic[j]) + " vs numeric " +
                               std::to_string(numeric);
            }
        }
    }
    return result;
}

inline void expect_gradients_match(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> inputs, double tol = 1e-4, double step = 1e-5) {
    auto r = gradient_check(loss, std::move(inputs), step);
    EXPECT_LE(r.max_rel_err, tol) << r.worst;
}

inline Tensor random_tensor(const ebaker::Shape& shape, ebaker::Rng& rng,
                            double scale = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.mutable_values()) v = rng.normal(0.0, scale);
    return t;
}

// Fixed random weights turn any tensor-valued op into a scalar so every
// output element contributes to the checked gradient.
inline std::function<Tensor(const Tensor&)> weighted_sum_head(const ebaker::Shape& shape,
                                                              ebaker::Rng& rng) {
    Tensor w = random_tensor(shape, rng);
    return [w](const Tensor& x) {
        return ebaker::ops::sum_all(ebaker::ops::multiply(x, w));
    };
}

}  // namespace testsupport
