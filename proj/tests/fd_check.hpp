#pragma once

// Central finite-difference oracle for gradient tests. Independent of the
// tape's backward pass: it only calls the forward function.

#include <cmath>
#include <functional>

#include "tfids/tensor.hpp"

namespace tfids::testing {

// f: scalar-valued forward over a single input tensor (fresh tape inside).
using ScalarFn = std::function<double(const ad::Tensor&)>;

inline ad::Tensor finite_diff_grad(const ScalarFn& f, const ad::Tensor& x, float h = 1e-3f) {
    ad::Tensor g(x.shape());
    ad::Tensor xp = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const float orig = xp[i];
        xp[i] = orig + h;
        const double fp = f(xp);
        xp[i] = orig - h;
        const double fm = f(xp);
        xp[i] = orig;
        g[i] = static_cast<float>((fp - fm) / (2.0 * static_cast<double>(h)));
    }
    return g;
}

// Max relative error with a denominator floor: float32 finite differences on
// near-zero gradients are dominated by rounding noise, so tiny entries are
// compared on an absolute scale instead.
inline double max_rel_err(const ad::Tensor& got, const ad::Tensor& want,
                          double denom_floor = 1e-3) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < got.size(); ++i) {
        const double g = got[i];
        const double w = want[i];
        const double denom = std::max({std::fabs(g), std::fabs(w), denom_floor});
        worst = std::max(worst, std::fabs(g - w) / denom);
    }
    return worst;
}

inline double fd_grad_rel_err(const ScalarFn& f, const ad::Tensor& x,
                              const ad::Tensor& analytic, float h = 1e-3f,
                              double denom_floor = 1e-3) {
    return max_rel_err(analytic, finite_diff_grad(f, x, h), denom_floor);
}

} // namespace tfids::testing
