#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "ssanet/tensor.hpp"

namespace ssanet {

// Central finite differences against analytic gradients. The function is
// evaluated forward-only, so the check is independent of any recorded
// backward path.

inline double gradcheck_rel_err(double analytic, double numeric) {
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

// f maps the full input set to a scalar; grads[i] is the analytic gradient
// for inputs[i]. Returns the max relative error over every coordinate.
inline double finite_diff_max_rel_err(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
    const std::vector<Tensor>& grads, double step = 1e-5) {
    double worst = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
            const double keep = inputs[t][i];
            inputs[t][i] = keep + step;
            const double fp = f(inputs);
            inputs[t][i] = keep - step;
            const double fm = f(inputs);
            inputs[t][i] = keep;
            const double numeric = (fp - fm) / (2.0 * step);
            worst = std::max(worst, gradcheck_rel_err(grads[t][i], numeric));
        }
    }
    return worst;
}

}  // namespace ssanet
