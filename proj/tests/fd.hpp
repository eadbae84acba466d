// Central-finite-difference gradient checking against the analytic gradients
// accumulated by an objective callback. Shared by the unit suites and the
// acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "reliocc/optim.hpp"

namespace fd {

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

struct Report {
    double max_rel = 0.0;
    std::string where;
};

// `objective(bool with_grad)` returns the loss and, when with_grad is set,
// accumulates gradients into the registered tensors. Perturbs every entry.
template <class Objective>
Report check(const std::vector<reliocc::ParamRef>& params, Objective&& objective,
             double h = 1e-5) {
    reliocc::zero_grads(params);
    objective(true);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(*p.grad);

    Report report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& values = *params[k].value;
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double orig = values[j];
            values[j] = orig + h;
            const double fp = objective(false);
            values[j] = orig - h;
            const double fm = objective(false);
            values[j] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double r = rel_err(analytic[k][j], numeric);
            if (r > report.max_rel) {
                report.max_rel = r;
                report.where = params[k].name + "[" + std::to_string(j) + "]";
            }
        }
    }
    return report;
}

}  // namespace fd
