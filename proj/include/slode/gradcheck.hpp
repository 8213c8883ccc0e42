#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "autodiff.hpp"

namespace slode {

struct GradCheckReport {
    double max_rel_error = 0.0;            ///< worst elementwise |a - n| / max(|a|, |n|, floor)
    std::vector<double> group_rel_error;   ///< per leaf: ||a - n|| / max(||a||, ||n||, floor)
    std::vector<Array> analytic;
    std::vector<Array> numeric;

    double max_group_rel_error() const {
        double m = 0.0;
        for (double e : group_rel_error) m = std::max(m, e);
        return m;
    }
};

/// Compares backward() gradients of a scalar loss against central finite differences.
/// `build_loss` must rebuild the loss from the current leaf values on every call.
inline GradCheckReport check_gradients(const std::function<Var()>& build_loss, std::vector<Var> leaves,
                                       double step = 1e-5, double floor = 1e-8) {
    GradCheckReport report;
    for (auto& l : leaves) l.zero_grad();
    backward(build_loss());
    for (auto& l : leaves) report.analytic.push_back(l.grad());
    for (auto& l : leaves) l.zero_grad();

    NoGradGuard no_grad;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        Array& v = leaves[k].mutable_value();
        Array num(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double orig = v[i];
            v[i] = orig + step;
            const double up = build_loss().item();
            v[i] = orig - step;
            const double down = build_loss().item();
            v[i] = orig;
            num[i] = (up - down) / (2.0 * step);
        }
        const Array& an = report.analytic[k];
        double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double d = std::abs(an[i] - num[i]);
            const double denom = std::max({std::abs(an[i]), std::abs(num[i]), floor});
            report.max_rel_error = std::max(report.max_rel_error, d / denom);
            diff_sq += d * d;
            a_sq += an[i] * an[i];
            n_sq += num[i] * num[i];
        }
        const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), floor});
        report.group_rel_error.push_back(std::sqrt(diff_sq) / denom);
        report.numeric.push_back(std::move(num));
    }
    return report;
}

} // namespace slode
