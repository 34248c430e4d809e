#pragma once

// Central finite-difference gradient oracle and the per-parameter
// verification report. The oracle never touches the tape; it perturbs values
// in place and re-runs the caller-supplied forward function.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmrag/tensor.hpp"

namespace mmrag {

// Central-difference estimate of d f / d x per coordinate: the evaluation
// callback must recompute f from x's current values, deterministically.
inline Tensor finite_diff_grad(const std::function<double()>& eval, Tensor x, double h = 1e-5) {
    Tensor g = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x.at(i);
        x.at(i) = saved + h;
        const double f_plus = eval();
        x.at(i) = saved - h;
        const double f_minus = eval();
        x.at(i) = saved;
        g.at(i) = (f_plus - f_minus) / (2.0 * h);
    }
    return g;
}

// Relative error with an absolute floor so that (0, 0) pairs compare clean.
inline double grad_rel_error(double analytic, double numeric, double floor_eps = 1e-6) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor_eps});
    return std::fabs(analytic - numeric) / denom;
}

inline double max_grad_rel_error(const Tensor& analytic_grad_holder, const Tensor& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
        const double a = analytic_grad_holder.has_grad() ? analytic_grad_holder.grad()[i] : 0.0;
        worst = std::max(worst, grad_rel_error(a, numeric.at(i)));
    }
    return worst;
}

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 1e-4;

    bool passed() const {
        for (const auto& e : entries)
            if (!(e.max_rel_error <= tolerance)) return false;
        return true;
    }

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_error);
        return w;
    }
};

}  // namespace mmrag
