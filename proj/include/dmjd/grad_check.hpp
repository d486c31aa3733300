#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dmjd/tensor.hpp"

namespace dmjd {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    double tol = 0.0;

    bool pass() const { return max_rel_err <= tol; }
};

struct GradCheckOptions {
    double step_scale = 1e-5;  // h_i = step_scale * max(1, |x_i|)
    double denom_floor = 1e-6;
};

// Compares the tape gradient of f at x against central finite differences.
// f must be a pure scalar function of x; evaluation happens at 64-bit
// precision, which is what keeps the comparison meaningful.
inline GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double tol,
                                  GradCheckOptions opts = {}) {
    Tensor<double> probe = Tensor<double>::from(
        x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);

    std::vector<double> analytic(probe.numel(), 0.0);
    {
        Tape<double> tape;
        Tensor<double> loss = f(probe);
        if (loss.numel() != 1) throw contract_error("grad_check: f must return a scalar");
        backward(loss);
        if (probe.has_grad()) {
            auto g = probe.grad();
            analytic.assign(g.begin(), g.end());
        }
    }

    auto eval = [&](const std::vector<double>& vals) {
        Tensor<double> t = Tensor<double>::from(x.shape(), vals);
        return f(t).item();
    };

    std::vector<double> base(probe.values().begin(), probe.values().end());
    GradCheckReport report;
    report.tol = tol;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double h = opts.step_scale * std::max(1.0, std::fabs(base[i]));
        std::vector<double> pert = base;
        pert[i] = base[i] + h;
        const double fp = eval(pert);
        pert[i] = base[i] - h;
        const double fm = eval(pert);
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), opts.denom_floor});
        const double rel = std::fabs(analytic[i] - numeric) / denom;
        if (!std::isfinite(rel)) throw numeric_error("grad_check: non-finite comparison at index " + std::to_string(i));
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    return report;
}

}  // namespace dmjd

#include "dmjd/model.hpp"

namespace dmjd {

struct ParamGradCheckResult {
    std::string name;
    GradCheckReport report;
};

// Finite-difference check of every parameter in a set against the tape
// gradient of loss_fn, one parameter group at a time. loss_fn must rebuild
// the forward pass on each call.
template <typename LossFn>
std::vector<ParamGradCheckResult> grad_check_params(ParamSet<double>& params, LossFn loss_fn,
                                                    double tol, GradCheckOptions opts = {}) {
    params.zero_grads();
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        Tensor<double> loss = loss_fn();
        if (loss.numel() != 1) throw contract_error("grad_check_params: loss_fn must return a scalar");
        backward(loss);
    }
    for (auto& e : params.entries()) {
        if (e.tensor.has_grad()) {
            auto g = e.tensor.grad();
            analytic.emplace_back(g.begin(), g.end());
        } else {
            analytic.emplace_back(e.tensor.numel(), 0.0);
        }
    }

    std::vector<ParamGradCheckResult> results;
    for (std::size_t pi = 0; pi < params.entries().size(); ++pi) {
        auto& entry = params.entries()[pi];
        auto vals = entry.tensor.values_mut();
        GradCheckReport report;
        report.tol = tol;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double base = vals[i];
            const double h = opts.step_scale * std::max(1.0, std::fabs(base));
            vals[i] = base + h;
            const double fp = loss_fn().item();
            vals[i] = base - h;
            const double fm = loss_fn().item();
            vals[i] = base;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), opts.denom_floor});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        results.push_back({entry.name, report});
    }
    return results;
}

}  // namespace dmjd
