#pragma once

#include "mmbc/autodiff.hpp"
#include "mmbc/rng.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace mmbc::testing {

// Compares the analytic gradient of a scalar graph against central finite
// differences of directional derivatives. Forward values are f32, so
// per-element quotients are dominated by rounding noise; directional probes
// keep the comparison at the gradient's own scale. The graph builder
// receives leaf Vars for each input (requires_grad set) and must return a
// scalar.
struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int checked = 0;
};

inline FdReport fd_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    std::vector<Tensor> inputs, double h = 3e-3, int n_directions = 3,
    uint64_t dir_seed = 1234) {
    FdReport rep;

    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(inputs.size());
    for (Var v : leaves) grads.push_back(tape.grad_or_zero(v));

    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape t2;
        std::vector<Var> ls;
        for (const auto& x : xs) ls.push_back(t2.leaf(x, false));
        return double(t2.scalar_value(build(t2, ls)));
    };

    Rng rng(dir_seed);
    for (int dir = 0; dir < n_directions; ++dir) {
        std::vector<Tensor> dirs;
        double dot = 0.0, dir_norm2 = 0.0, grad_norm2 = 0.0;
        for (size_t i = 0; i < inputs.size(); ++i) {
            Tensor d(inputs[i].shape());
            for (int64_t j = 0; j < d.size(); ++j) {
                double v = rng.uniform(0.5, 1.0);
                if (rng.uniform() < 0.5) v = -v;
                d.at(j) = float(v);
                dot += v * double(grads[i].at(j));
                dir_norm2 += v * v;
                grad_norm2 += double(grads[i].at(j)) * double(grads[i].at(j));
            }
            dirs.push_back(std::move(d));
        }
        std::vector<Tensor> plus = inputs, minus = inputs;
        for (size_t i = 0; i < inputs.size(); ++i)
            for (int64_t j = 0; j < inputs[i].size(); ++j) {
                plus[i].at(j) += float(h) * dirs[i].at(j);
                minus[i].at(j) -= float(h) * dirs[i].at(j);
            }
        const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
        const double abs_err = std::fabs(fd - dot);
        // error measured against the gradient's own scale, so that nearly
        // cancelling projections do not inflate the quotient
        const double scale = std::max(
            {std::fabs(fd), std::sqrt(grad_norm2) * std::sqrt(dir_norm2), 1e-8});
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        rep.max_rel_err = std::max(rep.max_rel_err, abs_err / scale);
        ++rep.checked;
    }
    return rep;
}

inline Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = float(rng.uniform(lo, hi));
    return t;
}

// Random values bounded away from zero, for ops with kinks at the origin.
inline Tensor random_tensor_away_from(std::vector<int64_t> shape, Rng& rng, double margin) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) {
        double v = rng.uniform(margin, 1.0);
        if (rng.uniform() < 0.5) v = -v;
        t.at(i) = float(v);
    }
    return t;
}

} // namespace mmbc::testing
