#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "diffmorph/tensor.hpp"

namespace diffmorph {

struct GradCheckStats {
    std::size_t kinked = 0;  // coordinates re-checked with a smaller step
    double min_step = 0.0;   // smallest step that was needed
};

/// Compares the backward() gradient of a scalar loss with respect to `param`
/// against central differences (f(x+h) - f(x-h)) / 2h at the coordinates in
/// `indices`. Returns the relative error in the infinity norm over those
/// coordinates: max |analytic - numeric| / max(max |analytic|, 1e-8).
/// `loss` must rebuild the graph from the current parameter values.
///
/// A probe whose two sides take different branches of a piecewise op than
/// the base point straddles a kink, where the central difference is not a
/// derivative at all. Such coordinates are re-probed with the step halved
/// until both sides agree with the base point (down to h / 2^20).
template <class T>
double grad_check_slice(const std::function<BasicTensor<T>()>& loss, BasicTensor<T> param,
                        const std::vector<std::size_t>& indices, double h = 1e-3, GradCheckStats* stats = nullptr) {
    param.zero_grad();
    param.set_requires_grad(true);
    auto traced = [&](std::uint64_t& fp) {
        BranchTraceScope scope;
        const auto l = loss();
        fp = scope.fingerprint();
        return l;
    };
    std::uint64_t base_fp = 0;
    BasicTensor<T> l = traced(base_fp);
    if (!std::isfinite(static_cast<double>(l.item()))) throw NumericalError("grad_check: non-finite loss");
    l.backward();
    if (!param.has_grad()) throw NumericalError("grad_check: parameter is not reachable from the loss");
    std::vector<double> analytic;
    for (auto i : indices) analytic.push_back(static_cast<double>(param.grad()[i]));

    double worst = 0.0, scale = 1e-8;
    for (double a : analytic) scale = std::max(scale, std::abs(a));
    auto values = param.mutable_data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        const T saved = values[i];
        double step = h, numeric = 0.0;
        for (int halvings = 0;; ++halvings, step *= 0.5) {
            std::uint64_t fp_up = 0, fp_down = 0;
            values[i] = static_cast<T>(saved + step);
            const double up = static_cast<double>(traced(fp_up).item());
            values[i] = static_cast<T>(saved - step);
            const double down = static_cast<double>(traced(fp_down).item());
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[k])) {
                throw NumericalError("grad_check: non-finite value");
            }
            numeric = (up - down) / (2.0 * step);
            if ((fp_up == base_fp && fp_down == base_fp) || halvings == 20) break;
        }
        if (stats && step < h) {
            ++stats->kinked;
            stats->min_step = stats->min_step == 0.0 ? step : std::min(stats->min_step, step);
        }
        worst = std::max(worst, std::abs(analytic[k] - numeric));
    }
    param.zero_grad();
    return worst / scale;
}

/// Full-coordinate check of a tensor function f(x).
template <class T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                  double h = 1e-3, GradCheckStats* stats = nullptr) {
    std::vector<std::size_t> all(x.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return grad_check_slice<T>([&] { return f(x); }, x, all, h, stats);
}

}  // namespace diffmorph
