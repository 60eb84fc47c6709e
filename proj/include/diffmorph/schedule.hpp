#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/ops.hpp"
#include "diffmorph/tensor.hpp"

namespace diffmorph {

/// Variance schedule tables, 1-based in t. Index 0 holds the boundary values
/// beta_0 = 0, alpha_bar_0 = 1, sigma_0 = 0.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// Builds alpha_bar and sigma from per-step betas (t = 1..betas.size()).
    /// `timesteps[i]` is the training-time index that step i stands for.
    static NoiseSchedule from_betas(const std::vector<double>& betas, std::vector<int> timesteps = {}) {
        if (betas.empty()) throw std::invalid_argument("noise schedule needs at least one step");
        NoiseSchedule s;
        const std::size_t T = betas.size();
        s.beta_.assign(T + 1, 0.0);
        s.alpha_bar_.assign(T + 1, 1.0);
        s.sigma_.assign(T + 1, 0.0);
        for (std::size_t t = 1; t <= T; ++t) {
            const double b = betas[t - 1];
            if (!(b >= 0.0 && b < 1.0)) {
                throw std::invalid_argument("beta_" + std::to_string(t) + " = " + std::to_string(b) + " outside [0,1)");
            }
            s.beta_[t] = b;
            s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - b);
            const double denom = 1.0 - s.alpha_bar_[t];
            const double var = denom > 0.0 ? (1.0 - s.alpha_bar_[t - 1]) / denom * b : 0.0;
            s.sigma_[t] = std::sqrt(std::max(var, 0.0));
        }
        if (timesteps.empty()) {
            timesteps.resize(T + 1);
            for (std::size_t t = 0; t <= T; ++t) timesteps[t] = static_cast<int>(t);
        }
        if (timesteps.size() != T + 1) throw std::invalid_argument("timestep table size mismatch");
        s.timesteps_ = std::move(timesteps);
        return s;
    }

    int steps() const { return static_cast<int>(beta_.size()) - 1; }
    double beta(int t) const { return beta_.at(check(t)); }
    double alpha_bar(int t) const { return alpha_bar_.at(check(t)); }
    double sigma(int t) const { return sigma_.at(check(t)); }
    int timestep(int i) const { return timesteps_.at(check(i)); }

private:
    std::size_t check(int t) const {
        if (t < 0 || t > steps()) {
            throw std::out_of_range("time step " + std::to_string(t) + " outside [0," + std::to_string(steps()) + "]");
        }
        return static_cast<std::size_t>(t);
    }

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
    std::vector<double> sigma_;
    std::vector<int> timesteps_;
};

/// Linear beta schedule from beta_start (t = 1) to beta_end (t = T_train).
inline NoiseSchedule make_schedule(int T_train, double beta_start, double beta_end) {
    if (T_train < 1) throw std::invalid_argument("T_train must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T_train));
    for (int t = 1; t <= T_train; ++t) {
        const double frac = T_train == 1 ? 0.0 : static_cast<double>(t - 1) / (T_train - 1);
        betas[static_cast<std::size_t>(t - 1)] = beta_start + (beta_end - beta_start) * frac;
    }
    return NoiseSchedule::from_betas(betas);
}

/// `steps` indices spread evenly over [1, T] ending at T, with betas rebuilt
/// so alpha_bar at every kept index matches the source schedule.
inline NoiseSchedule subsequence_schedule(const NoiseSchedule& sched, int steps, int T) {
    if (!(steps >= 1 && steps <= T && T <= sched.steps())) {
        throw std::invalid_argument("subsequence needs 1 <= steps <= T <= T_train (steps=" + std::to_string(steps) +
                                    ", T=" + std::to_string(T) + ", T_train=" + std::to_string(sched.steps()) + ")");
    }
    std::vector<int> picks(static_cast<std::size_t>(steps) + 1, 0);
    for (int i = 1; i <= steps; ++i) {
        // round-half-up of i*T/steps in integer arithmetic
        picks[static_cast<std::size_t>(i)] =
            static_cast<int>((2 * static_cast<long long>(i) * T + steps) / (2 * static_cast<long long>(steps)));
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    std::vector<int> timesteps(static_cast<std::size_t>(steps) + 1, 0);
    for (int i = 1; i <= steps; ++i) {
        const int t = picks[static_cast<std::size_t>(i)];
        const int prev = picks[static_cast<std::size_t>(i - 1)];
        timesteps[static_cast<std::size_t>(i)] = sched.timestep(t);
        betas[static_cast<std::size_t>(i - 1)] = 1.0 - sched.alpha_bar(t) / sched.alpha_bar(prev);
    }
    return NoiseSchedule::from_betas(betas, std::move(timesteps));
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. No gradient flows into eps.
template <class T>
BasicTensor<T> forward_sample(const BasicTensor<T>& x0, int t, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "forward_sample");
    if (t < 1 || t > sched.steps()) throw std::out_of_range("forward_sample: t=" + std::to_string(t) + " out of range");
    const double a = sched.alpha_bar(t);
    return add(scale(x0, static_cast<T>(std::sqrt(a))), scale(eps.detach(), static_cast<T>(std::sqrt(1.0 - a))));
}

/// Batched variant: one time step per leading-axis item.
template <class T>
BasicTensor<T> forward_sample(const BasicTensor<T>& x0, const std::vector<int>& t, const BasicTensor<T>& eps,
                              const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "forward_sample");
    if (x0.rank() == 0 || t.size() != x0.dim(0)) throw ShapeError("forward_sample: one time step per batch item required");
    const std::size_t per = x0.numel() / x0.dim(0);
    std::vector<T> ca(x0.numel()), cn(x0.numel());
    for (std::size_t b = 0; b < t.size(); ++b) {
        if (t[b] < 1 || t[b] > sched.steps()) {
            throw std::out_of_range("forward_sample: t=" + std::to_string(t[b]) + " out of range");
        }
        const T sa = static_cast<T>(std::sqrt(sched.alpha_bar(t[b])));
        const T sn = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t[b])));
        std::fill(ca.begin() + static_cast<long>(b * per), ca.begin() + static_cast<long>((b + 1) * per), sa);
        std::fill(cn.begin() + static_cast<long>(b * per), cn.begin() + static_cast<long>((b + 1) * per), sn);
    }
    // per-item coefficients as constant tensors so the result stays on the tape for x0
    return add(mul(x0, BasicTensor<T>(x0.shape(), std::move(ca))),
               mul(eps.detach(), BasicTensor<T>(x0.shape(), std::move(cn))));
}

/// (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)
template <class T>
BasicTensor<T> posterior_mean(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, int t,
                              const NoiseSchedule& sched) {
    require_same_shape(x_t, eps_hat, "posterior_mean");
    if (t < 1 || t > sched.steps()) {
        throw std::out_of_range("posterior_mean: t=" + std::to_string(t) + " must be in [1," +
                                std::to_string(sched.steps()) + "]");
    }
    const double b = sched.beta(t);
    const double one_minus_a = 1.0 - sched.alpha_bar(t);
    const double eps_coef = b == 0.0 ? 0.0 : b / std::sqrt(one_minus_a);
    const double inv = 1.0 / std::sqrt(1.0 - b);
    return add(scale(x_t, static_cast<T>(inv)), scale(eps_hat, static_cast<T>(-eps_coef * inv)));
}

template <class T>
BasicTensor<T> reverse_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_hat, int t, const BasicTensor<T>& z,
                            const NoiseSchedule& sched) {
    require_same_shape(x_t, z, "reverse_step");
    auto mu = posterior_mean(x_t, eps_hat, t, sched);
    const double s = sched.sigma(t);
    if (s == 0.0) return mu;
    return add(mu, scale(z, static_cast<T>(s)));
}

/// Noise-predictor callback: (x_t, training time index) -> eps_hat.
template <class T>
using ScoreFn = std::function<BasicTensor<T>(const BasicTensor<T>& x_t, int t)>;

/// Truncated reverse diffusion started from the moving image: noise m once up
/// to step T, then denoise over `steps` evenly spaced indices down to 0. The
/// result is clamped to [-1,1]. `on_step(i, x)` sees every intermediate state.
template <class T>
BasicTensor<T> generate(const BasicTensor<T>& moving, const ScoreFn<T>& score, const NoiseSchedule& sched, int T_fwd,
                        int steps, std::uint64_t seed,
                        const std::function<void(int, const BasicTensor<T>&)>& on_step = {}) {
    if (T_fwd < 1 || T_fwd > sched.steps()) {
        throw std::invalid_argument("generate: T=" + std::to_string(T_fwd) + " must be in [1," +
                                    std::to_string(sched.steps()) + "]");
    }
    const NoiseSchedule sub = subsequence_schedule(sched, steps, T_fwd);
    NoGradGuard no_grad;
    std::mt19937_64 rng(seed);
    auto eps = BasicTensor<T>::randn(moving.shape(), rng);
    const double a = sched.alpha_bar(T_fwd);
    BasicTensor<T> x =
        add(scale(moving, static_cast<T>(std::sqrt(a))), scale(eps, static_cast<T>(std::sqrt(1.0 - a))));
    if (on_step) on_step(steps, x);
    for (int i = steps; i >= 1; --i) {
        auto eps_hat = score(x, sub.timestep(i));
        if (eps_hat.shape() != x.shape()) {
            throw ShapeError("generate: score output " + shape_str(eps_hat.shape()) + " does not match state " +
                             shape_str(x.shape()));
        }
        auto z = i > 1 ? BasicTensor<T>::randn(x.shape(), rng) : BasicTensor<T>::zeros(x.shape());
        x = reverse_step(x, eps_hat, i, z, sub);
        if (on_step) on_step(i - 1, x);
    }
    std::vector<T> out = x.vec();
    for (auto& v : out) v = std::clamp(v, T(-1), T(1));
    return BasicTensor<T>(x.shape(), std::move(out));
}

}  // namespace diffmorph
