#pragma once

#include <cmath>
#include <vector>

#include "core/tensor.hpp"

namespace glyphdiff {

// Variance schedule for the diffusion process. Timesteps are 0-based with
// t = 0 the least-noisy step; alpha_bar[t] is the cumulative product of
// alpha up to and including t.
struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    int steps() const { return static_cast<int>(betas.size()); }

    static NoiseSchedule from_betas(std::vector<double> bs) {
        NoiseSchedule s;
        s.betas = std::move(bs);
        double prod = 1.0;
        for (double b : s.betas) {
            if (b <= 0.0 || b >= 1.0) throw DomainError("schedule: beta outside (0,1)");
            s.alphas.push_back(1.0 - b);
            prod *= 1.0 - b;
            s.alpha_bars.push_back(prod);
        }
        return s;
    }

    void check_t(int t) const {
        if (t < 0 || t >= steps()) throw DomainError("schedule: t=" + std::to_string(t) + " outside [0," + std::to_string(steps() - 1) + "]");
    }

    double sqrt_alpha_bar(int t) const {
        check_t(t);
        return std::sqrt(alpha_bars[static_cast<size_t>(t)]);
    }
    double sqrt_one_minus_alpha_bar(int t) const {
        check_t(t);
        return std::sqrt(1.0 - alpha_bars[static_cast<size_t>(t)]);
    }

    // posterior noise scale; zero at t = 0 so the last reverse step is deterministic
    double sigma(int t) const {
        check_t(t);
        if (t == 0) return 0.0;
        double ab_t = alpha_bars[static_cast<size_t>(t)];
        double ab_prev = alpha_bars[static_cast<size_t>(t - 1)];
        return std::sqrt(betas[static_cast<size_t>(t)] * (1.0 - ab_prev) / (1.0 - ab_t));
    }

    // half log-SNR, the integration variable of the fast sampler
    double half_log_snr(int t) const {
        check_t(t);
        double ab = alpha_bars[static_cast<size_t>(t)];
        return 0.5 * std::log(ab / (1.0 - ab));
    }
};

// betas linearly spaced from beta_start to beta_end inclusive
inline NoiseSchedule make_linear_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw DomainError("schedule: steps < 1");
    std::vector<double> bs(static_cast<size_t>(steps));
    for (int t = 0; t < steps; t++)
        bs[static_cast<size_t>(t)] =
            steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1.0);
    return NoiseSchedule::from_betas(std::move(bs));
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
TensorPtr<T> forward_diffuse(const TensorPtr<T>& x0, int t, const TensorPtr<T>& eps,
                             const NoiseSchedule& sched) {
    check_same_shape(x0->shape, eps->shape, "forward_diffuse");
    T a = static_cast<T>(sched.sqrt_alpha_bar(t));
    T s = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t));
    auto out = make_tensor<T>(x0->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = a * x0->v[i] + s * eps->v[i];
    return out;
}

// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
template <typename T>
TensorPtr<T> reconstruct_x0(const TensorPtr<T>& xt, int t, const TensorPtr<T>& eps_hat,
                            const NoiseSchedule& sched) {
    check_same_shape(xt->shape, eps_hat->shape, "reconstruct_x0");
    T a = static_cast<T>(sched.sqrt_alpha_bar(t));
    T s = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t));
    auto out = make_tensor<T>(xt->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = (xt->v[i] - s * eps_hat->v[i]) / a;
    return out;
}

// one ancestral step: x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t) + sigma_t z
template <typename T>
TensorPtr<T> reverse_step(const TensorPtr<T>& xt, int t, const TensorPtr<T>& eps_hat,
                          const TensorPtr<T>& z, const NoiseSchedule& sched) {
    check_same_shape(xt->shape, eps_hat->shape, "reverse_step");
    sched.check_t(t);
    T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(sched.alphas[static_cast<size_t>(t)]));
    T coef = static_cast<T>((1.0 - sched.alphas[static_cast<size_t>(t)]) / sched.sqrt_one_minus_alpha_bar(t));
    T sg = static_cast<T>(sched.sigma(t));
    auto out = make_tensor<T>(xt->shape);
    for (int64_t i = 0; i < out->numel(); i++) {
        out->v[i] = inv_sqrt_alpha * (xt->v[i] - coef * eps_hat->v[i]);
        if (sg != T(0)) out->v[i] += sg * z->v[i];
    }
    return out;
}

}  // namespace glyphdiff
