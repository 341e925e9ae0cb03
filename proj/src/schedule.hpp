#pragma once

#include <functional>

#include "core.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// DDPM noise schedule and samplers. The forward process is
//   z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
// and the reverse process runs over a strided sub-schedule, deterministic
// (eta = 0, DDIM) or ancestral (eta = 1).
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int steps = 0;  // T
    std::vector<double> betas, alphas, alpha_bars;
};

inline NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.steps = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * (double)t / (double)(T - 1);
        s.betas[t] = b;
        s.alphas[t] = 1.0 - b;
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

template <typename T>
struct NoisedState {
    Tensor<T> z_t;
    int t = 0;
    Tensor<T> eps;
};

template <typename T>
NoisedState<T> forward_noise(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (!z0.same_shape(eps))
        throw std::invalid_argument("forward_noise: eps shape " + shape_str(eps.shape) + " vs z0 " + shape_str(z0.shape));
    if (t < 0 || t >= sched.steps) throw std::invalid_argument("forward_noise: t out of range");
    T a = (T)std::sqrt(sched.alpha_bars[(size_t)t]);
    T b = (T)std::sqrt(1.0 - sched.alpha_bars[(size_t)t]);
    NoisedState<T> out;
    out.t = t;
    out.eps = eps;
    out.z_t = z0;
    for (int64_t i = 0; i < z0.numel(); ++i) out.z_t[i] = a * z0[i] + b * eps[i];
    return out;
}

enum class SamplerKind { ancestral_ddpm, deterministic_ddim };

struct GuidanceConfig {
    double scale = 5.0;
    int steps = 50;
    SamplerKind sampler_kind = SamplerKind::deterministic_ddim;
};

// eps-prediction closure: (z_t, t) -> eps_hat, conditioning already bound
template <typename T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>&, int)>;

// Classifier-free guidance: uncond + scale * (cond - uncond). The endpoints
// return the single branch untouched (and skip the other forward pass).
template <typename T>
Tensor<T> guided_epsilon(const EpsFn<T>& eps_cond, const EpsFn<T>& eps_uncond, const Tensor<T>& z_t, int t,
                         double scale) {
    if (scale < 0) throw std::invalid_argument("guided_epsilon: scale must be >= 0");
    if (scale == 1.0) return eps_cond(z_t, t);
    if (scale == 0.0) return eps_uncond(z_t, t);
    Tensor<T> u = eps_uncond(z_t, t);
    Tensor<T> c = eps_cond(z_t, t);
    for (int64_t i = 0; i < u.numel(); ++i) u[i] = u[i] + (T)scale * (c[i] - u[i]);
    return u;
}

// Uniform-stride timestep subsequence, descending from T-1. steps <= T.
inline std::vector<int> substep_schedule(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("substep_schedule: need 1 <= steps <= T");
    std::vector<int> ts(steps);
    for (int i = 0; i < steps; ++i) ts[i] = (int)((int64_t)(steps - i) * T / steps) - 1;
    return ts;
}

// One reverse update from t_cur to t_prev (t_prev < 0 means final step to x0).
// eta = 0 is DDIM; eta = 1 matches the ancestral DDPM variance on the
// sub-schedule. Predicted x0 is clamped to [-1, 1].
template <typename T>
void reverse_step(Tensor<T>& z, const Tensor<T>& eps_hat, int t_cur, int t_prev, const NoiseSchedule& sched,
                  double eta, Rng* rng) {
    double ab_cur = sched.alpha_bars[(size_t)t_cur];
    double ab_prev = t_prev < 0 ? 1.0 : sched.alpha_bars[(size_t)t_prev];
    double sq_cur = std::sqrt(ab_cur), sq1m_cur = std::sqrt(1.0 - ab_cur);
    double sigma = 0.0;
    if (eta > 0 && t_prev >= 0) {
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) * std::sqrt(1.0 - ab_cur / ab_prev);
    }
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    double sq_prev = std::sqrt(ab_prev);
    for (int64_t i = 0; i < z.numel(); ++i) {
        double x0 = ((double)z[i] - sq1m_cur * (double)eps_hat[i]) / sq_cur;
        x0 = std::clamp(x0, -1.0, 1.0);
        double nz = (sigma > 0 && rng) ? rng->normal() : 0.0;
        z[i] = (T)(sq_prev * x0 + dir * (double)eps_hat[i] + sigma * nz);
    }
}

// Full reverse-process sampler. `seed` fixes all stochasticity (initial noise
// and, for the ancestral sampler, the per-step noise). Output stays in model
// space ([-1, 1] data range).
template <typename T>
Tensor<T> sample_loop(const EpsFn<T>& eps_cond, const EpsFn<T>& eps_uncond, std::vector<int> shape,
                      const NoiseSchedule& sched, const GuidanceConfig& g, uint64_t seed) {
    if (g.steps > sched.steps) throw std::invalid_argument("sample_loop: steps > T");
    Rng rng(seed);
    Rng init = rng.fork("init_noise");
    Rng step_noise = rng.fork("step_noise");
    Tensor<T> z(shape);
    init.fill_normal(z);
    double eta = g.sampler_kind == SamplerKind::ancestral_ddpm ? 1.0 : 0.0;
    std::vector<int> ts = substep_schedule(sched.steps, g.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        int t_cur = ts[i];
        int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
        Tensor<T> eps_hat = guided_epsilon<T>(eps_cond, eps_uncond, z, t_cur, g.scale);
        reverse_step(z, eps_hat, t_cur, t_prev, sched, eta, &step_noise);
    }
    return z;
}

}  // namespace idfuse
