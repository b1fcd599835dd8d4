#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>

#include "compactformer/rng.hpp"
#include "compactformer/tensor.hpp"

namespace cf::dynsys {

struct VdpConfig {
    double mu = 1.0;
    double dt = 0.01;
    double T = 20.0;
    std::array<double, 2> x0{2.0, 0.0};
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;
};

struct LorenzConfig {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
    double dt = 0.01;
    double T = 20.0;
    std::array<double, 3> x0{1.0, 1.0, 1.0};
    double noise_sigma = 0.5;
    std::uint64_t seed = 0;
};

struct Trajectory {
    Tensor states;  // [N, d_state]
    double dt = 0.01;
};

/// Euler update z' = z + dt*f(z) + eta with f = (x2, mu(1-x1^2)x2 - x1).
/// Noise is per step, unscaled by dt, exactly as the discretized system is
/// written.
inline std::array<double, 2> vdp_step(const std::array<double, 2>& z, const VdpConfig& cfg,
                                      Rng& rng) {
    const double f1 = z[1];
    const double f2 = cfg.mu * (1.0 - z[0] * z[0]) * z[1] - z[0];
    return {z[0] + cfg.dt * f1 + cfg.noise_sigma * rng.normal(),
            z[1] + cfg.dt * f2 + cfg.noise_sigma * rng.normal()};
}

/// g = (sigma(x2-x1), x1(rho-x3)-x2, x1 x2 - beta x3).
inline std::array<double, 3> lorenz_step(const std::array<double, 3>& z, const LorenzConfig& cfg,
                                         Rng& rng) {
    const double g1 = cfg.sigma * (z[1] - z[0]);
    const double g2 = z[0] * (cfg.rho - z[2]) - z[1];
    const double g3 = z[0] * z[1] - cfg.beta * z[2];
    return {z[0] + cfg.dt * g1 + cfg.noise_sigma * rng.normal(),
            z[1] + cfg.dt * g2 + cfg.noise_sigma * rng.normal(),
            z[2] + cfg.dt * g3 + cfg.noise_sigma * rng.normal()};
}

template <typename Config, std::size_t D>
Trajectory simulate_impl(const Config& cfg, const std::array<double, D>& x0,
                         std::array<double, D> (*step)(const std::array<double, D>&,
                                                       const Config&, Rng&)) {
    if (cfg.dt <= 0.0) throw std::invalid_argument("simulate: dt must be positive");
    const auto N = static_cast<std::size_t>(cfg.T / cfg.dt + 0.5);
    Rng rng(cfg.seed);
    Trajectory traj;
    traj.dt = cfg.dt;
    traj.states = Tensor({N, D});
    std::array<double, D> z = x0;
    for (std::size_t j = 0; j < D; ++j) traj.states.at(0, j) = z[j];
    for (std::size_t t = 1; t < N; ++t) {
        z = step(z, cfg, rng);
        for (std::size_t j = 0; j < D; ++j) traj.states.at(t, j) = z[j];
    }
    return traj;
}

inline Trajectory simulate(const VdpConfig& cfg) { return simulate_impl(cfg, cfg.x0, vdp_step); }
inline Trajectory simulate(const LorenzConfig& cfg) {
    return simulate_impl(cfg, cfg.x0, lorenz_step);
}

/// Per-dimension min-max normalization to [0,1]; constant dims map to zero.
inline Tensor minmax_normalize(const Tensor& states) {
    const std::size_t N = states.shape[0], D = states.shape[1];
    Tensor out({N, D});
    for (std::size_t j = 0; j < D; ++j) {
        double mn = states.at(0, j), mx = states.at(0, j);
        for (std::size_t t = 1; t < N; ++t) {
            mn = std::min(mn, states.at(t, j));
            mx = std::max(mx, states.at(t, j));
        }
        const double inv = (mx > mn) ? 1.0 / (mx - mn) : 0.0;
        for (std::size_t t = 0; t < N; ++t) out.at(t, j) = (states.at(t, j) - mn) * inv;
    }
    return out;
}

}  // namespace cf::dynsys
