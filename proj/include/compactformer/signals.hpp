#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "compactformer/rng.hpp"
#include "compactformer/tensor.hpp"

namespace cf::signals {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;
inline constexpr std::size_t kDefaultLength = 500;

enum class SignalId {
    sine,
    cosine_trend,
    exp_decay_sine,
    poly2,
    log_sine,
    gaussian_bump,
    long_sine,
    cubic,
    exp_growth,
    cos_envelope_sine,
};

inline const std::vector<SignalId>& all_signals() {
    static const std::vector<SignalId> ids = {
        SignalId::sine,          SignalId::cosine_trend, SignalId::exp_decay_sine,
        SignalId::poly2,         SignalId::log_sine,     SignalId::gaussian_bump,
        SignalId::long_sine,     SignalId::cubic,        SignalId::exp_growth,
        SignalId::cos_envelope_sine,
    };
    return ids;
}

inline const char* to_string(SignalId id) {
    switch (id) {
        case SignalId::sine: return "sine";
        case SignalId::cosine_trend: return "cosine_trend";
        case SignalId::exp_decay_sine: return "exp_decay_sine";
        case SignalId::poly2: return "poly2";
        case SignalId::log_sine: return "log_sine";
        case SignalId::gaussian_bump: return "gaussian_bump";
        case SignalId::long_sine: return "long_sine";
        case SignalId::cubic: return "cubic";
        case SignalId::exp_growth: return "exp_growth";
        case SignalId::cos_envelope_sine: return "cos_envelope_sine";
    }
    return "?";
}

inline SignalId signal_from_string(const std::string& s) {
    for (SignalId id : all_signals())
        if (s == to_string(id)) return id;
    throw std::invalid_argument("unknown signal id \"" + s + "\"");
}

struct Series {
    std::vector<double> values;
    SignalId id = SignalId::sine;
    bool noisy = false;
};

struct NoiseConfig {
    double sigma_add = 0.10;
    double sigma_mult = 0.08;
    double shift_prob = 0.10;
    int shift_range = 10;
    std::uint64_t seed = 0;
};

inline double eval_signal(SignalId id, double t) {
    switch (id) {
        case SignalId::sine: return std::sin(kTwoPi * t / 40.0);
        case SignalId::cosine_trend: return 0.01 * t + std::cos(kTwoPi * t / 50.0);
        case SignalId::exp_decay_sine: return std::exp(-0.01 * t) * std::sin(kTwoPi * t / 50.0);
        case SignalId::poly2: return 0.0001 * t * t - 0.03 * t + 3.0;
        case SignalId::log_sine: return std::log(1.0 + t) * std::sin(kTwoPi * t / 80.0);
        case SignalId::gaussian_bump: {
            const double z = t - 250.0;
            return std::exp(-z * z / (2.0 * 50.0 * 50.0));
        }
        case SignalId::long_sine: return std::sin(kTwoPi * t / 100.0);
        case SignalId::cubic: {
            const double z = t - 250.0;
            return 0.00001 * z * z * z + 0.05 * t;
        }
        case SignalId::exp_growth: return std::exp(0.005 * t);
        case SignalId::cos_envelope_sine:
            return (1.0 + 0.5 * std::cos(kTwoPi * t / 100.0)) * std::sin(kTwoPi * t / 30.0);
    }
    throw std::invalid_argument("unknown signal id");
}

inline Series generate(SignalId id, std::size_t T = kDefaultLength) {
    if (T < 1) throw std::invalid_argument("generate: T must be >= 1");
    Series s;
    s.id = id;
    s.values.resize(T);
    for (std::size_t t = 0; t < T; ++t) s.values[t] = eval_signal(id, static_cast<double>(t));
    return s;
}

/// Applies, in order: additive Gaussian noise, multiplicative amplitude
/// jitter, then (with probability shift_prob) one global integer shift with
/// edge replication. Deterministic per seed.
inline Series add_noise(const Series& in, const NoiseConfig& cfg) {
    Rng rng(cfg.seed);
    Series out = in;
    out.noisy = true;
    const std::size_t T = out.values.size();
    for (auto& x : out.values) x += cfg.sigma_add * rng.normal();
    for (auto& x : out.values) x *= 1.0 + cfg.sigma_mult * rng.normal();
    if (rng.uniform() < cfg.shift_prob) {
        const auto dt = rng.uniform_int(-cfg.shift_range, cfg.shift_range);
        std::vector<double> shifted(T);
        for (std::size_t t = 0; t < T; ++t) {
            auto src = static_cast<std::int64_t>(t) + dt;
            src = std::clamp<std::int64_t>(src, 0, static_cast<std::int64_t>(T) - 1);
            shifted[t] = out.values[static_cast<std::size_t>(src)];
        }
        out.values = std::move(shifted);
    }
    return out;
}

/// Min-max to [0,1]; a constant series maps to all zeros.
inline Series normalize(const Series& in) {
    Series out = in;
    const auto [mn_it, mx_it] = std::minmax_element(out.values.begin(), out.values.end());
    const double mn = *mn_it, mx = *mx_it;
    if (mx == mn) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    const double inv = 1.0 / (mx - mn);
    for (auto& x : out.values) x = (x - mn) * inv;
    return out;
}

/// Supervised windows: inputs[i] = x[i..i+P), targets[i] = x[i+P..i+P+H).
struct SeriesDataset {
    Tensor inputs;   // [N, P]
    Tensor targets;  // [N, H]
    std::size_t P = 0;
    std::size_t H = 0;
};

inline SeriesDataset window(const std::vector<double>& values, std::size_t P, std::size_t H) {
    const std::size_t T = values.size();
    if (T < P + H)
        throw std::invalid_argument("window: series length " + std::to_string(T) +
                                    " < required minimum P+H = " + std::to_string(P + H));
    const std::size_t N = T - P - H + 1;
    SeriesDataset ds;
    ds.P = P;
    ds.H = H;
    ds.inputs = Tensor({N, P});
    ds.targets = Tensor({N, H});
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < P; ++j) ds.inputs.at(i, j) = values[i + j];
        for (std::size_t j = 0; j < H; ++j) ds.targets.at(i, j) = values[i + P + j];
    }
    return ds;
}

inline SeriesDataset window(const Series& s, std::size_t P, std::size_t H) {
    return window(s.values, P, H);
}

}  // namespace cf::signals
