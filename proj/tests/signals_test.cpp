#include <cmath>

#include <gtest/gtest.h>

#include "compactformer/signals.hpp"

using namespace cf;
using namespace cf::signals;

TEST(Generate, QuarterPeriodSine) {
    const auto s = generate(SignalId::sine, 500);
    EXPECT_NEAR(s.values[10], 1.0, 1e-12);
}

TEST(Generate, GaussianBumpPeak) {
    const auto s = generate(SignalId::gaussian_bump, 500);
    EXPECT_DOUBLE_EQ(s.values[250], 1.0);
}

TEST(Generate, ExponentialGrowthDirectEvaluation) {
    const auto s = generate(SignalId::exp_growth, 500);
    EXPECT_DOUBLE_EQ(s.values[0], 1.0);
    EXPECT_NEAR(s.values[200], 2.718282, 1e-6);
}

TEST(Generate, AllTenSignalsHaveDefaultLength) {
    for (auto id : all_signals()) {
        const auto s = generate(id);
        EXPECT_EQ(s.values.size(), 500u);
        for (double v : s.values) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Generate, UnknownIdThrows) {
    EXPECT_THROW(signal_from_string("triangle"), std::invalid_argument);
}

TEST(AddNoise, DegenerateConfigIsIdentity) {
    const auto s = generate(SignalId::log_sine, 100);
    NoiseConfig cfg;
    cfg.sigma_add = 0.0;
    cfg.sigma_mult = 0.0;
    cfg.shift_prob = 0.0;
    cfg.seed = 42;
    EXPECT_EQ(add_noise(s, cfg).values, s.values);
}

TEST(AddNoise, DeterministicPerSeed) {
    const auto s = generate(SignalId::cosine_trend, 500);
    NoiseConfig cfg;
    cfg.seed = 1234;
    const auto a = add_noise(s, cfg);
    const auto b = add_noise(s, cfg);
    EXPECT_EQ(a.values, b.values);
    cfg.seed = 1235;
    EXPECT_NE(add_noise(s, cfg).values, a.values);
}

TEST(AddNoise, AdditiveSigmaMonteCarlo) {
    Series zero;
    zero.values.assign(100000, 0.0);
    NoiseConfig cfg;
    cfg.sigma_add = 0.10;
    cfg.sigma_mult = 0.0;
    cfg.shift_prob = 0.0;
    cfg.seed = 7;
    const auto noisy = add_noise(zero, cfg);
    double mean = 0.0;
    for (double v : noisy.values) mean += v;
    mean /= static_cast<double>(noisy.values.size());
    double var = 0.0;
    for (double v : noisy.values) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(noisy.values.size() - 1));
    EXPECT_GE(sd, 0.098);
    EXPECT_LE(sd, 0.102);
}

TEST(AddNoise, ShiftEdgeReplicates) {
    Series ramp;
    for (int i = 0; i < 50; ++i) ramp.values.push_back(i);
    NoiseConfig cfg;
    cfg.sigma_add = 0.0;
    cfg.sigma_mult = 0.0;
    cfg.shift_prob = 1.0;  // always shift
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        cfg.seed = seed;
        const auto out = add_noise(ramp, cfg);
        // a shifted ramp stays a clamped ramp: monotone, within range
        for (std::size_t i = 1; i < out.values.size(); ++i)
            EXPECT_GE(out.values[i], out.values[i - 1]);
        EXPECT_GE(out.values.front(), 0.0);
        EXPECT_LE(out.values.back(), 49.0);
    }
}

TEST(Normalize, KnownTriple) {
    Series s;
    s.values = {2, 4, 6};
    const auto n = normalize(s);
    EXPECT_EQ(n.values, (std::vector<double>{0.0, 0.5, 1.0}));
}

TEST(Normalize, IdempotentOnUnitInterval) {
    Series s;
    s.values = {0.0, 0.25, 1.0};
    EXPECT_EQ(normalize(s).values, s.values);
}

TEST(Normalize, ConstantSeriesMapsToZeros) {
    Series s;
    s.values = {7, 7, 7};
    EXPECT_EQ(normalize(s).values, (std::vector<double>{0, 0, 0}));
}

TEST(Normalize, OrderPreserving) {
    const auto s = generate(SignalId::cos_envelope_sine, 500);
    const auto n = normalize(s);
    const auto argmax = [](const std::vector<double>& v) {
        return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
    };
    const auto argmin = [](const std::vector<double>& v) {
        return std::distance(v.begin(), std::min_element(v.begin(), v.end()));
    };
    EXPECT_EQ(argmax(n.values), argmax(s.values));
    EXPECT_EQ(argmin(n.values), argmin(s.values));
}

TEST(Window, CountFormula) {
    Series s;
    s.values.assign(10, 0.0);
    EXPECT_EQ(window(s, 4, 2).inputs.shape[0], 5u);
    Series longer;
    longer.values.assign(500, 0.0);
    EXPECT_EQ(window(longer, 20, 20).inputs.shape[0], 461u);
}

TEST(Window, IndexCheck) {
    Series s;
    for (int i = 0; i < 10; ++i) s.values.push_back(i);
    const auto ds = window(s, 4, 2);
    EXPECT_EQ(ds.inputs.at(0, 0), 0.0);
    EXPECT_EQ(ds.inputs.at(0, 3), 3.0);
    EXPECT_EQ(ds.targets.at(0, 0), 4.0);
    EXPECT_EQ(ds.targets.at(0, 1), 5.0);
}

TEST(Window, TooShortThrowsWithMinimum) {
    Series s;
    s.values.assign(5, 0.0);
    try {
        window(s, 4, 2);
        FAIL() << "expected error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("6"), std::string::npos) << e.what();
    }
}

// Reconstructing the series from overlapping windows reproduces it exactly
// for every signal and every default grid cell.
TEST(Window, OverlappingWindowsReconstructSeries) {
    const std::vector<std::size_t> patches{4, 8, 12, 16, 20};
    const std::vector<std::size_t> horizons{2, 4, 8, 12, 20};
    for (auto id : all_signals()) {
        const auto s = normalize(generate(id));
        for (auto P : patches)
            for (auto H : horizons) {
                const auto ds = window(s, P, H);
                const std::size_t N = ds.inputs.shape[0];
                for (std::size_t i = 0; i < N; ++i) {
                    for (std::size_t j = 0; j < P; ++j)
                        ASSERT_EQ(ds.inputs.at(i, j), s.values[i + j]);
                    for (std::size_t j = 0; j < H; ++j)
                        ASSERT_EQ(ds.targets.at(i, j), s.values[i + P + j]);
                }
            }
    }
}
