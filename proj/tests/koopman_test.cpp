#include <cmath>

#include <gtest/gtest.h>

#include "compactformer/dynsys.hpp"
#include "compactformer/koopman.hpp"
#include "test_util.hpp"

using namespace cf;
using namespace cf::koop;
using testutil::gram_schmidt_q;
using testutil::power_iteration_norm;
using testutil::random_tensor;

namespace {

double max_abs_qtq_minus_i(const Tensor& q) {
    const std::size_t n = q.shape[0];
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) acc += q.at(p, i) * q.at(p, j);
            worst = std::max(worst, std::abs(acc - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

}  // namespace

TEST(Householder, IdentityStaysIdentity) {
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    const auto qr = householder_qr(eye);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_NEAR(qr.Q.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Householder, OrthogonalityContract) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto qr = householder_qr(random_tensor({16, 16}, rng));
        EXPECT_LT(max_abs_qtq_minus_i(qr.Q), 1e-10);
    }
}

TEST(Householder, NonNegativeDiagonalConvention) {
    Rng rng(2);
    const auto qr = householder_qr(random_tensor({8, 8}, rng));
    for (std::size_t i = 0; i < 8; ++i) EXPECT_GT(qr.R.at(i, i), 0.0);
}

TEST(Householder, MatchesGramSchmidtOracle) {
    Rng rng(3);
    const Tensor a = random_tensor({16, 16}, rng);
    const auto qr = householder_qr(a);
    const Tensor ref = gram_schmidt_q(a);  // same sign convention
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(qr.Q[i], ref[i], 1e-8);
}

TEST(Householder, RankDeficientThrows) {
    Tensor a({3, 3});
    a.at(0, 0) = 1.0;
    a.at(1, 1) = 1.0;  // third column zero
    EXPECT_THROW(householder_qr(a), std::invalid_argument);
}

TEST(Householder, GradientMatchesFiniteDifferences) {
    Rng rng(4);
    const Tensor w = random_tensor({5, 5}, rng);
    const auto rep = testutil::fd_check(
        [&](Tape& t, const std::vector<int>& v) {
            return t.mean_all(t.mul(householder_orthogonalize(t, v[0]), v[1]));
        },
        {random_tensor({5, 5}, rng), w});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(KoopmanMatrix, ZeroRawSingularValuesAreHalfOf99) {
    Rng rng(5);
    auto op = make_operator(6, rng);  // S_raw zero-initialized
    EXPECT_DOUBLE_EQ(max_singular_value(op), 0.495);
    const Tensor k = koopman_matrix(op);
    EXPECT_NEAR(power_iteration_norm(k), 0.495, 1e-9);
}

TEST(KoopmanMatrix, SpectralNormBounded) {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        auto op = make_operator(16, rng);
        for (auto& s : op.S_raw.data) s = rng.uniform(-4.0, 4.0);
        const Tensor k = koopman_matrix(op);
        EXPECT_LE(power_iteration_norm(k), 0.99 + 1e-9);
        const auto u = householder_qr(op.U_raw);
        const auto v = householder_qr(op.V_raw);
        EXPECT_LT(max_abs_qtq_minus_i(u.Q), 1e-10);
        EXPECT_LT(max_abs_qtq_minus_i(v.Q), 1e-10);
    }
}

TEST(KoopmanMatrix, RepeatedApplicationContracts) {
    Rng rng(7);
    auto op = make_operator(16, rng);
    for (auto& s : op.S_raw.data) s = rng.uniform(-3.0, 3.0);
    const Tensor k = koopman_matrix(op);
    std::vector<double> x(16), y(16);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    double x0_norm = 0.0;
    for (double v : x) x0_norm += v * v;
    x0_norm = std::sqrt(x0_norm);
    for (int step = 0; step < 20; ++step) {
        for (std::size_t i = 0; i < 16; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 16; ++j) acc += k.at(i, j) * x[j];
            y[i] = acc;
        }
        x = y;
    }
    double xn = 0.0;
    for (double v : x) xn += v * v;
    xn = std::sqrt(xn);
    EXPECT_LE(xn / x0_norm, std::pow(0.99, 20) + 1e-9);
}

TEST(KoopmanMatrix, TapeVersionMatchesPlainVersion) {
    Rng rng(8);
    auto op = make_operator(8, rng);
    for (auto& s : op.S_raw.data) s = rng.uniform(-2.0, 2.0);
    const Tensor plain = koopman_matrix(op);
    Tape t;
    const auto kv = koopman_matrix(t, t.leaf(op.U_raw), t.leaf(op.V_raw), t.leaf(op.S_raw));
    for (std::size_t i = 0; i < plain.size(); ++i)
        EXPECT_NEAR(t.val(kv.K)[i], plain[i], 1e-14);
}

TEST(LyapunovLoss, KnownCases) {
    Tape t;
    Rng rng(9);
    const Tensor z = random_tensor({3, 4}, rng);
    EXPECT_DOUBLE_EQ(t.val(lyapunov_loss(t, t.leaf(z), t.leaf(z)))[0], 0.0);

    Tensor smaller = z;
    for (auto& v : smaller.data) v *= 0.5;
    EXPECT_DOUBLE_EQ(t.val(lyapunov_loss(t, t.leaf(z), t.leaf(smaller)))[0], 0.0);

    const Tensor zt({1, 2}, {1, 0});
    const Tensor zn({1, 2}, {2, 0});
    EXPECT_DOUBLE_EQ(t.val(lyapunov_loss(t, t.leaf(zt), t.leaf(zn)))[0], 3.0);
}

TEST(KoopformerForward, DecoderWidthMatchesHorizonTimesState) {
    KoopformerConfig cfg;
    cfg.P = 8;
    cfg.H = 5;
    cfg.d_state = 2;
    auto m = build_koopformer(cfg, 10);
    EXPECT_EQ(m.W_dec.shape, (Shape{16, 10}));  // 5 steps x 2 states
    Rng rng(11);
    Tape t;
    auto fwd = koopformer_forward(t, m, random_tensor({3, 8, 2}, rng, 0.0, 1.0));
    EXPECT_EQ(t.val(fwd.y).shape, (Shape{3, 5, 2}));
}

TEST(KoopformerForward, ZeroDecoderGivesZeroForecast) {
    KoopformerConfig cfg;
    cfg.P = 6;
    auto m = build_koopformer(cfg, 12);
    for (auto& v : m.W_dec.data) v = 0.0;
    for (auto& v : m.b_dec.data) v = 0.0;
    Rng rng(13);
    Tape t;
    auto fwd = koopformer_forward(t, m, random_tensor({2, 6, 2}, rng, 0.0, 1.0));
    for (double v : t.val(fwd.y).data) EXPECT_EQ(v, 0.0);
}

TEST(KoopformerForward, LatentPropagationContracts) {
    KoopformerConfig cfg;
    cfg.P = 6;
    auto m = build_koopformer(cfg, 14);
    Rng rng(15);
    Tape t;
    auto fwd = koopformer_forward(t, m, random_tensor({4, 6, 2}, rng, 0.0, 1.0));
    const auto& zt = t.val(fwd.z_t);
    const auto& zn = t.val(fwd.z_next);
    for (std::size_t b = 0; b < 4; ++b) {
        double nt = 0.0, nn = 0.0;
        for (std::size_t j = 0; j < 16; ++j) {
            nt += zt.at(b, j) * zt.at(b, j);
            nn += zn.at(b, j) * zn.at(b, j);
        }
        EXPECT_LE(std::sqrt(nn), 0.99 * std::sqrt(nt) + 1e-12);
    }
}

TEST(KoopformerLoss, LambdaZeroIsPureMse) {
    KoopformerConfig cfg;
    cfg.P = 6;
    auto m = build_koopformer(cfg, 16);
    Rng rng(17);
    Tape t;
    auto fwd = koopformer_forward(t, m, random_tensor({2, 6, 2}, rng, 0.0, 1.0));
    const int target = t.leaf(random_tensor({2, 5, 2}, rng, 0.0, 1.0));
    const auto lb = koopformer_loss(t, fwd, target, 0.0);
    EXPECT_DOUBLE_EQ(t.val(lb.total)[0], t.val(lb.mse)[0]);
    EXPECT_GE(t.val(lb.mse)[0], 0.0);
    EXPECT_GE(t.val(lb.lyapunov)[0], 0.0);
}

TEST(KoopformerLoss, PerfectContractivePredictionIsZero) {
    KoopformerConfig cfg;
    cfg.P = 6;
    auto m = build_koopformer(cfg, 18);
    for (auto& v : m.W_dec.data) v = 0.0;
    for (auto& v : m.b_dec.data) v = 0.0;
    Rng rng(19);
    Tape t;
    auto fwd = koopformer_forward(t, m, random_tensor({2, 6, 2}, rng, 0.0, 1.0));
    const int target = t.leaf(Tensor({2, 5, 2}));
    const auto lb = koopformer_loss(t, fwd, target, 0.1);
    EXPECT_DOUBLE_EQ(t.val(lb.total)[0], 0.0);
}

// Full loss gradient through Householder and the sigmoid clamp on a tiny
// instance: every parameter element against central differences.
TEST(KoopformerLoss, FullGradientMatchesFiniteDifferences) {
    KoopformerConfig cfg;
    cfg.P = 4;
    cfg.H = 2;
    cfg.d_state = 2;
    cfg.d_model = 4;
    cfg.heads = 2;
    cfg.d_ff = 8;
    cfg.enc_layers = 1;
    cfg.d_latent = 4;
    auto m = build_koopformer(cfg, 20);
    Rng rng(21);
    const Tensor x = random_tensor({3, 4, 2}, rng, 0.0, 1.0);
    const Tensor y = random_tensor({3, 2, 2}, rng, 0.0, 1.0);

    Tape t;
    auto fwd = koopformer_forward(t, m, x);
    const auto lb = koopformer_loss(t, fwd, t.leaf(y), cfg.lambda);
    t.backward(lb.total);
    std::vector<Tensor> analytic;
    for (int id : fwd.leaf_ids) analytic.push_back(t.gradient(id));

    auto loss_at = [&]() {
        Tape t2;
        auto f2 = koopformer_forward(t2, m, x);
        return t2.val(koopformer_loss(t2, f2, t2.leaf(y), cfg.lambda).total)[0];
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < fwd.params.size(); ++pi) {
        Tensor& p = *fwd.params[pi];
        for (std::size_t ei = 0; ei < p.size(); ++ei) {
            const double orig = p[ei];
            p[ei] = orig + h;
            const double up = loss_at();
            p[ei] = orig - h;
            const double dn = loss_at();
            p[ei] = orig;
            worst = std::max(worst, testutil::rel_err(analytic[pi][ei], (up - dn) / (2 * h)));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Train, SpectralTraceNeverExceedsBound) {
    dynsys::VdpConfig sim;
    sim.seed = 5;
    const auto states = dynsys::minmax_normalize(dynsys::simulate(sim).states);
    const auto w = window_states(states, 16, 5);
    KoopformerConfig cfg;
    cfg.P = 16;
    auto m = build_koopformer(cfg, 22);
    const auto result = train_koopformer(m, w, 50, 1e-3, 16, 23);
    ASSERT_EQ(result.curve.size(), 50u);
    for (const auto& rec : result.curve) {
        EXPECT_LE(rec.max_singular_value, 0.99);
        EXPECT_GE(rec.mse, 0.0);
        EXPECT_GE(rec.lyapunov, 0.0);
    }
}

TEST(WindowStates, ShapesAndContent) {
    Tensor states({10, 2});
    for (std::size_t t = 0; t < 10; ++t) {
        states.at(t, 0) = static_cast<double>(t);
        states.at(t, 1) = 10.0 + static_cast<double>(t);
    }
    const auto w = window_states(states, 4, 2);
    EXPECT_EQ(w.inputs.shape, (Shape{5, 4, 2}));
    EXPECT_EQ(w.targets.shape, (Shape{5, 2, 2}));
    EXPECT_EQ(w.inputs.at(1, 0, 0), 1.0);
    EXPECT_EQ(w.targets.at(1, 0, 0), 5.0);
    EXPECT_EQ(w.targets.at(1, 1, 1), 16.0);
    EXPECT_THROW(window_states(states, 8, 4), std::invalid_argument);
}
