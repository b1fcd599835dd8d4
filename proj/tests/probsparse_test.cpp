#include <cmath>

#include <gtest/gtest.h>

#include "compactformer/probsparse.hpp"
#include "test_util.hpp"

using namespace cf;
using namespace cf::sparse;
using testutil::fd_check;
using testutil::random_tensor;

TEST(SparsityScore, IdenticalKeysGiveZero) {
    Rng rng(1);
    const Tensor q = random_tensor({4, 3}, rng);
    Tensor k({5, 3});
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t p = 0; p < 3; ++p) k.at(j, p) = 0.3 * static_cast<double>(p) - 0.1;
    for (double m : sparsity_score(q, k, 1.0 / std::sqrt(3.0))) EXPECT_NEAR(m, 0.0, 1e-12);
}

TEST(SparsityScore, HandDotProducts) {
    const Tensor q({1, 2}, {1, 0});
    const Tensor k({2, 2}, {1, 0, -1, 0});
    const auto m = sparsity_score(q, k, 1.0);
    EXPECT_DOUBLE_EQ(m[0], 1.0);
}

TEST(SparsityScore, InvariantUnderKeyDuplication) {
    Rng rng(2);
    const Tensor q = random_tensor({3, 4}, rng);
    const Tensor k = random_tensor({5, 4}, rng);
    Tensor k2({10, 4});
    for (std::size_t j = 0; j < 10; ++j)
        for (std::size_t p = 0; p < 4; ++p) k2.at(j, p) = k.at(j % 5, p);
    const auto a = sparsity_score(q, k, 0.5);
    const auto b = sparsity_score(q, k2, 0.5);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SparsityScore, NonNegative) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor q = random_tensor({6, 5}, rng, -2.0, 2.0);
        const Tensor k = random_tensor({7, 5}, rng, -2.0, 2.0);
        for (double m : sparsity_score(q, k, 1.0 / std::sqrt(5.0))) EXPECT_GE(m, 0.0);
    }
}

TEST(SelectTopU, FullSelection) {
    const auto idx = select_top_u({0.3, 0.1, 0.2}, 3);
    EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(SelectTopU, PicksLargest) {
    const auto idx = select_top_u({0.1, 0.9, 0.5}, 1);
    EXPECT_EQ(idx, (std::vector<std::size_t>{1}));
}

TEST(SelectTopU, TiesGoToLowerIndex) {
    const auto idx = select_top_u({0.5, 0.5, 0.5}, 2);
    EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectTopU, OutOfRangeThrows) {
    EXPECT_THROW(select_top_u({0.1, 0.2}, 0), std::invalid_argument);
    EXPECT_THROW(select_top_u({0.1, 0.2}, 3), std::invalid_argument);
}

TEST(DefaultU, MatchesFormula) {
    EXPECT_EQ(default_u(64, 64, 5.0), 21u);  // ceil(5 ln 64)
    EXPECT_EQ(default_u(32, 32, 5.0), 18u);
    EXPECT_EQ(default_u(4, 4, 5.0), 4u);   // clamped to L_Q
    EXPECT_EQ(default_u(8, 1, 5.0), 1u);   // ln 1 = 0, still one active query
}

TEST(LazyMode, InvalidNameThrows) {
    EXPECT_THROW(lazy_mode_from_string("bogus"), std::invalid_argument);
    EXPECT_EQ(lazy_mode_from_string("mean"), LazyMode::mean);
    EXPECT_EQ(lazy_mode_from_string("topk"), LazyMode::topk);
}

TEST(ProbsparseAttention, DegenerateSelectionEqualsFullAttentionBitwise) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t L = 1 + static_cast<std::size_t>(rng.uniform_int(1, 16));
        const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_int(1, 8));
        const Tensor q = random_tensor({2, L, d}, rng);
        const Tensor k = random_tensor({2, L, d}, rng);
        const Tensor v = random_tensor({2, L, d}, rng);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        for (auto mode : {LazyMode::mean, LazyMode::topk}) {
            Tape t;
            const int qf = t.leaf(q), kf = t.leaf(k), vf = t.leaf(v);
            const auto& full = t.val(t.attention(qf, kf, vf, scale));
            const auto& ps = t.val(probsparse_attention(t, qf, kf, vf, L, mode, scale));
            ASSERT_EQ(full.data, ps.data);  // bit-identical
        }
    }
}

TEST(ProbsparseAttention, MeanModeWithEqualValueRows) {
    Rng rng(5);
    const std::size_t L = 8, d = 4, u = 2;
    const Tensor q = random_tensor({1, L, d}, rng);
    const Tensor k = random_tensor({1, L, d}, rng);
    Tensor v({1, L, d});
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < d; ++j) v.at(0, l, j) = 0.25 * static_cast<double>(j) - 0.5;
    Tape t;
    const auto& out =
        t.val(probsparse_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), u, LazyMode::mean, 0.5));
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out.at(0, i, j), v.at(0, 0, j), 1e-12);
}

TEST(ProbsparseAttention, ActiveRowsAreBitwiseFullAttentionRows) {
    Rng rng(6);
    const std::size_t L = 12, d = 4, u = 3;
    const Tensor q = random_tensor({1, L, d}, rng);
    const Tensor k = random_tensor({1, L, d}, rng);
    const Tensor v = random_tensor({1, L, d}, rng);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tape t;
    const int qf = t.leaf(q), kf = t.leaf(k), vf = t.leaf(v);
    const auto& full = t.val(t.attention(qf, kf, vf, scale));
    const auto& ps = t.val(probsparse_attention(t, qf, kf, vf, u, LazyMode::topk, scale));
    Tensor q2({L, d}, q.data), k2({L, d}, k.data);
    const auto active = select_top_u(sparsity_score(q2, k2, scale), u);
    for (std::size_t i : active)
        for (std::size_t j = 0; j < d; ++j)
            ASSERT_EQ(ps.at(0, i, j), full.at(0, i, j)) << "row " << i;
}

TEST(OpCounter, FullAttentionIsExactlyLSquared) {
    Rng rng(7);
    const std::size_t L = 16, d = 4;
    Tape t;
    OpCounter counter;
    t.attention(t.leaf(random_tensor({1, L, d}, rng)), t.leaf(random_tensor({1, L, d}, rng)),
                t.leaf(random_tensor({1, L, d}, rng)), 0.5, &counter);
    EXPECT_EQ(counter.dot_products, static_cast<long long>(L * L));
}

TEST(OpCounter, TopkModeRespectsBound) {
    Rng rng(8);
    const std::size_t L = 64, d = 8;
    const std::size_t u = default_u(L, L, 5.0);
    EXPECT_EQ(u, 21u);
    Tape t;
    OpCounter counter;
    probsparse_attention(t, t.leaf(random_tensor({1, L, d}, rng)),
                         t.leaf(random_tensor({1, L, d}, rng)),
                         t.leaf(random_tensor({1, L, d}, rng)), u, LazyMode::topk, 0.35,
                         &counter);
    const long long bound = static_cast<long long>(u * L + (L - u) * u);
    EXPECT_EQ(bound, 2247);
    EXPECT_LE(counter.dot_products, bound);
    EXPECT_LT(counter.dot_products, static_cast<long long>(L * L));
}

TEST(OpCounter, SubQuadraticTrend) {
    Rng rng(9);
    double prev_ratio = 1e300;
    std::vector<double> normalized;
    for (const std::size_t L : {32u, 64u, 128u, 256u}) {
        Tape t;
        OpCounter counter;
        const std::size_t u = default_u(L, L, 5.0);
        probsparse_attention(t, t.leaf(random_tensor({1, L, 8}, rng)),
                             t.leaf(random_tensor({1, L, 8}, rng)),
                             t.leaf(random_tensor({1, L, 8}, rng)), u, LazyMode::topk,
                             1.0 / std::sqrt(8.0), &counter);
        EXPECT_LE(counter.dot_products, static_cast<long long>(u * L + (L - u) * u));
        const double ratio =
            static_cast<double>(counter.dot_products) / static_cast<double>(L * L);
        EXPECT_LT(ratio, prev_ratio);
        prev_ratio = ratio;
        normalized.push_back(static_cast<double>(counter.dot_products) /
                             (static_cast<double>(L) * std::log(static_cast<double>(L))));
    }
    const auto [lo, hi] = std::minmax_element(normalized.begin(), normalized.end());
    EXPECT_LT(*hi / *lo, 2.0);  // O(L log L) band
}

TEST(ProbsparseAttention, GradientsMatchFiniteDifferences) {
    Rng rng(10);
    const std::size_t L = 6, d = 3, u = 2;
    for (auto mode : {LazyMode::mean, LazyMode::topk}) {
        const Tensor w = random_tensor({1, L, d}, rng);
        const auto rep = fd_check(
            [&, mode](Tape& t, const std::vector<int>& v) {
                const int out = probsparse_attention(t, v[0], v[1], v[2], u, mode, 0.6);
                return t.mean_all(t.mul(out, v[3]));
            },
            {random_tensor({1, L, d}, rng), random_tensor({1, L, d}, rng),
             random_tensor({1, L, d}, rng), w});
        EXPECT_LT(rep.max_rel_err, 1e-6) << to_string(mode);
    }
}
