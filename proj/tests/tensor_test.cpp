#include <cmath>

#include <gtest/gtest.h>

#include "compactformer/optim.hpp"
#include "compactformer/tape.hpp"
#include "compactformer/tensor.hpp"
#include "test_util.hpp"

using namespace cf;
using testutil::fd_check;
using testutil::matmul_oracle;
using testutil::random_tensor;

TEST(Tensor, ShapeInvariant) {
    EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
}

TEST(Matmul, IdentityCase) {
    Tape t;
    const int i2 = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    const int a = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    const auto& out = t.val(t.matmul(i2, a));
    EXPECT_EQ(out.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, BasisSelection) {
    Tape t;
    const int a = t.leaf(Tensor({1, 2}, {1, 0}));
    const int b = t.leaf(Tensor({2, 1}, {0, 5}));
    EXPECT_DOUBLE_EQ(t.val(t.matmul(a, b))[0], 0.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(11);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    Tape t;
    const auto& got = t.val(t.matmul(t.leaf(a), t.leaf(b)));
    const Tensor want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape t;
    const int a = t.leaf(Tensor({2, 3}));
    const int b = t.leaf(Tensor({4, 2}));
    try {
        t.matmul(a, b);
        FAIL() << "expected dimension error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(Softmax, UniformOnZeroRow) {
    Tape t;
    const auto& out = t.val(t.softmax_rows(t.leaf(Tensor({1, 4}))));
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeValuesDoNotOverflow) {
    Tape t;
    const auto& out = t.val(t.softmax_rows(t.leaf(Tensor({1, 2}, {1000, 1000}))));
    EXPECT_DOUBLE_EQ(out[0], 0.5);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, HandEvaluatedRow) {
    Tape t;
    const auto& out = t.val(t.softmax_rows(t.leaf(Tensor({1, 2}, {0.0, std::log(3.0)}))));
    EXPECT_NEAR(out[0], 0.25, 1e-12);
    EXPECT_NEAR(out[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    Rng rng(5);
    const Tensor x = random_tensor({6, 9}, rng, -3.0, 3.0);
    Tensor shifted = x;
    const double c = 17.25;
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 9; ++j) shifted.at(r, j) += c;
    Tape t;
    const auto& a = t.val(t.softmax_rows(t.leaf(x)));
    const auto& b = t.val(t.softmax_rows(t.leaf(shifted)));
    for (std::size_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 9; ++j) sum += a.at(r, j);
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(LayerNorm, ConstantVectorGoesToZero) {
    Tape t;
    const int x = t.leaf(Tensor({1, 4}, {7, 7, 7, 7}));
    const int g = t.leaf(Tensor::filled({4}, 1.0));
    const int b = t.leaf(Tensor({4}));
    const auto& out = t.val(t.layer_norm(x, g, b));
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, HandMeanStd) {
    Tape t;
    const int x = t.leaf(Tensor({1, 2}, {1, 3}));
    const int g = t.leaf(Tensor::filled({2}, 1.0));
    const int b = t.leaf(Tensor({2}));
    const auto& out = t.val(t.layer_norm(x, g, b));
    EXPECT_NEAR(out[0], -1.0, 1e-3);
    EXPECT_NEAR(out[1], 1.0, 1e-3);
}

TEST(LayerNorm, BetaAddedVerbatim) {
    Tape t;
    const int x = t.leaf(Tensor({1, 2}, {1, 3}));
    const int g = t.leaf(Tensor::filled({2}, 1.0));
    const int b0 = t.leaf(Tensor({2}));
    const int b5 = t.leaf(Tensor({2}, {5, 5}));
    const auto& base = t.val(t.layer_norm(x, g, b0));
    const auto& shifted = t.val(t.layer_norm(x, g, b5));
    EXPECT_DOUBLE_EQ(shifted[0], base[0] + 5.0);
    EXPECT_DOUBLE_EQ(shifted[1], base[1] + 5.0);
}

TEST(Backward, SquareGradient) {
    Tape t;
    const int x = t.leaf(Tensor::scalar(3.0));
    const int loss = t.mul(x, x);
    t.backward(loss);
    EXPECT_DOUBLE_EQ(t.gradient(x)[0], 6.0);
}

TEST(Backward, MatmulSumMatchesFiniteDifferences) {
    Rng rng(21);
    const auto rep = fd_check(
        [](Tape& t, const std::vector<int>& ids) {
            return t.scale(t.mean_all(t.matmul(ids[0], ids[1])), 6.0);  // = sum for 2x3
        },
        {random_tensor({2, 3}, rng), random_tensor({3, 2}, rng)});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Backward, DisconnectedParameterHasExactZeroGradient) {
    Tape t;
    const int x = t.leaf(Tensor::scalar(3.0));
    const int unused = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    const int loss = t.mul(x, x);
    t.backward(loss);
    for (double v : t.gradient(unused).data) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape t;
    const int x = t.leaf(Tensor({2, 2}));
    EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Backward, Deterministic) {
    Rng rng(3);
    const Tensor a = random_tensor({4, 4}, rng);
    const Tensor b = random_tensor({4, 4}, rng);
    auto run = [&] {
        Tape t;
        const int ia = t.leaf(a), ib = t.leaf(b);
        const int loss = t.mean_all(t.relu(t.matmul(ia, ib)));
        t.backward(loss);
        return t.gradient(ia).data;
    };
    const auto g1 = run(), g2 = run();
    EXPECT_EQ(g1, g2);  // bit-identical
}

TEST(Backward, TapeNodesAreTopologicallyOrdered) {
    Rng rng(9);
    Tape t;
    const int a = t.leaf(random_tensor({2, 4}, rng));
    const int b = t.leaf(random_tensor({4, 3}, rng));
    const int c = t.matmul(a, b);
    t.mean_all(t.relu(c));
    for (std::size_t id = 0; id < t.size(); ++id)
        for (int in : t.node(static_cast<int>(id)).in)
            if (in >= 0) EXPECT_LT(in, static_cast<int>(id));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor p({3}, {1, 2, 3});
    AdamState st(3);
    adam_step(p, Tensor({3}), st);
    EXPECT_EQ(p.data, (std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepMagnitude) {
    Tensor p({1}, {0.0});
    AdamState st(1, 1e-3);
    adam_step(p, Tensor({1}, {0.5}), st);
    EXPECT_NEAR(std::abs(p[0]), 1e-3 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Adam, ScalarDescentConverges) {
    Tensor x({1}, {0.0});
    AdamState st(1, 0.1);
    for (int i = 0; i < 100; ++i) {
        const Tensor g({1}, {2.0 * (x[0] - 2.0)});
        adam_step(x, g, st);
    }
    EXPECT_LT(std::abs(x[0] - 2.0), 1e-2);
}

TEST(Adam, ShapeMismatchThrows) {
    Tensor p({2});
    AdamState st(2);
    EXPECT_THROW(adam_step(p, Tensor({3}), st), std::invalid_argument);
}

TEST(Mse, KnownValues) {
    Tape t;
    EXPECT_DOUBLE_EQ(t.val(t.mse(t.leaf(Tensor({2}, {1, 2})), t.leaf(Tensor({2}, {1, 2}))))[0],
                     0.0);
    EXPECT_DOUBLE_EQ(t.val(t.mse(t.leaf(Tensor({2}, {1, 1})), t.leaf(Tensor({2}, {0, 0}))))[0],
                     1.0);
    EXPECT_DOUBLE_EQ(t.val(t.mse(t.leaf(Tensor({2}, {0, 3})), t.leaf(Tensor({2}, {0, 0}))))[0],
                     4.5);
    EXPECT_THROW(t.mse(t.leaf(Tensor({2})), t.leaf(Tensor({3}))), std::invalid_argument);
}

// Every differentiable op against central finite differences on random
// inputs of magnitude <= 1.
TEST(GradientIntegrity, AllOpsMatchFiniteDifferences) {
    Rng rng(77);
    // weight applied to non-scalar outputs so every element matters
    auto weighted = [](Tape& t, int out, const Tensor& w) {
        return t.mean_all(t.mul(out, t.leaf(w)));
    };
    const Tensor w23 = random_tensor({2, 3}, rng);
    const Tensor w234 = random_tensor({2, 3, 4}, rng);
    const Tensor w24 = random_tensor({2, 4}, rng);
    const Tensor w22 = random_tensor({2, 2}, rng);
    const Tensor w232 = random_tensor({2, 3, 2}, rng);

    struct Case {
        const char* name;
        testutil::BuildFn build;
        std::vector<Tensor> inputs;
    };
    const std::vector<Case> cases = {
        {"add", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.add(v[0], v[1]), w23); },
         {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}},
        {"sub", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.sub(v[0], v[1]), w23); },
         {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}},
        {"mul", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.mul(v[0], v[1]), w23); },
         {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}},
        {"scale", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.scale(v[0], -1.7), w23); },
         {random_tensor({2, 3}, rng)}},
        {"relu", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.relu(v[0]), w23); },
         {random_tensor({2, 3}, rng, 0.1, 1.0)}},  // away from the kink
        {"relu_neg", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.relu(v[0]), w23); },
         {random_tensor({2, 3}, rng, -1.0, -0.1)}},
        {"sigmoid", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.sigmoid(v[0]), w23); },
         {random_tensor({2, 3}, rng)}},
        {"matmul", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.matmul(v[0], v[1]), w23); },
         {random_tensor({2, 4}, rng), random_tensor({4, 3}, rng)}},
        {"matmul_nt", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.matmul_nt(v[0], v[1]), w23); },
         {random_tensor({2, 4}, rng), random_tensor({3, 4}, rng)}},
        {"bmm_w", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.bmm_w(v[0], v[1]), w234); },
         {random_tensor({2, 3, 5}, rng), random_tensor({5, 4}, rng)}},
        {"add_bcast", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.add_bcast(v[0], v[1]), w234); },
         {random_tensor({2, 3, 4}, rng), random_tensor({3, 4}, rng)}},
        {"softmax_rows", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.softmax_rows(v[0]), w23); },
         {random_tensor({2, 3}, rng)}},
        {"layer_norm", [&](Tape& t, const std::vector<int>& v) {
             return weighted(t, t.layer_norm(v[0], v[1], v[2]), w23);
         },
         {random_tensor({2, 3}, rng), random_tensor({3}, rng, 0.5, 1.0), random_tensor({3}, rng)}},
        {"mean_tokens", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.mean_tokens(v[0]), w24); },
         {random_tensor({2, 3, 4}, rng)}},
        {"sum_last", [&](Tape& t, const std::vector<int>& v) { return weighted(t, t.sum_last(v[0]), w23); },
         {random_tensor({2, 3, 4}, rng)}},
        {"mse", [&](Tape& t, const std::vector<int>& v) { return t.mse(v[0], v[1]); },
         {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}},
        {"slice_concat", [&](Tape& t, const std::vector<int>& v) {
             const int left = t.slice_last(v[0], 0, 2);
             const int right = t.slice_last(v[0], 2, 2);
             const std::vector<int> parts{right, left};
             return weighted(t, t.concat_last(parts), w234);
         },
         {random_tensor({2, 3, 4}, rng)}},
        {"reshape", [&](Tape& t, const std::vector<int>& v) {
             return weighted(t, t.reshape(v[0], {2, 3}), w23);
         },
         {random_tensor({6}, rng)}},
        {"scale_cols", [&](Tape& t, const std::vector<int>& v) {
             return weighted(t, t.scale_cols(v[0], v[1]), w23);
         },
         {random_tensor({2, 3}, rng), random_tensor({3}, rng)}},
        {"attention", [&](Tape& t, const std::vector<int>& v) {
             return weighted(t, t.attention(v[0], v[1], v[2], 0.5), w232);
         },
         {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng),
          random_tensor({2, 5, 2}, rng)}},
    };
    for (const auto& c : cases) {
        const auto rep = fd_check(c.build, c.inputs);
        EXPECT_LT(rep.max_rel_err, 1e-6) << c.name;
    }
}
