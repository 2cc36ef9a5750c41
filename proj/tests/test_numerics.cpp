#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tupate/numerics.hpp"

namespace tupate {
namespace {

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), Error);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_TRUE(t.all_finite());
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  const auto x = randn<float>({3, 4}, 1.0, rng);
  EXPECT_TRUE(bit_identical(matmul(eye, x), x));
}

TEST(Matmul, HandExample) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  const auto c = matmul(a, b);
  ASSERT_EQ(c.dims(), (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(c[0], 17.0f);
  EXPECT_EQ(c[1], 39.0f);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = randn<float>({4, 5}, 1.0, rng);
    const auto b = randn<float>({5, 3}, 1.0, rng);
    const auto c = matmul(a, b);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double ref = 0.0;
        for (std::size_t t = 0; t < 5; ++t) ref += static_cast<double>(a[i * 5 + t]) * b[t * 3 + j];
        EXPECT_NEAR(c[i * 3 + j], ref, 1e-6 * std::max(1.0, std::abs(ref)));
      }
    }
  }
}

TEST(Matmul, DimensionMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), Error);
}

TEST(Softmax, Examples) {
  const auto a = softmax(Tensor({2}, {0, 0}));
  EXPECT_FLOAT_EQ(a[0], 0.5f);
  EXPECT_FLOAT_EQ(a[1], 0.5f);
  const auto b = softmax(Tensor({2}, {1000, 1000}));
  EXPECT_FLOAT_EQ(b[0], 0.5f);
  EXPECT_FLOAT_EQ(b[1], 0.5f);
  const auto c = softmax(Tensor({3}, {1, 2, 3}));
  EXPECT_NEAR(c[0], 0.09003, 5e-6);
  EXPECT_NEAR(c[1], 0.24473, 5e-6);
  EXPECT_NEAR(c[2], 0.66524, 5e-6);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(3);
  const auto x = randn<float>({5, 7}, 3.0, rng);
  auto shifted = x;
  for (auto& v : shifted.data()) v += 12.5f;
  const auto s = softmax(x);
  const auto t = softmax(shifted);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      sum += s[r * 7 + c];
      EXPECT_NEAR(s[r * 7 + c], t[r * 7 + c], 1e-6);
      EXPECT_GE(s[r * 7 + c], 0.0f);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, ColumnAxis) {
  const auto s = softmax(Tensor({2, 2}, {0, 1, 0, 1}), 0);
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[3], 0.5f);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    (void)c;
  }
  EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
  EXPECT_EQ(Rng(5).derive("x").next_u64(), Rng(5).derive("x").next_u64());
  EXPECT_NE(Rng(5).derive("x").next_u64(), Rng(5).derive("y").next_u64());
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(4);
  const auto x = randn<float>({3, 16}, 2.0, rng);
  const Tensor g({16}, std::vector<float>(16, 1.0f));
  const Tensor b({16});
  const auto y = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 16, 1.0, 1e-3);
  }
}

TEST(Gelu, DerivativeMatchesDifferences) {
  for (double x : {-2.0, -0.5, 0.0, 0.7, 3.0}) {
    const double h = 1e-5;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-7);
  }
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  Tensor p({3}, {1.0f, -2.0f, 0.5f});
  const Tensor before = p;
  const Tensor g({3});
  AdamState<float> st(AdamConfig{.lr = 0.1});
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  for (int i = 0; i < 5; ++i) adam_step<float>(ps, gs, st);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], before[i], 1e-12);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  Tensor p({1}, {1.0f});
  Tensor g({1}, {2.0f});
  AdamState<float> st(AdamConfig{.lr = 0.01});
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  adam_step<float>(ps, gs, st);
  const float m1 = st.m[0][0], v1 = st.v[0][0];
  g[0] = 0.0f;
  adam_step<float>(ps, gs, st);
  EXPECT_NEAR(st.m[0][0], 0.9f * m1, 1e-7);
  EXPECT_NEAR(st.v[0][0], 0.999f * v1, 1e-7);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias-corrected first moments equal g and sqrt(v) equals |g|.
  Tensor p({3}, {0.0f, 0.0f, 0.0f});
  const Tensor g({3}, {0.3f, -4.0f, 1e-3f});
  AdamState<float> st(AdamConfig{.lr = 0.01});
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  adam_step<float>(ps, gs, st);
  for (std::size_t i = 0; i < 3; ++i) {
    const double expect = -0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], expect, 1e-7);
  }
}

TEST(Adam, QuadraticDecreasesMonotonically) {
  Tensor x({1}, {1.0f});
  Tensor g({1});
  AdamState<float> st(AdamConfig{.lr = 0.05});
  Tensor* ps[] = {&x};
  const Tensor* gs[] = {&g};
  double prev = x[0] * x[0];
  for (int i = 0; i < 10; ++i) {
    g[0] = 2.0f * x[0];
    adam_step<float>(ps, gs, st);
    const double f = static_cast<double>(x[0]) * x[0];
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(Adam, ShapeMismatch) {
  Tensor p({2});
  const Tensor g({3});
  AdamState<float> st;
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  EXPECT_THROW(adam_step<float>(ps, gs, st), Error);
}

TEST(FiniteDiff, LinearIsExact) {
  const std::size_t coords[] = {0, 1, 2};
  const double e = finite_diff_check(
      [](std::span<const double> x) { return 3 * x[0] - 2 * x[1] + 0.5 * x[2] + 1; },
      [](std::span<const double>) { return std::vector<double>{3, -2, 0.5}; }, {0.1, 0.2, 0.3}, coords);
  EXPECT_LT(e, 1e-9);
}

TEST(FiniteDiff, ProductAtTwoThree) {
  const std::size_t coords[] = {0, 1};
  const double e = finite_diff_check([](std::span<const double> x) { return x[0] * x[1]; },
                                     [](std::span<const double> x) { return std::vector<double>{x[1], x[0]}; },
                                     {2.0, 3.0}, coords);
  EXPECT_LT(e, 1e-9);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  const std::size_t coords[] = {0};
  const double e = finite_diff_check([](std::span<const double> x) { return x[0] * x[0]; },
                                     [](std::span<const double> x) { return std::vector<double>{x[0]}; }, {1.0},
                                     coords);
  EXPECT_NEAR(e, 1.0, 1e-6);
}

TEST(FiniteDiff, NonFiniteObjective) {
  const std::size_t coords[] = {0};
  EXPECT_THROW(finite_diff_check([](std::span<const double>) { return std::nan(""); },
                                 [](std::span<const double>) { return std::vector<double>{0.0}; }, {1.0}, coords),
               Error);
}

}  // namespace
}  // namespace tupate
