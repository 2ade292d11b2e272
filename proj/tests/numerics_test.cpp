#include <gtest/gtest.h>

#include <cmath>

#include "ditprobe/numerics.hpp"

using namespace ditprobe;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = Tensor::matrix({{1, 0}, {0, 1}});
  auto b = Tensor::matrix({{3, 4}, {5, 6}});
  EXPECT_EQ(matmul(eye, b), b);
}

TEST(Matmul, RowTimesColumn) {
  auto c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(3);
  auto b = rng_normal<double>(rng, {4, 5});
  auto c = matmul(Tensor({3, 4}), b);
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, DimensionMismatchIsContractViolation) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ContractViolation);
}

TEST(Matmul, AgreesWithTripleLoopOnRandomCases) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = rng_normal<double>(rng, {16, 16});
    auto b = rng_normal<double>(rng, {16, 16});
    auto fast = matmul(a, b);
    auto slow = naive_matmul(a, b);
    for (std::size_t i = 0; i < fast.size(); ++i)
      EXPECT_NEAR(fast[i], slow[i], 1e-12 * std::max(1.0, std::abs(slow[i])));
  }
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  Rng rng(12);
  auto a = rng_normal<double>(rng, {5, 7});
  auto b = rng_normal<double>(rng, {5, 3});
  auto c = rng_normal<double>(rng, {4, 7});
  Tensor atb, act;
  gemm(a, true, b, false, atb);
  gemm(a, false, c, true, act);
  auto ref1 = naive_matmul(transpose(a), b);
  auto ref2 = naive_matmul(a, transpose(c));
  EXPECT_LT(max_abs_diff(atb, ref1), 1e-12);
  EXPECT_LT(max_abs_diff(act, ref2), 1e-12);
}

TEST(Softmax, UniformInput) {
  auto s = softmax(Tensor({3}, {0, 0, 0}), 0);
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto s = softmax(Tensor({2}, {1000, 0}), 0);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
}

TEST(Softmax, LogInputsGiveProportions) {
  auto s = softmax(Tensor({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(s[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(s[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(s[2], 3.0 / 6.0, 1e-15);
}

TEST(Softmax, SlicesSumToOneOnRandomInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(9);
    auto x = rng_normal<double>(rng, {rows, cols});
    for (auto& v : x.storage()) v *= 20.0;
    const std::size_t axis = rng.below(2);
    auto s = softmax(x, axis);
    const std::size_t outer = axis == 0 ? cols : rows, len = axis == 0 ? rows : cols;
    for (std::size_t o = 0; o < outer; ++o) {
      double sum = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const double v = axis == 0 ? s(l, o) : s(o, l);
        EXPECT_GT(v, 0.0 - 1e-300);
        sum += v;
      }
      ASSERT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Tensor x({1, 4}, {2.5, 2.5, 2.5, 2.5});
  std::vector<double> g(4, 1.0), b(4, 0.0);
  auto y = layer_norm<double>(x, g, b, 1e-5);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementClosedForm) {
  const double eps = 1e-5;
  Tensor x({1, 2}, {1, -1});
  std::vector<double> g(2, 1.0), b(2, 0.0);
  auto y = layer_norm<double>(x, g, b, eps);
  EXPECT_NEAR(y[0], 1.0 / std::sqrt(1.0 + eps), 1e-15);
  EXPECT_NEAR(y[1], -1.0 / std::sqrt(1.0 + eps), 1e-15);
}

TEST(LayerNorm, ZeroGainBroadcastsBias) {
  Rng rng(2);
  auto x = rng_normal<double>(rng, {3, 5});
  std::vector<double> g(5, 0.0), b{1, 2, 3, 4, 5};
  auto y = layer_norm<double>(x, g, b, 1e-6);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y(r, c), b[c]);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  Rng rng(9);
  auto x = rng_normal<double>(rng, {10, 16});
  LayerNormCache<double> cache;
  layer_norm_rows(x, 0.0, cache);
  for (std::size_t r = 0; r < 10; ++r) {
    double m = 0, v = 0;
    for (double e : cache.normalized.row(r)) m += e;
    m /= 16;
    for (double e : cache.normalized.row(r)) v += (e - m) * (e - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v / 16, 1.0, 1e-6);
  }
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  auto x = rng_normal<double>(rng, {2, 6});
  auto w = rng_normal<double>(rng, {2, 6});  // loss = sum(w * LN(x))
  LayerNormCache<double> cache;
  layer_norm_rows(x, 1e-5, cache);
  auto dx = layer_norm_backward(w, cache);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto loss = [&](double delta) {
      Tensor xp = x;
      xp[i] += delta;
      LayerNormCache<double> c;
      layer_norm_rows(xp, 1e-5, c);
      double s = 0;
      for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * c.normalized[k];
      return s;
    };
    EXPECT_NEAR(dx[i], (loss(h) - loss(-h)) / (2 * h), 1e-7);
  }
}

TEST(Gelu, Anchors) {
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(10.0), 10.0, 1e-6);
  EXPECT_NEAR(gelu_scalar(-10.0), 0.0, 1e-4);
}

TEST(Gelu, MonotoneOnGridAboveMinimum) {
  // The tanh GELU dips to its minimum near x = -0.75; it is monotone above that.
  double prev = gelu_scalar(-0.7);
  for (double x = -0.69; x <= 6.0; x += 0.01) {
    const double y = gelu_scalar(x);
    EXPECT_GT(y, prev);
    prev = y;
  }
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (double x = -4; x <= 4; x += 0.25)
    EXPECT_NEAR(gelu_grad_scalar(x), (gelu_scalar(x + 1e-6) - gelu_scalar(x - 1e-6)) / 2e-6, 1e-8);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  EXPECT_EQ(rng_normal<double>(a, {64}), rng_normal<double>(b, {64}));
}

TEST(Rng, DifferentSeedsDiffer) {
  Rng a(42), b(43);
  EXPECT_NE(rng_normal<double>(a, {64}), rng_normal<double>(b, {64}));
}

TEST(Rng, MatchesPhiloxKnownAnswer) {
  // Random123 known-answer vector for philox4x32-10, counter = 0, key = 0.
  Rng r(0);
  EXPECT_EQ(r.next_u32(), 0x6627e8d5u);
  EXPECT_EQ(r.next_u32(), 0xe169c58du);
  EXPECT_EQ(r.next_u32(), 0xbc57ac4cu);
  EXPECT_EQ(r.next_u32(), 0x9b00dbd8u);
}

TEST(Rng, ForkedStreamsAreKeyedByTag) {
  EXPECT_EQ(Rng(0).fork(7).seed(), Rng(0).fork(7).seed());
  EXPECT_NE(Rng(0).fork(7).seed(), Rng(0).fork(8).seed());
}

TEST(Rng, NormalMomentsMatchLawOfLargeNumbers) {
  Rng rng(2024);
  auto t = rng_normal<double>(rng, {100000});
  double mean = 0, var = 0;
  for (double v : t.values()) mean += v;
  mean /= double(t.size());
  for (double v : t.values()) var += (v - mean) * (v - mean);
  var /= double(t.size());
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParam) {
  Tensor p({3}, {1, -2, 3}), g({3}), m({3}), v({3});
  const Tensor before = p;
  adamw_update(p, g, m, v, 1, AdamWHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p, before);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // Bias-corrected first step: m_hat = g, v_hat = g^2, so the step is lr*g/(|g|+eps).
  Tensor p({1}, {0.5}), g({1}, {1.0}), m({1}), v({1});
  adamw_update(p, g, m, v, 1, AdamWHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(p[0], 0.5 - 0.1 / (1.0 + 1e-8), 1e-12);
}

TEST(AdamW, DecayShrinksByLrTimesDecay) {
  Tensor p({2}, {2.0, -4.0}), g({2}), m({2}), v({2});
  adamw_update(p, g, m, v, 1, AdamWHyper{0.1, 0.9, 0.999, 1e-8, 0.03});
  EXPECT_NEAR(p[0], 2.0 - 0.1 * 0.03 * 2.0, 1e-15);
  EXPECT_NEAR(p[1], -4.0 + 0.1 * 0.03 * 4.0, 1e-15);
}

TEST(AdamW, NonFiniteGradientRejected) {
  Tensor p({1}, {1.0}), g({1}, {NAN}), m({1}), v({1});
  EXPECT_THROW(adamw_update(p, g, m, v, 1, AdamWHyper{}), ContractViolation);
}
