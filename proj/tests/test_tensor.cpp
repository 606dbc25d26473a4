#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "madrag/error.hpp"
#include "support.hpp"

using namespace madrag;
using madrag::test::random_tensor;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.dim(2), DimensionError);
}

TEST(Tensor, MatmulSmallExample) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Tensor, MatmulRejectsMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    const Tensor c = matmul(a, b), ref = triple_loop(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c.data()[i], ref.data()[i], 1e-12);
  }
}

TEST(Tensor, MatmulRejectsNonFiniteResult) {
  Tensor a = Tensor::matrix({{std::numeric_limits<double>::infinity()}});
  EXPECT_THROW(matmul(a, Tensor::matrix({{1.0}})), NumericError);
}

TEST(Tensor, TransposeTwiceIsIdentity) {
  Rng rng(4);
  const Tensor a = random_tensor({3, 5}, rng);
  EXPECT_EQ(transpose(transpose(a)), a);
  EXPECT_EQ(transpose(a)(4, 2), a(2, 4));
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  const Tensor p = softmax_rows(random_tensor({7, 11}, rng, 10.0));
  for (std::size_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (double v : p.row(i)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, UniformRow) {
  const Tensor p = softmax_rows(Tensor::matrix({{2, 2, 2, 2}}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, MaskedEntriesGetExactlyZero) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const Tensor p = softmax_rows(Tensor::matrix({{1.0, kMaskedLogit, ninf, 1.0}}));
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_EQ(p(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
}

TEST(Softmax, FullyMaskedRowIsDegenerate) {
  EXPECT_THROW(softmax_rows(Tensor::matrix({{kMaskedLogit, kMaskedLogit}})), DegenerateRowError);
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor p = softmax_rows(Tensor::matrix({{1000.0, 999.0}}));
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Softmax, NaNRejected) {
  EXPECT_THROW(softmax_rows(Tensor::matrix({{std::nan(""), 0.0}})), NumericError);
}

TEST(CausalMask, FutureKeysInadmissible) {
  CausalMask m(4);
  EXPECT_TRUE(m.is_pure_causal());
  EXPECT_TRUE(m.admissible(2, 2));
  EXPECT_FALSE(m.admissible(1, 2));
  EXPECT_EQ(m.value(0, 3), kMaskedLogit);
  m.block(3, 0, 2);
  EXPECT_FALSE(m.admissible(3, 1));
  EXPECT_TRUE(m.admissible(3, 2));
  EXPECT_THROW(m.block(4, 0, 1), DimensionError);
}

TEST(Attention, ZeroFutureWeightAndNormalisedRows) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 1 + rng.below(12);
    const Tensor q = random_tensor({L, 4}, rng, 3.0), k = random_tensor({L, 4}, rng, 3.0);
    const Tensor v = random_tensor({L, 4}, rng);
    const AttentionResult r = masked_attention(q, k, v, CausalMask(L));
    for (std::size_t i = 0; i < L; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        if (j > i) {
          EXPECT_EQ(r.weights(i, j), 0.0);
        }
        s += r.weights(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, FirstRowAttendsOnlyToItself) {
  Rng rng(7);
  const Tensor q = random_tensor({3, 2}, rng), k = random_tensor({3, 2}, rng);
  const Tensor v = random_tensor({3, 2}, rng);
  const AttentionResult r = masked_attention(q, k, v, CausalMask(3));
  EXPECT_EQ(r.weights(0, 0), 1.0);
  EXPECT_EQ(r.output(0, 0), v(0, 0));
}

TEST(Attention, MatchesDirectFormula) {
  Rng rng(8);
  const std::size_t L = 6, d = 3;
  const Tensor q = random_tensor({L, d}, rng), k = random_tensor({L, d}, rng);
  const Tensor v = random_tensor({L, d}, rng);
  const AttentionResult r = masked_attention(q, k, v, CausalMask(L));
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> e(i + 1);
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q(i, t) * k(j, t);
      z += e[j] = std::exp(s / std::sqrt(3.0));
    }
    for (std::size_t t = 0; t < d; ++t) {
      double o = 0.0;
      for (std::size_t j = 0; j <= i; ++j) o += e[j] / z * v(j, t);
      EXPECT_NEAR(r.output(i, t), o, 1e-12);
    }
  }
}

TEST(Attention, BlockedKeysReceiveNoWeight) {
  Rng rng(9);
  const Tensor q = random_tensor({5, 2}, rng), k = random_tensor({5, 2}, rng);
  CausalMask m(5);
  m.block(4, 1, 3);
  const AttentionResult r = masked_attention(q, k, random_tensor({5, 2}, rng), m);
  EXPECT_EQ(r.weights(4, 1), 0.0);
  EXPECT_EQ(r.weights(4, 2), 0.0);
  EXPECT_NEAR(r.weights(4, 0) + r.weights(4, 3) + r.weights(4, 4), 1.0, 1e-12);
}

TEST(Attention, RejectsShapeMismatch) {
  EXPECT_THROW(masked_attention(Tensor({3, 2}), Tensor({2, 2}), Tensor({3, 2}), CausalMask(3)),
               DimensionError);
}
