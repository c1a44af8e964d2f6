#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dualenc/errors.hpp"
#include "dualenc/tensor.hpp"
#include "test_util.hpp"

using namespace dualenc;
using dualenc::testing::check_gradients;
using dualenc::testing::probe;
using dualenc::testing::random_tensor;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensor::from_data({r, c}, std::move(v), grad);
}

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  const auto i2 = mat(2, 2, {1, 0, 0, 1});
  const auto c = matmul(i2, i2);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, HandEvaluatedProduct) {
  const auto c = matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 1, {0, 1}));
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.at(0, 0), 2.0);
  EXPECT_EQ(c.at(1, 0), 4.0);
}

TEST(Matmul, ZerosAnnihilate) {
  std::mt19937_64 rng(1);
  const auto c = matmul(random_tensor({3, 4}, rng), Tensor::zeros({4, 5}));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
    EXPECT_NE(msg.find("5"), std::string::npos);
  }
}

TEST(Matmul, AgreesWithNaiveTripleLoop) {
  std::mt19937_64 rng(2);
  const std::size_t m = 37, k = 29, n = 41;
  const auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
  }
}

TEST(Matmul, RowsIndependentOfBatchComposition) {
  std::mt19937_64 rng(3);
  const std::size_t k = 33, n = 70;
  const auto a = random_tensor({9, k}, rng), b = random_tensor({k, n}, rng);
  std::vector<double> full(9 * n), single(n);
  gemm_rows(a.data().data(), b.data().data(), full.data(), 9, k, n);
  for (std::size_t r = 0; r < 9; ++r) {
    gemm_rows(a.data().data() + r * k, b.data().data(), single.data(), 1, k, n);
    for (std::size_t j = 0; j < n; ++j) ASSERT_EQ(single[j], full[r * n + j]);
  }
}

TEST(Softmax, EqualRowIsUniform) {
  const auto s = softmax_rows(mat(1, 4, {3, 3, 3, 3}), 0.7);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, HandEvaluatedRow) {
  const auto s = softmax_rows(mat(1, 2, {0.0, std::log(3.0)}), 1.0);
  EXPECT_NEAR(s.at(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(s.at(0, 1), 0.75, 1e-15);
}

TEST(Softmax, SingleColumnIsOne) {
  const auto s = softmax_rows(mat(3, 1, {-5, 0, 7}), 0.1);
  for (double v : s.data()) EXPECT_EQ(v, 1.0);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({6, 9}, rng, -30, 30, false);
  const auto s = softmax_rows(x, 0.05);
  const auto shifted = softmax_rows(add_scalar(x, 17.0), 0.05);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      total += s.at(i, j);
      EXPECT_NEAR(s.at(i, j), shifted.at(i, j), 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, NonPositiveTemperatureRejected) {
  EXPECT_THROW(softmax_rows(mat(1, 2, {1, 2}), 0.0), ArgumentError);
  EXPECT_THROW(softmax_rows(mat(1, 2, {1, 2}), -1.0), ArgumentError);
}

TEST(CosineSim, SelfOrthogonalAndHandCase) {
  const std::vector<double> u{0.3, -2.0, 5.0};
  EXPECT_NEAR(cosine_sim(u, u), 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 0.70711, 1e-5);
}

TEST(CosineSim, ScaleInvariant) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto u = random_tensor({7}, rng, -1, 1, false), v = random_tensor({7}, rng, -1, 1, false);
    const double base = cosine_sim(u, v);
    EXPECT_NEAR(cosine_sim(scale(u, 3.7), scale(v, 0.02)), base, 1e-12);
  }
}

TEST(CosineSim, ZeroNormRejected) {
  EXPECT_THROW(cosine_sim(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DegenerateError);
  EXPECT_THROW(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 0}), DegenerateError);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::filled({2, 3}, 0.5, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, MeanOfSquares) {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  backward(mean(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Backward, TwoPathsAccumulate) {
  auto x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  backward(add(sum(scale(x, 2.0)), sum(scale(x, 3.0))));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 5.0);
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Tensor::filled({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ArgumentError);
}

TEST(Backward, GradsAccumulateAcrossCallsUntilZeroed) {
  auto x = Tensor::filled({2}, 1.0, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Tape, TopologicalOrder) {
  auto a = Tensor::filled({2, 2}, 1.0, true);
  auto b = Tensor::filled({2, 2}, 2.0, true);
  const auto loss = sum(add(matmul(a, b), a));
  const auto tape = Tape::record(loss);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i]->inputs) {
      const auto pos = std::find(nodes.begin(), nodes.end(), in.get()) - nodes.begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
  }
  EXPECT_EQ(tape.op_names().back(), "sum");
}

TEST(NoGrad, SuppressesRecording) {
  auto x = Tensor::filled({2}, 1.0, true);
  NoGradGuard guard;
  const auto y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Finiteness, NanIsAnError) {
  EXPECT_THROW(log(Tensor::from_data({1}, {-1.0})), NumericError);
  EXPECT_THROW(exp(Tensor::from_data({1}, {1e6})), NumericError);
}

TEST(Invariants, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Determinism, IdenticalInputsGiveIdenticalBits) {
  auto run = [] {
    std::mt19937_64 rng(6);
    const auto a = random_tensor({5, 8}, rng), b = random_tensor({8, 3}, rng);
    const auto out = softmax_rows(matmul(a, b), 0.3);
    return std::vector<double>(out.data().begin(), out.data().end());
  };
  EXPECT_EQ(run(), run());
}

// ---- finite-difference checks, one per op ----------------------------------

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  void expect_ok(const dualenc::testing::GradCheck& r) {
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
};

TEST_F(OpGradient, Matmul) {
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  expect_ok(check_gradients([&] { return probe(matmul(a, b)); }, {a, b}));
}

TEST_F(OpGradient, TransposeReshape) {
  auto a = random_tensor({3, 4}, rng);
  expect_ok(check_gradients([&] { return probe(reshape(transpose(a), {2, 6})); }, {a}));
}

TEST_F(OpGradient, ElementwiseArithmetic) {
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), bias = random_tensor({3}, rng);
  expect_ok(check_gradients(
      [&] { return probe(add_bias(add_scalar(scale(mul(add(a, b), a), 1.7), 0.3), bias)); }, {a, b, bias}));
}

TEST_F(OpGradient, ExpLog) {
  auto a = random_tensor({2, 3}, rng, 0.2, 2.0);
  expect_ok(check_gradients([&] { return probe(log(add_scalar(exp(a), 1.0))); }, {a}));
}

TEST_F(OpGradient, ReluGelu) {
  auto a = random_tensor({3, 5}, rng, -2.0, 2.0);
  expect_ok(check_gradients([&] { return probe(add(relu(a), gelu(a))); }, {a}));
}

TEST_F(OpGradient, SumMean) {
  auto a = random_tensor({3, 2}, rng);
  expect_ok(check_gradients([&] { return add(sum(mul(a, a)), mean(a)); }, {a}));
}

TEST_F(OpGradient, Softmax) {
  auto a = random_tensor({3, 4}, rng);
  expect_ok(check_gradients([&] { return probe(softmax_rows(a, 0.5)); }, {a}));
}

TEST_F(OpGradient, LayerNorm) {
  auto x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  expect_ok(check_gradients([&] { return probe(layer_norm(x, g, b)); }, {x, g, b}));
}

TEST_F(OpGradient, GatherRows) {
  auto table = random_tensor({5, 3}, rng);
  const std::vector<int> ids{4, 0, 4, 2};
  expect_ok(check_gradients([&] { return probe(gather_rows(table, ids)); }, {table}));
}

TEST_F(OpGradient, MaskedMean) {
  auto x = random_tensor({6, 3}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
  expect_ok(check_gradients([&] { return probe(masked_mean(x, mask, 2, 3)); }, {x}));
}

TEST_F(OpGradient, SelfAttention) {
  auto q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 1};
  expect_ok(check_gradients([&] { return probe(self_attention(q, k, v, mask, 2, 3, 2)); }, {q, k, v}));
}

TEST_F(OpGradient, NormalizeAndDiagonal) {
  auto x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
  expect_ok(check_gradients(
      [&] { return probe(pick_diagonal(matmul(l2_normalize_rows(x), transpose(l2_normalize_rows(y))))); },
      {x, y}));
}

TEST(MaskedMean, SinglePositionEqualsThatRow) {
  const auto x = mat(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint8_t> mask{0, 1, 0};
  const auto m = masked_mean(x, mask, 1, 3);
  EXPECT_EQ(m.at(0, 0), 3.0);
  EXPECT_EQ(m.at(0, 1), 4.0);
}

TEST(L2Normalize, ZeroRowReportsIndex) {
  try {
    l2_normalize_rows(mat(3, 2, {1, 0, 0, 0, 1, 1}));
    FAIL();
  } catch (const DegenerateError& e) {
    EXPECT_EQ(e.index(), 1);
  }
}
