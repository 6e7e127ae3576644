#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "gradsuite.hpp"
#include "spanset/error.hpp"
#include "spanset/tensor.hpp"

using namespace spanset;

using gradsuite::random_values;

class OpGradient : public ::testing::TestWithParam<gradsuite::OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  EXPECT_LT(gradsuite::op_worst_error(GetParam()), 1e-4) << GetParam().name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(gradsuite::op_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(Tensor, MatmulExamples) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor p = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item(), 11.0);
  EXPECT_THROW(matmul(m, Tensor::from({3, 1}, {1, 2, 3})), DimensionError);
}

TEST(Tensor, MatmulSumGradientIsOnesTimesBTranspose) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const Tensor b = Tensor::from({3, 2}, {0.5, -1, 2, 0, 1.5, 3}, true);
  backward(sum(matmul(a, b)));
  // (ones * B^T)(i, k) = sum_j B(k, j)
  const double row_sums[3] = {-0.5, 2.0, 4.5};
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.grad()[i * 3 + k], row_sums[k], 1e-15);
  }
}

TEST(Tensor, SoftmaxExamples) {
  const Tensor s0 = softmax_rows(Tensor::from({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s0(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s0(0, 1), 0.5);
  const Tensor s1 = softmax_rows(Tensor::from({1, 2}, {1, 0}));
  EXPECT_NEAR(s1(0, 0), std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
  EXPECT_NEAR(s1(0, 0), 0.7311, 1e-4);
  EXPECT_NEAR(s1(0, 1), 0.2689, 1e-4);
}

TEST(Tensor, SoftmaxRowsAreProbabilityVectors) {
  std::mt19937_64 rng(31);
  const Tensor s = softmax_rows(Tensor::from({50, 7}, random_values(rng, 350, -30, 30)));
  for (std::size_t r = 0; r < 50; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(s(r, c), 0.0);
      total += s(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Tensor, LayerNormExamples) {
  const Tensor gain = Tensor::from({2}, {1, 1}), bias = Tensor::zeros({2});
  const Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), gain, bias, 0.0);
  EXPECT_NEAR(y(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 1.0, 1e-12);
  const Tensor g3 = Tensor::from({3}, {1, 1, 1});
  const Tensor z = layer_norm(Tensor::from({1, 3}, {2, 2, 2}), g3, Tensor::zeros({3}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, ElementwiseExamples) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  const Tensor v = Tensor::from({1, 3}, {0.3, -2.0, 5.0});
  EXPECT_NEAR(cosine_similarity(v, v).item(), 1.0, 1e-8);
  EXPECT_EQ(cosine_similarity(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})).item(), 0.0);
  const Tensor r = relu(Tensor::from({1, 3}, {-1, 0, 2}));
  EXPECT_EQ(r(0, 0), 0.0);
  EXPECT_EQ(r(0, 2), 2.0);
}

TEST(Tensor, BackwardExamples) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);
  x.zero_grad();
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, LeafGradientsAccumulate) {
  const Tensor x = Tensor::scalar(2.0, true);
  backward(scale(x, 3.0));
  backward(scale(x, 3.0));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, NoGradGuardStopsRecording) {
  const Tensor x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = mul(x, x);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, GradCheckQuadratic) {
  const Tensor x = Tensor::scalar(3.0, true);
  const double err = grad_check([&] { return mul(x, x); }, {x});
  EXPECT_LT(err, 1e-6);
}

TEST(Tensor, GradCheckRejectsNonFiniteLoss) {
  const Tensor x = Tensor::scalar(0.0, true);
  EXPECT_THROW(grad_check([&] { return div(Tensor::scalar(1.0), x); }, {x}), std::domain_error);
}

TEST(Tensor, ChainedMatmulSoftmaxNll) {
  std::mt19937_64 rng(32);
  const Tensor a = Tensor::from({3, 4}, random_values(rng, 12), true);
  const Tensor b = Tensor::from({4, 5}, random_values(rng, 20), true);
  const std::vector<std::pair<std::size_t, std::size_t>> picks{{0, 1}, {1, 4}, {2, 0}};
  auto loss = [&] { return scale(sum(log_clamped(pick(softmax_rows(matmul(a, b)), picks), 1e-12)), -1.0); };
  EXPECT_LT(grad_check(loss, {a, b}), 1e-5);
}

TEST(Tensor, AttentionMasksAndRows) {
  std::mt19937_64 rng(33);
  const Tensor q = Tensor::from({5, 4}, random_values(rng, 20));
  const Tensor k = Tensor::from({7, 4}, random_values(rng, 28));
  const Tensor v = Tensor::from({7, 4}, random_values(rng, 28));
  AttentionLayout layout{{0, 2, 5}, {0, 3, 7}, {0, 1, 0, 0, 0, 1, 0}};
  std::vector<AttentionMap> maps;
  multi_head_attention(q, k, v, 2, layout, &maps);
  ASSERT_EQ(maps.size(), 2u);
  EXPECT_EQ(maps[0].rows, 2u);
  EXPECT_EQ(maps[0].cols, 3u);
  EXPECT_EQ(maps[1].rows, 3u);
  EXPECT_EQ(maps[1].cols, 4u);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t r = 0; r < maps[s].rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < maps[s].cols; ++c) total += maps[s].weights[r * maps[s].cols + c];
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
  for (std::size_t r = 0; r < 2; ++r) EXPECT_EQ(maps[0].weights[r * 3 + 1], 0.0);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(maps[1].weights[r * 4 + 2], 0.0);
}

TEST(Tensor, AttentionIgnoresMaskedValues) {
  std::mt19937_64 rng(34);
  const Tensor q = Tensor::from({3, 4}, random_values(rng, 12));
  auto kv = random_values(rng, 16);
  AttentionLayout layout{{0, 3}, {0, 4}, {0, 0, 1, 0}};
  const Tensor a = multi_head_attention(q, Tensor::from({4, 4}, kv), Tensor::from({4, 4}, kv), 2, layout);
  for (std::size_t c = 0; c < 4; ++c) kv[2 * 4 + c] = 1e3 * (c + 1);
  const Tensor b = multi_head_attention(q, Tensor::from({4, 4}, kv), Tensor::from({4, 4}, kv), 2, layout);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Tensor, DropoutIdentityAtZeroAndMeanPreserving) {
  std::mt19937_64 rng(35);
  const Tensor x = Tensor::full({100, 100}, 1.0);
  const Tensor same = dropout(x, 0.0, rng);
  for (double v : same.data()) EXPECT_EQ(v, 1.0);
  const Tensor d = dropout(x, 0.25, rng);
  double total = 0.0;
  for (double v : d.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    total += v;
  }
  EXPECT_NEAR(total / 1e4, 1.0, 0.05);
}

TEST(Tensor, DeterministicForwardAndBackward) {
  auto run = [] {
    std::mt19937_64 rng(36);
    const Tensor a = Tensor::from({4, 6}, random_values(rng, 24), true);
    const Tensor w = Tensor::from({6, 6}, random_values(rng, 36), true);
    const Tensor h = dropout(relu(matmul(a, w)), 0.2, rng);
    const Tensor loss = sum(softmax_rows(h) * h);
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ShapeErrors) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(slice_rows(a, 1, 5), DimensionError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(a.item(), DimensionError);
}
