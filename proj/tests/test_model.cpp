#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "spanset/error.hpp"
#include "spanset/losses.hpp"
#include "spanset/model.hpp"

using namespace spanset;

namespace {

void expect_outputs_near(const ModelOutput& a, const ModelOutput& b, double tol) {
  ASSERT_EQ(a.spans.shape(), b.spans.shape());
  ASSERT_EQ(a.correspondence.shape(), b.correspondence.shape());
  for (std::size_t i = 0; i < a.spans.numel(); ++i) EXPECT_NEAR(a.spans.data()[i], b.spans.data()[i], tol);
  for (std::size_t i = 0; i < a.correspondence.numel(); ++i) {
    EXPECT_NEAR(a.correspondence.data()[i], b.correspondence.data()[i], tol);
  }
}

GroundingSample random_sample(std::mt19937_64& rng, std::size_t t, std::size_t d, std::size_t k) {
  std::normal_distribution<double> n(0.0, 1.0);
  GroundingSample s;
  s.frame_count = t;
  s.feature_dim = d;
  s.frames.resize(t * d);
  s.queries.resize(k * d);
  for (double& v : s.frames) v = n(rng);
  for (double& v : s.queries) v = n(rng);
  for (std::size_t q = 0; q < k; ++q) s.targets.push_back({TimeSpan(0.1 * q, 0.1 * q + 0.3), q});
  return s;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = fixture::micro_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = fixture::micro_config();
  c.proposals_per_query = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  ModelConfig def;
  EXPECT_EQ(def.heads(), 8u);
  def.d_model = 128;
  EXPECT_EQ(def.heads(), 2u);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = fixture::micro_config();
  c.temperature = 0.05;
  c.similarity = Similarity::dot;
  c.text_positional = false;
  EXPECT_EQ(model_config_from_json(model_config_to_json(c)), c);
}

TEST(Positional, SinusoidTable) {
  const auto table = sinusoid_table(5, 6);
  ASSERT_EQ(table.size(), 30u);
  for (std::size_t p = 0; p < 5; ++p) {
    for (std::size_t i = 0; i < 3; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, 2.0 * i / 6.0);
      EXPECT_NEAR(table[p * 6 + 2 * i], std::sin(angle), 1e-15);
      EXPECT_NEAR(table[p * 6 + 2 * i + 1], std::cos(angle), 1e-15);
    }
  }
  for (double v : table) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Model, XavierBoundsAndZeroBiases) {
  ModelConfig c = fixture::micro_config();
  c.d_model = 100;
  c.n_heads = 4;
  c.ffn_width = 100;
  const GroundingModel m(c, 3);
  const double bound = std::sqrt(6.0 / 200.0);
  EXPECT_NEAR(bound, 0.1732, 1e-4);
  double largest = 0.0;
  for (double v : m.parameters()["enc.0.self_attn.q.w"].data()) largest = std::max(largest, std::abs(v));
  EXPECT_LE(largest, bound);
  EXPECT_GT(largest, 0.9 * bound);
  for (const auto& [name, t] : m.parameters()) {
    if (name.ends_with(".b") || name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    }
    if (name.ends_with(".gain")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0) << name;
    }
  }
}

TEST(Model, SameSeedSameWeights) {
  const GroundingModel a(fixture::micro_config(), 9), b(fixture::micro_config(), 9), c(fixture::micro_config(), 10);
  bool any_diff = false;
  for (const auto& [name, t] : a.parameters()) {
    const auto x = t.data(), y = b.parameters()[name].data(), z = c.parameters()[name].data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << name;
    if (!std::equal(x.begin(), x.end(), z.begin())) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, EncoderShape) {
  ModelConfig c = fixture::micro_config();
  c.frame_count = 64;
  c.max_queries = 4;
  c.d_model = 32;
  GroundingModel m(c, 1);
  std::mt19937_64 rng(51);
  const auto s = random_sample(rng, 64, 6, 4);
  const auto enc = m.encode(Batch::from_sample(s));
  EXPECT_EQ(enc.memory.shape(), (Shape{68, 32}));
}

TEST(Model, ZeroEncoderLayersIsTheInputProjection) {
  ModelConfig c = fixture::micro_config();
  c.n_enc_layers = 0;
  GroundingModel m(c, 1);
  std::mt19937_64 rng(52);
  const auto s = random_sample(rng, 8, 6, 2);
  const auto enc = m.encode(Batch::from_sample(s));
  const Tensor video = linear(Tensor::from({8, 6}, s.frames), m.parameters()["video_proj.w"], m.parameters()["video_proj.b"]);
  const Tensor text = linear(Tensor::from({2, 6}, s.queries), m.parameters()["text_proj.w"], m.parameters()["text_proj.b"]);
  for (std::size_t i = 0; i < video.numel(); ++i) EXPECT_EQ(enc.memory.data()[i], video.data()[i]);
  for (std::size_t i = 0; i < text.numel(); ++i) EXPECT_EQ(enc.memory.data()[video.numel() + i], text.data()[i]);
}

TEST(Model, DecoderShapesAndValidity) {
  ModelConfig c = fixture::micro_config();
  c.max_queries = 4;
  c.proposals_per_query = 10;
  c.n_dec_layers = 3;
  GroundingModel m(c, 2);
  std::mt19937_64 rng(53);
  const auto out = m.forward(random_sample(rng, 8, 6, 4), true);
  EXPECT_EQ(out.spans.shape(), (Shape{40, 2}));
  EXPECT_EQ(out.correspondence.shape(), (Shape{40, 4}));
  EXPECT_EQ(out.aux_outputs.size(), 2u);
  ASSERT_EQ(out.enc_dec_attention.size(), 3u);
  for (const auto& map : out.enc_dec_attention) {
    EXPECT_EQ(map.rows, 40u);
    EXPECT_EQ(map.cols, 12u);
    for (std::size_t r = 0; r < map.rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < map.cols; ++j) total += map.weights[r * map.cols + j];
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
  for (std::size_t r = 0; r < 40; ++r) {
    EXPECT_GE(out.spans(r, 0), 0.0);
    EXPECT_LE(out.spans(r, 0), out.spans(r, 1));
    EXPECT_LE(out.spans(r, 1), 1.0);
    double total = 0.0;
    for (std::size_t k = 0; k < 4; ++k) total += out.correspondence(r, k);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Model, PaddedQueryContentIsMasked) {
  ModelConfig c = fixture::micro_config();
  c.max_queries = 4;
  GroundingModel m(c, 4);
  std::mt19937_64 rng(54);
  const auto s = random_sample(rng, 8, 6, 2);
  Batch a = Batch::from_sample(s, 4), b = Batch::from_sample(s, 4);
  auto q = b.queries.mutable_data();
  for (std::size_t i = 2 * 6; i < q.size(); ++i) q[i] = 100.0 + static_cast<double>(i);
  const auto ea = m.encode(a), eb = m.encode(b);
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(ea.memory(r, j), eb.memory(r, j), 1e-9);
  }
  expect_outputs_near(m.decode(ea).front(), m.decode(eb).front(), 1e-9);
}

TEST(Model, BatchCoPaddingInvariance) {
  ModelConfig c = fixture::micro_config();
  c.max_queries = 4;
  c.n_dec_layers = 2;
  GroundingModel m(c, 5);
  std::mt19937_64 rng(55);
  const auto s1 = random_sample(rng, 8, 6, 1);
  const auto s2 = random_sample(rng, 8, 6, 4);
  const auto s3 = random_sample(rng, 8, 6, 2);
  const GroundingSample* batch[] = {&s1, &s2, &s3};
  const auto together = m.forward(Batch::from_samples(batch));
  const GroundingSample* singles[] = {&s1, &s2, &s3};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto alone = m.forward(*singles[i]);
    expect_outputs_near(alone, together[i], 1e-9);
    ASSERT_EQ(alone.aux_outputs.size(), 1u);
    for (std::size_t j = 0; j < alone.aux_outputs[0].spans.numel(); ++j) {
      EXPECT_NEAR(alone.aux_outputs[0].spans.data()[j], together[i].aux_outputs[0].spans.data()[j], 1e-9);
    }
  }
}

TEST(Model, ProposalPermutationEquivariance) {
  ModelConfig c = fixture::micro_config();
  c.proposals_per_query = 3;
  c.max_queries = 2;
  GroundingModel m(c, 6);
  std::mt19937_64 rng(56);
  const auto s = random_sample(rng, 8, 6, 2);
  const auto before = m.forward(s);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  Tensor props = m.parameters()["proposals"];
  const std::vector<double> old(props.data().begin(), props.data().end());
  auto data = props.mutable_data();
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < c.d_model; ++j) data[i * c.d_model + j] = old[perm[i] * c.d_model + j];
  }
  const auto after = m.forward(s);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(after.spans(i, j), before.spans(perm[i], j), 1e-10);
      EXPECT_NEAR(after.correspondence(i, j), before.correspondence(perm[i], j), 1e-10);
    }
  }
}

TEST(Model, RandomForwardsAreFinite) {
  std::mt19937_64 rng(57);
  std::uniform_int_distribution<std::size_t> kq(1, 2);
  for (int trial = 0; trial < 1000; ++trial) {
    ModelConfig c = fixture::micro_config();
    c.d_model = 8;
    c.ffn_width = 8;
    c.similarity = trial % 2 ? Similarity::cosine : Similarity::dot;
    GroundingModel m(c, static_cast<std::uint64_t>(trial));
    auto s = random_sample(rng, 8, 6, kq(rng));
    for (double& v : s.frames) v *= 10.0;
    const auto out = m.forward(s);
    for (double v : out.spans.data()) ASSERT_TRUE(std::isfinite(v));
    for (double v : out.correspondence.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  const ModelConfig c = fixture::micro_config();
  GroundingModel m(c, 7);
  std::mt19937_64 rng(58);
  auto s = random_sample(rng, 8, 6, 2);
  s.targets = {{TimeSpan(0.1, 0.45), 0}, {TimeSpan(0.5, 0.8), 1}};
  auto loss_fn = [&] { return final_set_loss(m.forward(s), s.targets, {}).loss; };

  GradCheckOptions opts;
  opts.max_entries_per_param = 6;
  EXPECT_LT(grad_check(loss_fn, m.parameters().tensors(), opts), 1e-3);

  // Independent central differences over a few entries of every parameter.
  m.parameters().zero_grad();
  backward(loss_fn());
  double worst = 0.0;
  for (const auto& [name, t] : m.parameters()) {
    Tensor p = t;
    auto data = p.mutable_data();
    const std::size_t stride = std::max<std::size_t>(1, data.size() / 3);
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double keep = data[i], h = 1e-5;
      data[i] = keep + h;
      double up, down;
      {
        NoGradGuard g;
        up = loss_fn().item();
        data[i] = keep - h;
        down = loss_fn().item();
      }
      data[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
      worst = std::max(worst, oracle::relative_error(analytic, fd));
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Model, CheckpointRoundTrip) {
  GroundingModel m(fixture::micro_config(), 8);
  const auto restored = GroundingModel::from_checkpoint(m.to_checkpoint());
  EXPECT_EQ(restored.config(), m.config());
  for (const auto& [name, t] : m.parameters()) {
    const auto a = t.data(), b = restored.parameters()[name].data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << name;
  }
}

TEST(Model, RejectsIncompatibleCheckpoint) {
  GroundingModel small(fixture::micro_config(), 8);
  ModelConfig wide = fixture::micro_config();
  wide.d_model = 32;
  GroundingModel big(wide, 8);
  EXPECT_THROW(small.load_parameters(big.to_checkpoint()), DataError);
  Checkpoint ckpt = small.to_checkpoint();
  ckpt.tensors.pop_back();
  EXPECT_THROW(small.load_parameters(ckpt), DataError);
}

TEST(Model, RejectsMismatchedInputs) {
  GroundingModel m(fixture::micro_config(), 8);
  std::mt19937_64 rng(59);
  EXPECT_THROW(m.forward(random_sample(rng, 9, 6, 1)), DimensionError);
  EXPECT_THROW(m.forward(random_sample(rng, 8, 5, 1)), DimensionError);
  EXPECT_THROW(m.forward(random_sample(rng, 8, 6, 3)), DimensionError);
}
