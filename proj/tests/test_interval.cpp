#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "spanset/interval.hpp"

using namespace spanset;

namespace {

struct Case {
  TimeSpan a, b;
  double inter, uni, iou, giou;
  TimeSpan hull;
};

}  // namespace

TEST(TimeSpan, RejectsInvalidEndpoints) {
  EXPECT_THROW(TimeSpan(0.6, 0.4), std::invalid_argument);
  EXPECT_THROW(TimeSpan(-0.1, 0.4), std::invalid_argument);
  EXPECT_THROW(TimeSpan(0.1, 1.1), std::invalid_argument);
  EXPECT_NO_THROW(TimeSpan(0.3, 0.3));
  EXPECT_NO_THROW(TimeSpan(0.0, 1.0));
}

TEST(TimeSpan, WorkedExamples) {
  const Case cases[] = {
      {{0.2, 0.6}, {0.2, 0.6}, 0.4, 0.4, 1.0, 1.0, {0.2, 0.6}},
      {{0.0, 0.2}, {0.8, 1.0}, 0.0, 0.4, 0.0, -0.6, {0.0, 1.0}},
      {{0.1, 0.5}, {0.3, 0.7}, 0.2, 0.6, 1.0 / 3.0, 1.0 / 3.0, {0.1, 0.7}},
  };
  for (const auto& c : cases) {
    EXPECT_NEAR(intersection_len(c.a, c.b), c.inter, 1e-12);
    EXPECT_NEAR(union_len(c.a, c.b), c.uni, 1e-12);
    EXPECT_NEAR(iou(c.a, c.b), c.iou, 1e-12);
    EXPECT_NEAR(giou(c.a, c.b), c.giou, 1e-12);
    EXPECT_EQ(hull(c.a, c.b), c.hull);
  }
}

TEST(TimeSpan, SpanL1Examples) {
  EXPECT_DOUBLE_EQ(span_l1({0.3, 0.9}, {0.3, 0.9}), 0.0);
  EXPECT_NEAR(span_l1({0.1, 0.4}, {0.2, 0.5}), 0.2, 1e-12);
  EXPECT_NEAR(span_l1({0.0, 1.0}, {0.5, 0.5}), 1.0, 1e-12);
}

TEST(TimeSpan, ZeroLengthSpans) {
  const TimeSpan p(0.4, 0.4);
  EXPECT_EQ(union_len(p, p), 0.0);
  EXPECT_EQ(iou(p, p), 0.0);
  EXPECT_EQ(giou(p, p), 0.0);
  EXPECT_EQ(iou(p, TimeSpan(0.2, 0.6)), 0.0);
  EXPECT_GE(giou(p, TimeSpan(0.7, 0.7)), -1.0);
}

TEST(TimeSpan, RandomProperties) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int i = 0; i < 20000; ++i) {
    const TimeSpan a = oracle::random_span(rng), b = oracle::random_span(rng);
    const double io = iou(a, b), g = giou(a, b);
    ASSERT_GE(io, 0.0);
    ASSERT_LE(io, 1.0);
    ASSERT_GE(g, -1.0);
    ASSERT_LE(g, io);
    ASSERT_EQ(intersection_len(a, b), intersection_len(b, a));
    ASSERT_EQ(union_len(a, b), union_len(b, a));
    ASSERT_EQ(io, iou(b, a));
    ASSERT_EQ(g, giou(b, a));
    ASSERT_EQ(span_l1(a, b), span_l1(b, a));
    if (intersection_len(a, b) > 0.0) {
      ASSERT_NEAR(g, io, 1e-12);
    }
    const double d = u(rng);
    const double lo = std::min(a.s(), b.s()) + d, hi = std::max(a.e(), b.e()) + d;
    if (lo >= 0.0 && hi <= 1.0) {
      const TimeSpan a2(a.s() + d, a.e() + d), b2(b.s() + d, b.e() + d);
      ASSERT_NEAR(span_l1(a2, b2), span_l1(a, b), 1e-12);
    }
  }
}

TEST(TimeSpan, IouMatchesBinnedOverlap) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 300; ++i) {
    const TimeSpan a = oracle::random_span(rng), b = oracle::random_span(rng);
    EXPECT_NEAR(iou(a, b), oracle::binned_iou(a, b, 100000), 2e-5) << a << " " << b;
  }
}

TEST(TimeSpan, IouWithinCenterCountResolution) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 300; ++i) {
    const TimeSpan a = oracle::random_span(rng), b = oracle::random_span(rng);
    const auto cc = oracle::center_count_iou(a, b, 100000);
    EXPECT_LE(std::abs(iou(a, b) - cc.iou), cc.bound) << a << " " << b;
  }
}
