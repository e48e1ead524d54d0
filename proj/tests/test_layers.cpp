#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "maskdiff/layers.hpp"
#include "test_util.hpp"

using namespace maskdiff;
using test::normal_tensor;

namespace {

using P = ParamSet<double>;
using Td = Tensor<double>;

void randomize(P& p, uint64_t seed) {
  Rng rng(seed);
  for (auto& t : p) {
    const bool gamma = t.name.ends_with(".gamma");
    for (auto& v : t.values) v = (gamma ? 1.0 : 0.0) + 0.4 * rng.uniform(-1.0, 1.0);
  }
}

double dot(const Td& a, const Td& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Checks parameter and input gradients of y = f(p, x) under L = <y, R>.
void check_block(P& p, Td& x, const std::function<Td(const P&, const Td&)>& forward,
                 const std::function<Td(const P&, const Td&, const Td& r, P& grads)>& backward,
                 uint64_t seed) {
  const Td y0 = forward(p, x);
  const Td r = normal_tensor<double>(y0.n(), y0.c(), y0.h(), y0.w(), seed);
  P grads = p.zeros_like();
  const Td dx = backward(p, x, r, grads);
  auto loss = [&] { return dot(forward(p, x), r); };
  const auto res = test::grad_check(p, grads, loss, test::kGradStep, test::kGradFloor);
  EXPECT_LT(res.max_rel, 1e-4) << res.worst;
  EXPECT_EQ(res.checked, p.total_count());

  ASSERT_TRUE(dx.same_shape(x));
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + test::kGradStep;
    const double lp = loss();
    x[i] = saved - test::kGradStep;
    const double lm = loss();
    x[i] = saved;
    worst = std::max(worst, test::rel_error(dx[i], (lp - lm) / (2 * test::kGradStep),
                                            test::kGradFloor));
  }
  EXPECT_LT(worst, 1e-4) << "input gradient";
}

}  // namespace

TEST(SinusoidalEmbedding, ZeroTimestep) {
  const auto e = sinusoidal_embedding(0, 16);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(e[i], 0.0);
  for (int i = 8; i < 16; ++i) EXPECT_EQ(e[i], 1.0);
}

TEST(SinusoidalEmbedding, UnitFrequencyForDimTwo) {
  for (int t : {1, 7, 250}) {
    const auto e = sinusoidal_embedding(t, 2);
    EXPECT_DOUBLE_EQ(e[0], std::sin(static_cast<double>(t)));
    EXPECT_DOUBLE_EQ(e[1], std::cos(static_cast<double>(t)));
  }
}

TEST(SinusoidalEmbedding, FrequenciesAndRange) {
  const int dim = 32;
  const auto e = sinusoidal_embedding(13, dim);
  for (int k = 0; k < dim / 2; ++k) {
    const double w = std::pow(10000.0, -2.0 * k / dim);
    EXPECT_NEAR(e[k], std::sin(13 * w), 1e-12);
    EXPECT_NEAR(e[k + dim / 2], std::cos(13 * w), 1e-12);
  }
  for (double v : e) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(sinusoidal_embedding(3, 7), std::invalid_argument);
  EXPECT_THROW(sinusoidal_embedding(3, 0), std::invalid_argument);
}

TEST(SinusoidalEmbedding, AllTimestepsDistinct) {
  std::vector<std::vector<double>> rows;
  for (int t = 1; t <= 250; ++t) rows.push_back(sinusoidal_embedding(t, 256));
  double min_dist = 1e9;
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = i + 1; j < rows.size(); ++j) {
      double d = 0.0;
      for (int k = 0; k < 256; ++k) d += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
      min_dist = std::min(min_dist, d);
    }
  }
  EXPECT_GT(min_dist, 1e-6);
}

TEST(GradCheck, Conv2dStrideOneAndTwo) {
  for (int stride : {1, 2}) {
    P p;
    const auto conv = Conv2d<double>::create(p, "c", 3, 4, 3, stride);
    randomize(p, 1);
    Td x = normal_tensor<double>(2, 3, 6, 6, 2);
    check_block(
        p, x, [&](const P& q, const Td& in) { return conv.forward(q, in, nullptr); },
        [&](const P& q, const Td& in, const Td& r, P& g) {
          typename Conv2d<double>::Cache c;
          conv.forward(q, in, &c);
          return conv.backward(q, c, r, g);
        },
        3);
  }
}

TEST(GradCheck, PointwiseConv) {
  P p;
  const auto conv = Conv2d<double>::create(p, "c", 3, 5, 1);
  randomize(p, 4);
  Td x = normal_tensor<double>(1, 3, 4, 4, 5);
  check_block(
      p, x, [&](const P& q, const Td& in) { return conv.forward(q, in, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename Conv2d<double>::Cache c;
        conv.forward(q, in, &c);
        return conv.backward(q, c, r, g);
      },
      6);
}

TEST(GradCheck, GroupNorm) {
  P p;
  const auto gn = GroupNorm<double>::create(p, "n", 6, 3);
  randomize(p, 7);
  Td x = normal_tensor<double>(2, 6, 3, 3, 8, 2.0);
  check_block(
      p, x, [&](const P& q, const Td& in) { return gn.forward(q, in, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename GroupNorm<double>::Cache c;
        gn.forward(q, in, &c);
        return gn.backward(q, c, r, g);
      },
      9);
}

TEST(GradCheck, ResBlockWithProjection) {
  P p;
  const auto rb = ResBlock<double>::create(p, "rb", 4, 8, 12, 2);
  ASSERT_TRUE(rb.has_shortcut);
  randomize(p, 10);
  const Td temb = normal_tensor<double>(2, 12, 1, 1, 11);
  Td x = normal_tensor<double>(2, 4, 4, 4, 12);
  check_block(
      p, x, [&](const P& q, const Td& in) { return rb.forward(q, in, temb, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename ResBlock<double>::Cache c;
        rb.forward(q, in, temb, &c);
        Td dt = Td::like(temb);
        return rb.backward(q, c, r, g, dt);
      },
      13);
}

TEST(GradCheck, ResBlockIdentityAndTimeInput) {
  P p;
  const auto rb = ResBlock<double>::create(p, "rb", 4, 4, 6, 2);
  ASSERT_FALSE(rb.has_shortcut);
  randomize(p, 14);
  const Td x = normal_tensor<double>(1, 4, 4, 4, 15);
  Td temb = normal_tensor<double>(1, 6, 1, 1, 16);
  // Treat the time input as the checked input.
  check_block(
      p, temb, [&](const P& q, const Td& t) { return rb.forward(q, x, t, nullptr); },
      [&](const P& q, const Td& t, const Td& r, P& g) {
        typename ResBlock<double>::Cache c;
        rb.forward(q, x, t, &c);
        Td dt = Td::like(t);
        rb.backward(q, c, r, g, dt);
        return dt;
      },
      17);
}

TEST(GradCheck, Attention) {
  P p;
  const auto at = Attention<double>::create(p, "a", 4, 2);
  randomize(p, 18);
  Td x = normal_tensor<double>(2, 4, 3, 3, 19);
  check_block(
      p, x, [&](const P& q, const Td& in) { return at.forward(q, in, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename Attention<double>::Cache c;
        at.forward(q, in, &c);
        return at.backward(q, c, r, g);
      },
      20);
}

TEST(GradCheck, TimeEmbeddingFeedForward) {
  P p;
  const auto te = TimeEmbedding<double>::create(p, "time", 8, 16);
  randomize(p, 21);
  const std::vector<int> t{1, 99, 250};
  auto fwd = [&](const P& q) { return te.forward(q, t, nullptr); };
  const Td y = fwd(p);
  const Td r = normal_tensor<double>(y.n(), y.c(), 1, 1, 22);
  P grads = p.zeros_like();
  typename TimeEmbedding<double>::Cache c;
  te.forward(p, t, &c);
  te.backward(p, c, r, grads);
  const auto res = test::grad_check(p, grads, [&] { return dot(fwd(p), r); }, test::kGradStep,
                                    test::kGradFloor);
  EXPECT_LT(res.max_rel, 1e-4) << res.worst;
}

TEST(GradCheck, Upsample) {
  P p;
  const auto up = Upsample<double>::create(p, "u", 3);
  randomize(p, 23);
  Td x = normal_tensor<double>(2, 3, 3, 3, 24);
  check_block(
      p, x, [&](const P& q, const Td& in) { return up.forward(q, in, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename Upsample<double>::Cache c;
        up.forward(q, in, &c);
        return up.backward(q, c, r, g);
      },
      25);
}

TEST(GradCheck, LinearLayer) {
  P p;
  const auto fc = Linear<double>::create(p, "fc", 5, 3);
  randomize(p, 26);
  Td x = normal_tensor<double>(4, 5, 1, 1, 27);
  check_block(
      p, x, [&](const P& q, const Td& in) { return fc.forward(q, in, nullptr); },
      [&](const P& q, const Td& in, const Td& r, P& g) {
        typename Linear<double>::Cache c;
        fc.forward(q, in, &c);
        return fc.backward(q, c, r, g);
      },
      28);
}

TEST(GroupNormProperty, NormalizedGroupsHaveZeroMeanUnitVariance) {
  P p;
  const auto gn = GroupNorm<double>::create(p, "n", 8, 4);
  const Td x = normal_tensor<double>(3, 8, 5, 5, 29, 7.0);
  typename GroupNorm<double>::Cache c;
  gn.forward(p, x, &c);
  const size_t group = 2 * 25;
  for (int b = 0; b < 3; ++b) {
    for (int g = 0; g < 4; ++g) {
      const double* v = c.normalized.sample(b) + g * group;
      double mean = 0.0, var = 0.0;
      for (size_t i = 0; i < group; ++i) mean += v[i];
      mean /= group;
      for (size_t i = 0; i < group; ++i) var += (v[i] - mean) * (v[i] - mean);
      var /= group;
      EXPECT_LT(std::abs(mean), 1e-5);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(AttentionProperty, WeightsAreRowStochastic) {
  ParamSet<float> p;
  const auto at = Attention<float>::create(p, "a", 8, 4);
  Rng rng(30);
  for (auto& t : p) {
    for (auto& v : t.values) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  }
  const Image x = normal_tensor<float>(2, 8, 4, 4, 31, 3.0);
  typename Attention<float>::Cache c;
  at.forward(p, x, &c);
  ASSERT_EQ(c.weights.size(), 2u);
  for (const auto& w : c.weights) {
    ASSERT_EQ(w.size(), 256u);
    for (int q = 0; q < 16; ++q) {
      double s = 0.0;
      for (int k = 0; k < 16; ++k) {
        EXPECT_GE(w[q * 16 + k], 0.0f);
        s += w[q * 16 + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Upsample, NearestCopiesEachPixelToBlock) {
  const Image x = test::uniform_image(1, 2, 3, 3, 32);
  const Image y = upsample_nearest2x(x);
  ASSERT_EQ(y.h(), 6);
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) EXPECT_EQ(y.at(0, c, i, j), x.at(0, c, i / 2, j / 2));
    }
  }
}
