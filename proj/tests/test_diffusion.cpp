#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/random.hpp"
#include "test_util.hpp"

using namespace maskdiff;

namespace {

// Returns a fixed tensor regardless of input.
class FixedModel : public EpsilonModel {
 public:
  FixedModel(int in, Image out) : in_(in), out_(std::move(out)) {}
  int in_channels() const override { return in_; }
  Image predict(const Image&, const std::vector<int>&) const override { return out_; }

 private:
  int in_;
  Image out_;
};

// eps_hat = 0.3 * x_c + 0.1 * mask - 0.01 * t, channel by channel.
class AffineModel : public EpsilonModel {
 public:
  explicit AffineModel(int in) : in_(in) {}
  int in_channels() const override { return in_; }
  Image predict(const Image& x, const std::vector<int>& t) const override {
    Image out(x.n(), x.c() - 1, x.h(), x.w());
    for (int b = 0; b < x.n(); ++b) {
      for (int c = 0; c < x.c() - 1; ++c) {
        for (size_t p = 0; p < x.plane(); ++p) {
          out.channel(b, c)[p] = 0.3f * x.channel(b, c)[p] +
                                 0.1f * x.channel(b, x.c() - 1)[p] - 0.01f * t[b];
        }
      }
    }
    return out;
  }

 private:
  int in_;
};

// Records every conditioned input it sees and predicts zero.
class RecordingModel : public EpsilonModel {
 public:
  explicit RecordingModel(int in) : in_(in) {}
  int in_channels() const override { return in_; }
  Image predict(const Image& x, const std::vector<int>& t) const override {
    ++calls;
    seen_t.push_back(t.front());
    last_mask_channels.push_back(x.slice(0));
    return Image(x.n(), x.c() - 1, x.h(), x.w());
  }
  mutable int calls = 0;
  mutable std::vector<int> seen_t;
  mutable std::vector<Image> last_mask_channels;

 private:
  int in_;
};

Mask half_mask(int h, int w) {
  Mask m(1, 1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w / 2; ++x) m.at(0, 0, y, x) = 1.0f;
  }
  return m;
}

}  // namespace

TEST(QSample, EndpointsAreExact) {
  const NoiseSchedule s = build_schedule(250);
  const Image x0 = test::uniform_image(2, 3, 8, 8, 1);
  const Image eps = gaussian_like(2, 3, 8, 8, 2);
  EXPECT_EQ(q_sample(x0, 0, eps, s), x0);
  EXPECT_EQ(q_sample(x0, 250, eps, s), eps);
}

TEST(QSample, RejectsBadInput) {
  const NoiseSchedule s = build_schedule(10);
  const Image x0(1, 3, 4, 4), eps(1, 3, 4, 5);
  EXPECT_THROW(q_sample(x0, 1, eps, s), std::invalid_argument);
  EXPECT_THROW(q_sample(x0, 11, Image(1, 3, 4, 4), s), std::out_of_range);
}

TEST(QSample, MonteCarloMarginals) {
  const NoiseSchedule s = build_schedule(250);
  const int t = 125, draws = 100000;
  const double expected_var = 1.0 - s.alpha_bar[t];
  Rng rng(123);
  const Image zeros(1, 1, 4, 4);
  const Image x0 = test::uniform_image(1, 1, 4, 4, 5);
  std::vector<double> sum(16), sum2(16), sum_x(16);
  Image eps(1, 1, 4, 4);
  for (int d = 0; d < draws; ++d) {
    for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
    const Image a = q_sample(zeros, t, eps, s);
    const Image b = q_sample(x0, t, eps, s);
    for (int i = 0; i < 16; ++i) {
      sum[i] += a[i];
      sum2[i] += a[i] * a[i];
      sum_x[i] += b[i];
    }
  }
  for (int i = 0; i < 16; ++i) {
    const double mean = sum[i] / draws;
    const double var = (sum2[i] - draws * mean * mean) / (draws - 1);
    EXPECT_NEAR(var, expected_var, 0.05 * expected_var) << "pixel " << i;
    // Mean of x_t is sqrt(abar) x0 within 3 standard errors.
    const double se = std::sqrt(expected_var / draws);
    EXPECT_NEAR(sum_x[i] / draws, s.sqrt_alpha_bar[t] * x0[i], 3 * se);
  }
}

TEST(InvertQSample, RoundTrips) {
  const NoiseSchedule s = build_schedule(250);
  const Image x0 = test::uniform_image(1, 3, 8, 8, 7);
  const Image eps = gaussian_like(1, 3, 8, 8, 8);
  test::expect_close(invert_q_sample(q_sample(x0, 1, eps, s), 1, eps, s), x0, 1e-6);
  test::expect_close(invert_q_sample(q_sample(x0, 125, eps, s), 125, eps, s), x0, 1e-5);
  EXPECT_THROW(invert_q_sample(x0, 250, eps, s), std::domain_error);
}

TEST(InvertQSample, RoundTripsEverywhereInDouble) {
  const NoiseSchedule s = build_schedule(250);
  const auto x0 = test::uniform_image(1, 3, 8, 8, 9).cast<double>();
  const auto eps = gaussian_like(1, 3, 8, 8, 10).cast<double>();
  for (int t = 0; t <= s.T; ++t) {
    if (s.alpha_bar[t] <= 1e-8) continue;
    const auto back = invert_q_sample(q_sample(x0, t, eps, s), t, eps, s);
    for (size_t i = 0; i < x0.size(); ++i) ASSERT_NEAR(back[i], x0[i], 1e-5) << "t=" << t;
  }
}

TEST(ConcatCondition, AppendsMaskUnchanged) {
  const Image x = test::uniform_image(1, 1, 8, 8, 3);
  const Mask m = half_mask(8, 8);
  const Image c = concat_condition(x, m);
  ASSERT_EQ(c.c(), 2);
  for (size_t p = 0; p < c.plane(); ++p) {
    EXPECT_EQ(c.channel(0, 1)[p], m[p]);
    EXPECT_EQ(c.channel(0, 0)[p], x[p]);
  }
  EXPECT_EQ(concat_condition(Image(1, 3, 256, 256), Mask(1, 1, 256, 256)).c(), 4);
  EXPECT_THROW(concat_condition(Image(1, 3, 16, 16), Mask(1, 1, 8, 8)), std::invalid_argument);
}

TEST(TrainingLoss, StubPredictors) {
  const NoiseSchedule s = build_schedule(50);
  const Image x0 = test::uniform_image(2, 3, 8, 8, 11);
  const Image eps = gaussian_like(2, 3, 8, 8, 12);
  Mask m(2, 1, 8, 8);
  const std::vector<int> t{3, 40};
  EXPECT_EQ(training_loss(FixedModel(4, eps), x0, m, t, eps, s), 0.0);
  Image shifted = eps;
  for (auto& v : shifted.values()) v += 1.0f;
  EXPECT_NEAR(training_loss(FixedModel(4, shifted), x0, m, t, eps, s), 1.0, 1e-6);
}

TEST(TrainingLoss, IgnoresMaskWhenModelDoes) {
  const NoiseSchedule s = build_schedule(50);
  const Image x0 = test::uniform_image(1, 3, 8, 8, 13);
  const Image eps = gaussian_like(1, 3, 8, 8, 14);
  const FixedModel model(4, gaussian_like(1, 3, 8, 8, 15));
  const double a = training_loss(model, x0, Mask(1, 1, 8, 8), {7}, eps, s);
  const double b = training_loss(model, x0, half_mask(8, 8), {7}, eps, s);
  EXPECT_EQ(a, b);
}

TEST(TrainingLoss, MatchesBruteForceOnTinyNetwork) {
  DenoiserConfig cfg = test::tiny_config();
  const Denoiser<float> net(cfg);
  const DenoiserParams params = test::randomized_params(net, 21);
  const NoiseSchedule s = build_schedule(100);
  const Image x0 = test::uniform_image(2, 1, 16, 16, 22);
  const Image eps = gaussian_like(2, 1, 16, 16, 23);
  Mask m(2, 1, 16, 16);
  m.values().assign(m.size(), 0.0f);
  for (size_t i = 0; i < m.size(); i += 3) m[i] = 1.0f;
  const std::vector<int> t{5, 77};

  const double loss = training_loss(DenoiserModel(net, params), x0, m, t, eps, s);

  // Independent elementwise evaluation.
  Image xt(2, 1, 16, 16);
  for (int b = 0; b < 2; ++b) {
    for (size_t i = 0; i < x0.sample_size(); ++i) {
      xt.sample(b)[i] = static_cast<float>(s.sqrt_alpha_bar[t[b]] * x0.sample(b)[i] +
                                           s.sqrt_one_minus_alpha_bar[t[b]] * eps.sample(b)[i]);
    }
  }
  Image in(2, 2, 16, 16);
  for (int b = 0; b < 2; ++b) {
    std::copy_n(xt.sample(b), 256, in.channel(b, 0));
    std::copy_n(m.sample(b), 256, in.channel(b, 1));
  }
  const Image pred = net.forward(params, in, t);
  double sum = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) sum += std::abs(static_cast<double>(pred[i]) - eps[i]);
  EXPECT_GT(loss, 0.0);
  EXPECT_NEAR(loss, sum / pred.size(), 1e-6);

  DenoiserParams grads = params.zeros_like();
  EXPECT_NEAR(training_loss_and_grad(net, params, x0, m, t, eps, s, grads), loss, 1e-6);
}

TEST(PSampleStep, ZeroPredictionScalesInput) {
  const NoiseSchedule s = build_schedule(100);
  const Image xt = gaussian_like(1, 3, 4, 4, 31);
  const Image out = p_sample_step(FixedModel(4, Image(1, 3, 4, 4)), xt, Mask(1, 1, 4, 4), 40,
                                  s, nullptr);
  for (size_t i = 0; i < xt.size(); ++i) {
    EXPECT_NEAR(out[i], xt[i] / std::sqrt(s.alpha[40]), 1e-6);
  }
}

TEST(PSampleStep, FinalStepIsDeterministicAndRejectsNoise) {
  const NoiseSchedule s = build_schedule(100);
  const AffineModel model(4);
  const Image xt = gaussian_like(1, 3, 4, 4, 32);
  const Mask m = half_mask(4, 4);
  const Image zero(1, 3, 4, 4);
  EXPECT_EQ(p_sample_step(model, xt, m, 1, s, &zero), p_sample_step(model, xt, m, 1, s, nullptr));
  const Image z = gaussian_like(1, 3, 4, 4, 33);
  EXPECT_THROW(p_sample_step(model, xt, m, 1, s, &z), std::invalid_argument);
  EXPECT_THROW(p_sample_step(model, xt, half_mask(8, 8), 5, s, &z), std::invalid_argument);
}

TEST(PSampleStep, MatchesScalarLoop) {
  const NoiseSchedule s = build_schedule(100);
  const AffineModel model(4);
  const Image xt = gaussian_like(2, 3, 4, 4, 34);
  Mask m(2, 1, 4, 4);
  for (size_t i = 0; i < m.size(); i += 2) m[i] = 1.0f;
  const Image z = gaussian_like(2, 3, 4, 4, 35);
  for (auto variance : {ReverseVariance::Posterior, ReverseVariance::Beta}) {
    const int t = 37;
    const Image out = p_sample_step(model, xt, m, t, s, &z, variance);
    const double var = variance == ReverseVariance::Posterior ? s.posterior_variance[t] : s.beta[t];
    for (int b = 0; b < 2; ++b) {
      for (int c = 0; c < 3; ++c) {
        for (int p = 0; p < 16; ++p) {
          const double x = xt.channel(b, c)[p];
          const double eh = static_cast<float>(0.3f * xt.channel(b, c)[p] +
                                               0.1f * m.channel(b, 0)[p] - 0.01f * t);
          const double expect = (x - s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]) * eh) /
                                    std::sqrt(1.0 - s.beta[t]) +
                                std::sqrt(var) * z.channel(b, c)[p];
          EXPECT_NEAR(out.channel(b, c)[p], expect, 1e-6);
        }
      }
    }
  }
}

TEST(Sample, DeterministicPerSeedAndSeedSensitive) {
  const NoiseSchedule s = build_schedule(20);
  const AffineModel model(4);
  const Mask m = half_mask(8, 8);
  const Image a = sample(model, m, s, 42);
  const Image b = sample(model, m, s, 42);
  const Image c = sample(model, m, s, 1);
  const Image d = sample(model, m, s, 2);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(c == d);
  for (float v : a.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Sample, CallsModelTTimesWithUntouchedMask) {
  const NoiseSchedule s = build_schedule(17);
  const RecordingModel model(2);
  const Mask m = half_mask(8, 8);
  sample(model, m, s, 5);
  EXPECT_EQ(model.calls, 17);
  for (int i = 0; i < 17; ++i) {
    EXPECT_EQ(model.seen_t[i], 17 - i);
    const Image& in = model.last_mask_channels[i];
    for (size_t p = 0; p < in.plane(); ++p) ASSERT_EQ(in.channel(0, 1)[p], m[p]);
  }
}

TEST(Sample, BatchMatchesIndividualRuns) {
  const NoiseSchedule s = build_schedule(10);
  const AffineModel model(4);
  Mask masks(2, 1, 8, 8);
  const Mask h = half_mask(8, 8);
  std::copy_n(h.data(), 64, masks.sample(1));
  const uint64_t seeds[] = {3, 4};
  const Image both = sample(model, masks, s, seeds);
  EXPECT_EQ(both.slice(0), sample(model, Mask(1, 1, 8, 8), s, 3));
  EXPECT_EQ(both.slice(1), sample(model, h, s, 4));
}

TEST(Sample, RejectsChannelMismatch) {
  const NoiseSchedule s = build_schedule(10);
  const AffineModel model(4);
  Mask bad(1, 2, 8, 8);
  EXPECT_THROW(sample(model, bad, s, 1), std::invalid_argument);
}
