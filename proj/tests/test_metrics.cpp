#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "maskdiff/data.hpp"
#include "maskdiff/embedder.hpp"
#include "maskdiff/metrics.hpp"
#include "test_util.hpp"

using namespace maskdiff;

namespace {

using LMat = std::vector<std::vector<long double>>;

FeatureSet normal_features(int n, int d, uint64_t seed, double shift = 0.0) {
  FeatureSet f(n, d);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) f(i, j) = rng.normal() + shift;
  }
  return f;
}

Eigen::MatrixXd random_spd(int d, uint64_t seed) {
  Eigen::MatrixXd a(d, d);
  Rng rng(seed);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  }
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// Cyclic Jacobi eigenvalues of a symmetric matrix, long double.
std::vector<long double> jacobi_eigenvalues(LMat a) {
  const size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    long double off = 0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    }
    if (off < 1e-36L) break;
    for (size_t p = 0; p < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0) continue;
        const long double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const long double t =
            (theta >= 0 ? 1 : -1) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const long double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (size_t k = 0; k < n; ++k) {
          const long double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < n; ++k) {
          const long double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<long double> ev(n);
  for (size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

// FID through a Cholesky factor: L^T S_b L is similar to S_a S_b.
long double fid_oracle(const GaussianStats& sa, const GaussianStats& sb) {
  const size_t d = sa.mu.size();
  LMat L(d, std::vector<long double>(d, 0));
  for (size_t j = 0; j < d; ++j) {
    long double s = sa.cov(j, j);
    for (size_t k = 0; k < j; ++k) s -= L[j][k] * L[j][k];
    L[j][j] = std::sqrt(s);
    for (size_t i = j + 1; i < d; ++i) {
      long double v = sa.cov(i, j);
      for (size_t k = 0; k < j; ++k) v -= L[i][k] * L[j][k];
      L[i][j] = v / L[j][j];
    }
  }
  LMat m(d, std::vector<long double>(d, 0));
  for (size_t i = 0; i < d; ++i) {
    for (size_t j = 0; j < d; ++j) {
      long double s = 0;
      for (size_t k = 0; k < d; ++k) {
        for (size_t l = 0; l < d; ++l) s += L[k][i] * static_cast<long double>(sb.cov(k, l)) * L[l][j];
      }
      m[i][j] = s;
    }
  }
  long double root = 0;
  for (long double ev : jacobi_eigenvalues(m)) root += std::sqrt(std::max(ev, 0.0L));
  long double out = 0;
  for (size_t i = 0; i < d; ++i) {
    const long double diff = static_cast<long double>(sa.mu(i)) - sb.mu(i);
    out += diff * diff + static_cast<long double>(sa.cov(i, i)) + sb.cov(i, i);
  }
  return out - 2 * root;
}

GaussianStats stats_of(const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  GaussianStats s;
  s.mu = mu;
  s.cov = cov;
  return s;
}

Mask mask_from(const std::vector<int>& bits, int h, int w) {
  Mask m(1, 1, h, w);
  for (size_t i = 0; i < bits.size(); ++i) m[i] = static_cast<float>(bits[i]);
  return m;
}

Mask random_mask(int h, int w, Rng& rng, double p) {
  Mask m(1, 1, h, w);
  for (auto& v : m.values()) v = rng.uniform() < p ? 1.0f : 0.0f;
  return m;
}

}  // namespace

TEST(ComputeStats, TwoPointsByHand) {
  FeatureSet f(2, 2);
  f << 0, 0, 2, 0;
  const GaussianStats s = compute_stats(f);
  EXPECT_EQ(s.mu(0), 1.0);
  EXPECT_EQ(s.mu(1), 0.0);
  EXPECT_EQ(s.cov(0, 0), 2.0);
  EXPECT_EQ(s.cov(0, 1), 0.0);
  EXPECT_EQ(s.cov(1, 0), 0.0);
  EXPECT_EQ(s.cov(1, 1), 0.0);
}

TEST(ComputeStats, IdenticalRowsHaveZeroCovariance) {
  FeatureSet f(3, 4);
  f.rowwise() = Eigen::RowVector4d(1.5, -2, 0.25, 7);
  const GaussianStats s = compute_stats(f);
  EXPECT_EQ(s.cov.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ComputeStats, MatchesTwoPassScalarLoop) {
  const FeatureSet f = normal_features(100, 5, 1, 0.7);
  const GaussianStats s = compute_stats(f);
  for (int j = 0; j < 5; ++j) {
    double mean = 0;
    for (int i = 0; i < 100; ++i) mean += f(i, j);
    mean /= 100;
    EXPECT_NEAR(s.mu(j), mean, 1e-10);
  }
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < 5; ++b) {
      double c = 0;
      for (int i = 0; i < 100; ++i) c += (f(i, a) - s.mu(a)) * (f(i, b) - s.mu(b));
      EXPECT_NEAR(s.cov(a, b), c / 99, 1e-10);
      EXPECT_EQ(s.cov(a, b), s.cov(b, a));
    }
    EXPECT_GE(s.cov(a, a), 0.0);
  }
}

TEST(ComputeStats, NeedsTwoRows) {
  EXPECT_THROW(compute_stats(FeatureSet(1, 3)), std::invalid_argument);
}

TEST(Frechet, ZeroOnIdenticalStats) {
  const GaussianStats s = compute_stats(normal_features(50, 6, 2));
  EXPECT_NEAR(frechet_distance(s, s), 0.0, 1e-8);
  EXPECT_GE(frechet_distance(s, s), 0.0);
}

TEST(Frechet, MeanShiftWithIdentityCovariance) {
  Eigen::VectorXd d(3);
  d << 1, -2, 0.5;
  const auto eye = Eigen::MatrixXd::Identity(3, 3);
  const double v = frechet_distance(stats_of(Eigen::VectorXd::Zero(3), eye), stats_of(d, eye));
  EXPECT_NEAR(v, d.squaredNorm(), 1e-8);
}

TEST(Frechet, MatchesHighPrecisionOracle) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Eigen::VectorXd mu_a(4), mu_b(4);
    for (int i = 0; i < 4; ++i) {
      mu_a(i) = rng.normal();
      mu_b(i) = rng.normal();
    }
    const GaussianStats a = stats_of(mu_a, random_spd(4, 100 + seed));
    const GaussianStats b = stats_of(mu_b, random_spd(4, 200 + seed));
    const double oracle = static_cast<double>(fid_oracle(a, b));
    EXPECT_NEAR(frechet_distance(a, b), oracle, 1e-6) << "seed " << seed;
    EXPECT_NEAR(frechet_distance(b, a), frechet_distance(a, b), 1e-8);
  }
}

TEST(Frechet, SingularCovariancesStayFinite) {
  const GaussianStats a = compute_stats(normal_features(3, 8, 3));
  const GaussianStats b = compute_stats(normal_features(3, 8, 4, 1.0));
  const double v = frechet_distance(a, b);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, 0.0);
}

TEST(Frechet, RejectsDimensionMismatch) {
  const GaussianStats a = compute_stats(normal_features(5, 3, 5));
  const GaussianStats b = compute_stats(normal_features(5, 4, 6));
  EXPECT_THROW(frechet_distance(a, b), std::invalid_argument);
}

TEST(Frechet, PermutationInvariant) {
  FeatureSet a = normal_features(30, 4, 7);
  const FeatureSet b = normal_features(30, 4, 8, 0.5);
  const double before = frechet_distance(compute_stats(a), compute_stats(b));
  a.row(0).swap(a.row(29));
  a.row(3).swap(a.row(17));
  EXPECT_NEAR(frechet_distance(compute_stats(a), compute_stats(b)), before, 1e-10);
}

TEST(Kid, NineTermHandSum) {
  FeatureSet a(3, 2), b(3, 2);
  a << 1, 0, 0, 1, 1, 1;
  b << 2, 0, 0, -1, 0.5, 0.5;
  auto k = [](double x0, double x1, double y0, double y1) {
    const double v = (x0 * y0 + x1 * y1) / 2.0 + 1.0;
    return v * v * v;
  };
  double kaa = 0, kbb = 0, kab = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      kab += k(a(i, 0), a(i, 1), b(j, 0), b(j, 1));
      if (i != j) {
        kaa += k(a(i, 0), a(i, 1), a(j, 0), a(j, 1));
        kbb += k(b(i, 0), b(i, 1), b(j, 0), b(j, 1));
      }
    }
  }
  const double expect = kaa / 6 + kbb / 6 - 2 * kab / 9;
  EXPECT_NEAR(kid(a, b), expect, 1e-10);
  EXPECT_NEAR(polynomial_kernel(a.row(2).transpose(), b.row(0).transpose()), 8.0, 1e-15);
}

TEST(Kid, NullCaseConcentratesNearZero) {
  const int n = 200;
  std::vector<double> values;
  for (uint64_t r = 0; r < 20; ++r) {
    values.push_back(kid(normal_features(n, 8, 1000 + r), normal_features(n, 8, 2000 + r)));
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (values.size() - 1));
  EXPECT_LT(std::abs(mean), 3 * sd / std::sqrt(static_cast<double>(values.size())));
  for (double v : values) EXPECT_LT(std::abs(v), 3.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_TRUE(std::any_of(values.begin(), values.end(), [](double v) { return v < 0; }));

  const double shifted = kid(normal_features(n, 8, 3000), normal_features(n, 8, 3001, 3.0));
  EXPECT_GT(shifted, 10 * sd);
}

TEST(Kid, RejectsTinyOrMismatchedSets) {
  EXPECT_THROW(kid(normal_features(1, 3, 1), normal_features(5, 3, 2)), std::invalid_argument);
  EXPECT_THROW(kid(normal_features(5, 3, 1), normal_features(5, 4, 2)), std::invalid_argument);
}

TEST(InceptionScore, ClosedForms) {
  EXPECT_EQ(inception_score(Eigen::MatrixXd::Constant(7, 10, 0.1)), 1.0);
  EXPECT_EQ(inception_score(Eigen::MatrixXd::Identity(10, 10)), 10.0);
  Eigen::MatrixXd twice(20, 10);
  twice << Eigen::MatrixXd::Identity(10, 10), Eigen::MatrixXd::Identity(10, 10);
  EXPECT_EQ(inception_score(twice), 10.0);
}

TEST(InceptionScore, MatchesScalarLoopAndStaysInRange) {
  Rng rng(9);
  Eigen::MatrixXd p(50, 10);
  for (int i = 0; i < 50; ++i) {
    double s = 0;
    for (int k = 0; k < 10; ++k) s += p(i, k) = std::exp(3 * rng.normal());
    p.row(i) /= s;
  }
  double marg[10] = {};
  for (int i = 0; i < 50; ++i) {
    for (int k = 0; k < 10; ++k) marg[k] += p(i, k) / 50;
  }
  double kl = 0;
  for (int i = 0; i < 50; ++i) {
    for (int k = 0; k < 10; ++k) {
      if (p(i, k) > 0) kl += p(i, k) * std::log(p(i, k) / marg[k]);
    }
  }
  const double is = inception_score(p);
  EXPECT_NEAR(is, std::exp(kl / 50), 1e-8);
  EXPECT_GE(is, 1.0);
  EXPECT_LE(is, 10.0);
}

TEST(InceptionScore, RejectsInvalidRows) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(3, 4, 0.25);
  p(1, 0) = 0.5;
  EXPECT_THROW(inception_score(p), std::invalid_argument);
  p(1, 0) = -0.25;
  p(1, 1) = 0.75;
  EXPECT_THROW(inception_score(p), std::invalid_argument);
}

TEST(Overlap, PerfectAndDisjoint) {
  const Mask a = mask_from({1, 1, 0, 0}, 2, 2);
  const OverlapScores same = overlap_metrics(a, a);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_EQ(same.f1, 1.0);
  EXPECT_EQ(same.accuracy, 1.0);
  EXPECT_EQ(same.precision, 1.0);
  const OverlapScores apart = overlap_metrics(a, mask_from({0, 0, 1, 1}, 2, 2));
  EXPECT_EQ(apart.iou, 0.0);
  EXPECT_EQ(apart.f1, 0.0);
}

TEST(Overlap, HalfPlanesOnFourByFour) {
  std::vector<int> left(16), top(16);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      left[y * 4 + x] = x < 2;
      top[y * 4 + x] = y < 2;
    }
  }
  const OverlapCounts c = count_overlap(mask_from(left, 4, 4), mask_from(top, 4, 4));
  EXPECT_EQ(c.tp, 4);
  EXPECT_EQ(c.fp, 4);
  EXPECT_EQ(c.fn, 4);
  EXPECT_EQ(c.tn, 4);
  const OverlapScores s = overlap_scores(c);
  EXPECT_DOUBLE_EQ(s.iou, 1.0 / 3.0);
  EXPECT_EQ(s.f1, 0.5);
  EXPECT_EQ(s.accuracy, 0.5);
  EXPECT_EQ(s.precision, 0.5);
}

TEST(Overlap, EmptyMaskConventions) {
  const Mask empty(1, 1, 3, 3);
  const OverlapScores both = overlap_metrics(empty, empty);
  EXPECT_EQ(both.iou, 1.0);
  EXPECT_EQ(both.f1, 1.0);
  EXPECT_EQ(both.precision, 1.0);
  EXPECT_EQ(both.accuracy, 1.0);
  Mask truth = empty;
  truth[4] = 1;
  const OverlapScores missed = overlap_metrics(empty, truth);
  EXPECT_EQ(missed.precision, 0.0);
  EXPECT_EQ(missed.iou, 0.0);
}

TEST(Overlap, MatchesBruteForceOnRandomPairs) {
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = static_cast<int>(rng.integer(1, 9)), w = static_cast<int>(rng.integer(1, 9));
    const Mask p = random_mask(h, w, rng, rng.uniform());
    const Mask t = random_mask(h, w, rng, rng.uniform());
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool a = p.at(0, 0, y, x) == 1.0f, b = t.at(0, 0, y, x) == 1.0f;
        tp += a && b;
        fp += a && !b;
        fn += !a && b;
        tn += !a && !b;
      }
    }
    const OverlapCounts c = count_overlap(p, t);
    ASSERT_EQ(c.tp, tp);
    ASSERT_EQ(c.fp, fp);
    ASSERT_EQ(c.fn, fn);
    ASSERT_EQ(c.tn, tn);
    const OverlapScores s = overlap_scores(c);
    const double iou = tp + fp + fn ? double(tp) / double(tp + fp + fn) : 1.0;
    const double f1 = tp + fp + fn ? 2.0 * tp / double(2 * tp + fp + fn) : 1.0;
    const double prec = tp + fp ? double(tp) / double(tp + fp) : (tp + fn ? 0.0 : 1.0);
    ASSERT_EQ(s.iou, iou);
    ASSERT_EQ(s.f1, f1);
    ASSERT_EQ(s.accuracy, double(tp + tn) / double(h * w));
    ASSERT_EQ(s.precision, prec);
  }
}

TEST(Overlap, RejectsBadInput) {
  const Mask a(1, 1, 2, 2);
  EXPECT_THROW(count_overlap(a, Mask(1, 1, 2, 3)), std::invalid_argument);
  Mask soft = a;
  soft[0] = 0.5f;
  EXPECT_THROW(count_overlap(soft, a), std::invalid_argument);
}

TEST(Fidelity, PerfectSeparation) {
  Rng rng(11);
  const Mask m = random_mask(8, 8, rng, 0.4);
  Image g(1, 3, 8, 8);
  for (int c = 0; c < 3; ++c) {
    for (size_t p = 0; p < m.size(); ++p) g.channel(0, c)[p] = m[p] == 1.0f ? 1.0f : -1.0f;
  }
  EXPECT_EQ(conditioning_fidelity(g, m, 0.0), 1.0);
}

TEST(Fidelity, ConstantBrightImageGivesAreaFraction) {
  Mask m(1, 1, 4, 6);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 3; ++x) m.at(0, 0, y, x) = 1.0f;
  }
  const Image g(1, 2, 4, 6, 0.5f);
  EXPECT_EQ(conditioning_fidelity(g, m, 0.0), 0.5);
}

TEST(Fidelity, ThresholdIsStrictAndUsesChannelMean) {
  Image g(1, 2, 1, 2);
  g.at(0, 0, 0, 0) = 0.4f;
  g.at(0, 1, 0, 0) = -0.4f;  // mean 0, not above 0
  g.at(0, 0, 0, 1) = 0.6f;
  g.at(0, 1, 0, 1) = -0.2f;  // mean 0.2
  const Mask b = brightness_mask(g, 0.0);
  EXPECT_EQ(b[0], 0.0f);
  EXPECT_EQ(b[1], 1.0f);
}

TEST(Fidelity, NoiseBaselineIsNearExpectedOverlap) {
  // Uniform noise in [-1, 1] thresholded at 0 marks each pixel with p = 1/2:
  // E[IoU] ~ (a/2) / (a/2 + (N - a)/2 + a/2) = a / (N + a).
  Rng rng(12);
  Mask m(1, 1, 32, 32);
  for (int y = 8; y < 24; ++y) {
    for (int x = 8; x < 24; ++x) m.at(0, 0, y, x) = 1.0f;
  }
  const double a = 256, n = 1024;
  double mean = 0;
  for (int i = 0; i < 50; ++i) {
    mean += conditioning_fidelity(test::uniform_image(1, 3, 32, 32, 500 + i), m, 0.0) / 50;
  }
  EXPECT_NEAR(mean, a / (n + a), 0.03);
}

TEST(Fidelity, ShapeMismatchThrows) {
  EXPECT_THROW(conditioning_fidelity(Image(1, 3, 4, 4), Mask(1, 1, 4, 5), 0.0),
               std::invalid_argument);
}

TEST(Embedder, Contract) {
  const ReferenceEmbedder e(3);
  EXPECT_EQ(e.dim(), 64);
  EXPECT_EQ(e.id(), "refconv3-tanh-gap64-c3-seed42");
  for (int size : {16, 24, 40}) {
    const FeatureSet f = e.embed(test::uniform_image(2, 3, size, size, size));
    EXPECT_EQ(f.rows(), 2);
    EXPECT_EQ(f.cols(), 64);
    EXPECT_TRUE(f.allFinite());
  }
  EXPECT_THROW(e.embed(Image(1, 3, 8, 8)), std::invalid_argument);
  EXPECT_THROW(e.embed(Image(1, 1, 16, 16)), std::invalid_argument);
}

TEST(Embedder, DeterministicAndRowwise) {
  const Image one = test::uniform_image(1, 3, 16, 16, 1);
  const auto both = stack<float>(std::vector<Image>{one, one});
  const ReferenceEmbedder e1(3), e2(3);
  const FeatureSet f = e1.embed(both);
  EXPECT_EQ(f.row(0), f.row(1));
  EXPECT_EQ(e2.embed(one).row(0), f.row(0));
  EXPECT_FALSE(ReferenceEmbedder(3, 43).embed(one).row(0) == f.row(0));
}

TEST(Embedder, ClassProbabilitiesAreRowStochastic) {
  const ReferenceEmbedder e(1);
  const Eigen::MatrixXd p = e.class_probabilities(e.embed(test::uniform_image(5, 1, 16, 16, 2)));
  ASSERT_EQ(p.cols(), 10);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(p.row(i).minCoeff(), 0.0);
  }
}

TEST(Embedder, SeparatesToyImagesFromNoise) {
  std::vector<Image> real_a, real_b, noise;
  for (int i = 0; i < 40; ++i) {
    (i % 2 ? real_a : real_b).push_back(make_toy_sample(i, 32, 3).image);
    noise.push_back(test::uniform_image(1, 3, 32, 32, 900 + i));
  }
  const ReferenceEmbedder e(3);
  const auto sa = compute_stats(e.embed(stack<float>(real_a)));
  const auto sb = compute_stats(e.embed(stack<float>(real_b)));
  const auto sn = compute_stats(e.embed(stack<float>(noise)));
  EXPECT_LT(frechet_distance(sa, sb), frechet_distance(sa, sn));
}
