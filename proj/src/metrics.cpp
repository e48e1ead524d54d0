#include "maskdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

namespace maskdiff {

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace

GaussianStats compute_stats(const FeatureSet& f) {
  if (f.rows() < 2) {
    throw std::invalid_argument("statistics need N >= 2 samples, got " + std::to_string(f.rows()));
  }
  require_finite(f, "compute_stats");
  GaussianStats s;
  s.mu = f.colwise().mean().transpose();
  const Eigen::MatrixXd centered = f.rowwise() - s.mu.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(f.rows() - 1);
  s.cov = (0.5 * (s.cov + s.cov.transpose())).eval();
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mu.size();
  if (b.mu.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d ||
      b.cov.cols() != d) {
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  }
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  const double trace_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value =
      (a.mu - b.mu).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_root;
  if (!std::isfinite(value)) throw std::runtime_error("frechet_distance: non-finite result");
  if (value < 0.0) {
    if (value < -1e-6) throw std::runtime_error("frechet_distance: negative result");
    return 0.0;
  }
  return value;
}

double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const double v = x.dot(y) / static_cast<double>(x.size()) + 1.0;
  return v * v * v;
}

double kid(const FeatureSet& a, const FeatureSet& b) {
  if (a.rows() < 2 || b.rows() < 2) {
    throw std::invalid_argument("kid needs N >= 2 samples in each set");
  }
  if (a.cols() != b.cols()) throw std::invalid_argument("kid: feature dimension mismatch");
  require_finite(a, "kid");
  require_finite(b, "kid");
  const double dim = static_cast<double>(a.cols());
  auto kernel = [dim](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    Eigen::ArrayXXd k = (x * y.transpose()).array() / dim + 1.0;
    return Eigen::ArrayXXd(k * k * k);
  };
  const Eigen::ArrayXXd kaa = kernel(a, a), kbb = kernel(b, b), kab = kernel(a, b);
  const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());
  const double saa = kaa.sum() - kaa.matrix().trace();
  const double sbb = kbb.sum() - kbb.matrix().trace();
  return saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2.0 * kab.sum() / (m * n);
}

double inception_score(const Eigen::MatrixXd& probs) {
  const auto n = probs.rows(), k = probs.cols();
  if (n < 1 || k < 1) throw std::invalid_argument("inception_score: empty probability matrix");
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double p = probs(i, j);
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw std::invalid_argument("inception_score: row " + std::to_string(i) +
                                    " has an invalid probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw std::invalid_argument("inception_score: row " + std::to_string(i) +
                                  " does not sum to 1");
    }
  }
  // Extended precision keeps the closed-form cases (uniform, balanced
  // one-hot) exact after rounding back to double.
  std::vector<long double> marginal(static_cast<size_t>(k), 0.0L);
  for (Eigen::Index j = 0; j < k; ++j) {
    long double s = 0.0L;
    for (Eigen::Index i = 0; i < n; ++i) s += probs(i, j);
    marginal[j] = s / n;
  }
  long double total = 0.0L;
  for (Eigen::Index i = 0; i < n; ++i) {
    long double kl = 0.0L;
    for (Eigen::Index j = 0; j < k; ++j) {
      const long double p = probs(i, j);
      if (p > 0.0L) kl += p * std::log(p / marginal[j]);
    }
    total += kl;
  }
  const double score = static_cast<double>(std::exp(total / n));
  return std::clamp(score, 1.0, static_cast<double>(k));
}

OverlapCounts count_overlap(const Mask& pred, const Mask& truth) {
  if (!pred.same_shape(truth)) {
    throw std::invalid_argument("overlap: shape mismatch " + pred.shape_string() + " vs " +
                                truth.shape_string());
  }
  OverlapCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    const float p = pred[i], t = truth[i];
    if ((p != 0.0f && p != 1.0f) || (t != 0.0f && t != 1.0f)) {
      throw std::invalid_argument("overlap: masks must be binary");
    }
    if (p == 1.0f) {
      (t == 1.0f ? c.tp : c.fp) += 1;
    } else {
      (t == 1.0f ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

OverlapScores overlap_scores(const OverlapCounts& c) {
  OverlapScores s;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  const double total = tp + fp + fn + tn;
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  s.iou = both_empty ? 1.0 : tp / (tp + fp + fn);
  s.f1 = both_empty ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  s.accuracy = total > 0 ? (tp + tn) / total : 1.0;
  if (c.tp + c.fp == 0) {
    s.precision = c.fn > 0 ? 0.0 : 1.0;
  } else {
    s.precision = tp / (tp + fp);
  }
  return s;
}

OverlapScores overlap_metrics(const Mask& pred, const Mask& truth) {
  return overlap_scores(count_overlap(pred, truth));
}

Mask brightness_mask(const Image& generated, double threshold, int index) {
  if (index < 0 || index >= generated.n()) throw std::out_of_range("brightness_mask: bad index");
  Mask out(1, 1, generated.h(), generated.w());
  const size_t plane = generated.plane();
  for (size_t p = 0; p < plane; ++p) {
    double sum = 0.0;
    for (int c = 0; c < generated.c(); ++c) sum += generated.channel(index, c)[p];
    out[p] = sum / generated.c() > threshold ? 1.0f : 0.0f;
  }
  return out;
}

double conditioning_fidelity(const Image& generated, const Mask& mask, double threshold,
                             int index) {
  if (generated.h() != mask.h() || generated.w() != mask.w() || mask.c() != 1) {
    throw std::invalid_argument("conditioning_fidelity: spatial mismatch " +
                                generated.shape_string() + " vs " + mask.shape_string());
  }
  if (index >= mask.n()) throw std::out_of_range("conditioning_fidelity: bad mask index");
  return overlap_metrics(brightness_mask(generated, threshold, index), mask.slice(index)).iou;
}

}  // namespace maskdiff
