#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// N x D embeddings, one row per image.
using FeatureSet = Eigen::MatrixXd;

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;  // divisor N - 1
};

// Throws std::invalid_argument when N < 2.
GaussianStats compute_stats(const FeatureSet& features);

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace of the root
// is taken from the eigenvalues of sqrt(S_a) S_b sqrt(S_a), floored at 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Unbiased MMD^2 with k(x, y) = (x.y / D + 1)^3. Not clamped.
double kid(const FeatureSet& a, const FeatureSet& b);
double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// exp(mean_i KL(p_i || p_y)) for an N x K row-stochastic matrix; in [1, K].
double inception_score(const Eigen::MatrixXd& probs);

struct OverlapCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct OverlapScores {
  double iou = 0, f1 = 0, accuracy = 0, precision = 0;
};

// Both inputs must have equal shapes and hold only 0 and 1.
OverlapCounts count_overlap(const Mask& pred, const Mask& truth);
OverlapScores overlap_scores(const OverlapCounts& counts);
OverlapScores overlap_metrics(const Mask& pred, const Mask& truth);

// Channel mean of sample `index` thresholded (strictly above -> 1), then IoU
// against the mask's sample `index`.
Mask brightness_mask(const Image& generated, double threshold, int index = 0);
double conditioning_fidelity(const Image& generated, const Mask& mask, double threshold,
                             int index = 0);

}  // namespace maskdiff
