#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskdiff/metrics.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  // One row per sample of the batch.
  virtual FeatureSet embed(const Image& batch) const = 0;
};

// Fixed random network: three 3x3 conv + tanh layers (stride 2, 2, 1; widths
// 16, 32, 64) followed by global average pooling, all in double precision.
// Weights come from the portable Rng at the given seed, so features are
// reproducible across platforms up to libm rounding of tanh.
class ReferenceEmbedder final : public FeatureExtractor {
 public:
  static constexpr int kDim = 64;
  static constexpr int kClasses = 10;

  explicit ReferenceEmbedder(int channels = 3, uint64_t seed = 42);

  std::string id() const override;
  int dim() const override { return kDim; }
  int channels() const { return channels_; }
  // Images must be at least 16 x 16 with `channels` channels.
  FeatureSet embed(const Image& batch) const override;

  // Softmax over a fixed random linear head on the features; stands in for
  // a classifier when computing the inception score.
  Eigen::MatrixXd class_probabilities(const FeatureSet& features) const;

 private:
  struct ConvLayer {
    int in = 0, out = 0, stride = 1;
    std::vector<double> weight;  // out x in x 3 x 3
    std::vector<double> bias;
  };

  int channels_;
  uint64_t seed_;
  std::vector<ConvLayer> layers_;
  Eigen::MatrixXd head_;  // kClasses x kDim
};

}  // namespace maskdiff
