#include "maskdiff/embedder.hpp"

#include <cmath>
#include <stdexcept>

#include "maskdiff/random.hpp"

namespace maskdiff {

namespace {

// Head logits are scaled up so the pooled features (|f| well below 1) give
// non-flat class posteriors.
constexpr double kHeadScale = 8.0;

}  // namespace

ReferenceEmbedder::ReferenceEmbedder(int channels, uint64_t seed)
    : channels_(channels), seed_(seed) {
  if (channels < 1) throw std::invalid_argument("ReferenceEmbedder: channels must be >= 1");
  Rng rng(seed);
  const int widths[] = {channels, 16, 32, kDim};
  const int strides[] = {2, 2, 1};
  for (int l = 0; l < 3; ++l) {
    ConvLayer layer;
    layer.in = widths[l];
    layer.out = widths[l + 1];
    layer.stride = strides[l];
    // Variance-preserving uniform bound sqrt(3 / fan_in).
    const double bound = std::sqrt(3.0 / (layer.in * 9));
    layer.weight.resize(static_cast<size_t>(layer.out) * layer.in * 9);
    for (auto& w : layer.weight) w = rng.uniform(-bound, bound);
    layer.bias.resize(layer.out);
    for (auto& b : layer.bias) b = rng.uniform(-0.1, 0.1);
    layers_.push_back(std::move(layer));
  }
  head_.resize(kClasses, kDim);
  const double bound = std::sqrt(3.0 / kDim);
  for (int i = 0; i < kClasses; ++i) {
    for (int j = 0; j < kDim; ++j) head_(i, j) = rng.uniform(-bound, bound);
  }
}

std::string ReferenceEmbedder::id() const {
  return "refconv3-tanh-gap" + std::to_string(kDim) + "-c" + std::to_string(channels_) +
         "-seed" + std::to_string(seed_);
}

FeatureSet ReferenceEmbedder::embed(const Image& batch) const {
  if (batch.c() != channels_) {
    throw std::invalid_argument("embedder expects " + std::to_string(channels_) +
                                " channels, got " + std::to_string(batch.c()));
  }
  if (batch.h() < 16 || batch.w() < 16) {
    throw std::invalid_argument("embedder needs images of at least 16x16");
  }
  FeatureSet out(batch.n(), kDim);
  for (int b = 0; b < batch.n(); ++b) {
    int h = batch.h(), w = batch.w();
    std::vector<double> act(batch.sample(b), batch.sample(b) + batch.sample_size());
    for (const auto& layer : layers_) {
      const int oh = (h - 1) / layer.stride + 1, ow = (w - 1) / layer.stride + 1;
      std::vector<double> next(static_cast<size_t>(layer.out) * oh * ow);
      for (int o = 0; o < layer.out; ++o) {
        for (int y = 0; y < oh; ++y) {
          for (int x = 0; x < ow; ++x) {
            double acc = layer.bias[o];
            for (int i = 0; i < layer.in; ++i) {
              const double* wk = &layer.weight[(static_cast<size_t>(o) * layer.in + i) * 9];
              const double* plane = &act[static_cast<size_t>(i) * h * w];
              for (int ky = 0; ky < 3; ++ky) {
                const int sy = y * layer.stride + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int sx = x * layer.stride + kx - 1;
                  if (sx < 0 || sx >= w) continue;
                  acc += wk[ky * 3 + kx] * plane[sy * w + sx];
                }
              }
            }
            next[(static_cast<size_t>(o) * oh + y) * ow + x] = std::tanh(acc);
          }
        }
      }
      act = std::move(next);
      h = oh;
      w = ow;
    }
    const size_t plane = static_cast<size_t>(h) * w;
    for (int o = 0; o < kDim; ++o) {
      double sum = 0.0;
      for (size_t p = 0; p < plane; ++p) sum += act[o * plane + p];
      out(b, o) = sum / static_cast<double>(plane);
    }
  }
  return out;
}

Eigen::MatrixXd ReferenceEmbedder::class_probabilities(const FeatureSet& features) const {
  if (features.cols() != kDim) throw std::invalid_argument("class_probabilities: bad dim");
  Eigen::MatrixXd logits = kHeadScale * features * head_.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

}  // namespace maskdiff
