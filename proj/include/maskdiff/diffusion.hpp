#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "maskdiff/denoiser.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Anything that predicts the added noise from a mask-conditioned input
// (image channels followed by the mask channel).
class EpsilonModel {
 public:
  virtual ~EpsilonModel() = default;
  virtual int in_channels() const = 0;
  virtual Tensor<float> predict(const Tensor<float>& conditioned,
                                const std::vector<int>& t) const = 0;
};

// Binds a network description to one parameter set.
class DenoiserModel final : public EpsilonModel {
 public:
  DenoiserModel(const Denoiser<float>& net, const DenoiserParams& params)
      : net_(net), params_(params) {}
  int in_channels() const override { return net_.config().in_channels; }
  Tensor<float> predict(const Tensor<float>& conditioned,
                        const std::vector<int>& t) const override {
    return net_.forward(params_, conditioned, t);
  }

 private:
  const Denoiser<float>& net_;
  const DenoiserParams& params_;
};

enum class ReverseVariance { Posterior, Beta };

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per sample. t = 0 is accepted and
// returns x0 unchanged.
// Computed in double, stored in T (float or double).
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& t, const Tensor<T>& eps,
                   const NoiseSchedule& sched);
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

// (xt - sqrt(1 - abar_t) eps) / sqrt(abar_t). Throws std::domain_error when
// abar_t = 0.
template <typename T>
Tensor<T> invert_q_sample(const Tensor<T>& xt, int t, const Tensor<T>& eps,
                          const NoiseSchedule& sched);

// [xt | mask] along channels; the mask is copied through untouched.
Image concat_condition(const Image& xt, const Mask& mask);

// Mean absolute error between eps and the model's prediction for the noised,
// conditioned input.
double training_loss(const EpsilonModel& model, const Image& x0, const Mask& mask,
                     const std::vector<int>& t, const Image& eps,
                     const NoiseSchedule& sched);

// Same loss for the concrete network, accumulating dLoss/dparams into grads.
double training_loss_and_grad(const Denoiser<float>& net, const DenoiserParams& params,
                              const Image& x0, const Mask& mask,
                              const std::vector<int>& t, const Image& eps,
                              const NoiseSchedule& sched, DenoiserParams& grads);

// One ancestral step x_t -> x_{t-1}:
//   (xt - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z
// with sigma_t^2 the posterior variance (or beta_t). `z` may be null for a
// zero draw and must be zero when t = 1.
Image p_sample_step(const EpsilonModel& model, const Image& xt, const Mask& mask,
                    int t, const NoiseSchedule& sched, const Image* z,
                    ReverseVariance variance = ReverseVariance::Posterior);

struct SampleOptions {
  ReverseVariance variance = ReverseVariance::Posterior;
  // Called before each model evaluation with the conditioned input.
  std::function<void(int t, const Image& conditioned)> on_step;
};

// Full reverse chain from x_T ~ N(0, I) for a batch of masks, one seed per
// mask. Output is clamped to [-1, 1].
Image sample(const EpsilonModel& model, const Mask& masks, const NoiseSchedule& sched,
             std::span<const uint64_t> seeds, const SampleOptions& options = {});
Image sample(const EpsilonModel& model, const Mask& mask, const NoiseSchedule& sched,
             uint64_t seed, const SampleOptions& options = {});

// Standard normal tensor drawn from a seeded generator.
Image gaussian_like(int n, int c, int h, int w, uint64_t seed);

}  // namespace maskdiff
