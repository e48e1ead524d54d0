#include "maskdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "maskdiff/random.hpp"

namespace maskdiff {

namespace {

void check_timestep(int t, const NoiseSchedule& sched, int lo) {
  if (t < lo || t > sched.T) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" +
                            std::to_string(lo) + ", " + std::to_string(sched.T) + "]");
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_string() +
                                " vs " + b.shape_string());
  }
}

void fill_normal(Rng& rng, float* dst, size_t n) {
  for (size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(rng.normal());
}

}  // namespace

Image gaussian_like(int n, int c, int h, int w, uint64_t seed) {
  Image out(n, c, h, w);
  Rng rng(seed);
  fill_normal(rng, out.data(), out.size());
  return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& t, const Tensor<T>& eps,
                   const NoiseSchedule& sched) {
  check_same_shape(x0, eps, "q_sample");
  if (static_cast<int>(t.size()) != x0.n()) {
    throw std::invalid_argument("q_sample: need one timestep per sample");
  }
  Tensor<T> xt = Tensor<T>::uninit_like(x0);
  for (int s = 0; s < x0.n(); ++s) {
    check_timestep(t[s], sched, 0);
    const double a = sched.sqrt_alpha_bar[t[s]];
    const double b = sched.sqrt_one_minus_alpha_bar[t[s]];
    const T* xs = x0.sample(s);
    const T* es = eps.sample(s);
    T* out = xt.sample(s);
    for (size_t i = 0; i < x0.sample_size(); ++i) {
      out[i] = static_cast<T>(a * xs[i] + b * es[i]);
    }
  }
  return xt;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  return q_sample(x0, std::vector<int>(x0.n(), t), eps, sched);
}

template <typename T>
Tensor<T> invert_q_sample(const Tensor<T>& xt, int t, const Tensor<T>& eps,
                          const NoiseSchedule& sched) {
  check_same_shape(xt, eps, "invert_q_sample");
  check_timestep(t, sched, 0);
  if (sched.alpha_bar[t] <= 0.0) {
    throw std::domain_error("invert_q_sample: alpha_bar is zero at t = " + std::to_string(t) +
                            ", signal is unrecoverable");
  }
  const double a = sched.sqrt_alpha_bar[t];
  const double b = sched.sqrt_one_minus_alpha_bar[t];
  Tensor<T> x0 = Tensor<T>::uninit_like(xt);
  for (size_t i = 0; i < xt.size(); ++i) {
    x0[i] = static_cast<T>((xt[i] - b * eps[i]) / a);
  }
  return x0;
}

template Tensor<float> q_sample(const Tensor<float>&, const std::vector<int>&,
                                const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> q_sample(const Tensor<double>&, const std::vector<int>&,
                                 const Tensor<double>&, const NoiseSchedule&);
template Tensor<float> q_sample(const Tensor<float>&, int, const Tensor<float>&,
                                const NoiseSchedule&);
template Tensor<double> q_sample(const Tensor<double>&, int, const Tensor<double>&,
                                 const NoiseSchedule&);
template Tensor<float> invert_q_sample(const Tensor<float>&, int, const Tensor<float>&,
                                       const NoiseSchedule&);
template Tensor<double> invert_q_sample(const Tensor<double>&, int, const Tensor<double>&,
                                        const NoiseSchedule&);

Image concat_condition(const Image& xt, const Mask& mask) {
  if (mask.c() != 1) throw std::invalid_argument("concat_condition: mask must have 1 channel");
  if (xt.n() != mask.n() || xt.h() != mask.h() || xt.w() != mask.w()) {
    throw std::invalid_argument("concat_condition: image " + xt.shape_string() +
                                " and mask " + mask.shape_string() + " disagree");
  }
  return concat_channels(xt, mask);
}

double training_loss(const EpsilonModel& model, const Image& x0, const Mask& mask,
                     const std::vector<int>& t, const Image& eps,
                     const NoiseSchedule& sched) {
  for (int ti : t) check_timestep(ti, sched, 1);
  const Image xt = q_sample(x0, t, eps, sched);
  const Image pred = model.predict(concat_condition(xt, mask), t);
  check_same_shape(pred, eps, "training_loss");
  double sum = 0.0;
  for (size_t i = 0; i < eps.size(); ++i) sum += std::abs(static_cast<double>(pred[i]) - eps[i]);
  return sum / static_cast<double>(eps.size());
}

double training_loss_and_grad(const Denoiser<float>& net, const DenoiserParams& params,
                              const Image& x0, const Mask& mask,
                              const std::vector<int>& t, const Image& eps,
                              const NoiseSchedule& sched, DenoiserParams& grads) {
  for (int ti : t) check_timestep(ti, sched, 1);
  const Image xt = q_sample(x0, t, eps, sched);
  Denoiser<float>::Tape tape;
  const Image pred = net.forward(params, concat_condition(xt, mask), t, &tape);
  check_same_shape(pred, eps, "training_loss_and_grad");

  const double inv_count = 1.0 / static_cast<double>(eps.size());
  const auto g = static_cast<float>(inv_count);
  Image dpred = Image::like(pred);
  double sum = 0.0;
  for (size_t i = 0; i < eps.size(); ++i) {
    const double diff = static_cast<double>(pred[i]) - eps[i];
    sum += std::abs(diff);
    dpred[i] = diff > 0.0 ? g : (diff < 0.0 ? -g : 0.0f);
  }
  net.backward(params, tape, dpred, grads);
  return sum * inv_count;
}

Image p_sample_step(const EpsilonModel& model, const Image& xt, const Mask& mask,
                    int t, const NoiseSchedule& sched, const Image* z,
                    ReverseVariance variance) {
  check_timestep(t, sched, 1);
  if (z) {
    check_same_shape(xt, *z, "p_sample_step");
    if (t == 1 && std::any_of(z->values().begin(), z->values().end(),
                              [](float v) { return v != 0.0f; })) {
      throw std::invalid_argument("p_sample_step: noise must be zero at t = 1");
    }
  }
  const Image eps_hat = model.predict(concat_condition(xt, mask), std::vector<int>(xt.n(), t));
  check_same_shape(eps_hat, xt, "p_sample_step");

  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
  const double eps_coef = sched.beta[t] / sched.sqrt_one_minus_alpha_bar[t];
  const double var =
      variance == ReverseVariance::Posterior ? sched.posterior_variance[t] : sched.beta[t];
  const double sigma = std::sqrt(var);

  Image out = Image::like(xt);
  for (size_t i = 0; i < xt.size(); ++i) {
    double v = inv_sqrt_alpha * (xt[i] - eps_coef * eps_hat[i]);
    if (z) v += sigma * (*z)[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

Image sample(const EpsilonModel& model, const Mask& masks, const NoiseSchedule& sched,
             std::span<const uint64_t> seeds, const SampleOptions& options) {
  if (masks.c() != 1) throw std::invalid_argument("sample: masks must have 1 channel");
  if (static_cast<int>(seeds.size()) != masks.n()) {
    throw std::invalid_argument("sample: need one seed per mask");
  }
  const int channels = model.in_channels() - 1;
  if (channels < 1) throw std::invalid_argument("sample: model has no image channels");

  const int n = masks.n();
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (uint64_t s : seeds) rngs.emplace_back(s);

  Image x(n, channels, masks.h(), masks.w());
  for (int s = 0; s < n; ++s) fill_normal(rngs[s], x.sample(s), x.sample_size());

  Image z = Image::like(x);
  for (int t = sched.T; t >= 1; --t) {
    if (t > 1) {
      for (int s = 0; s < n; ++s) fill_normal(rngs[s], z.sample(s), z.sample_size());
    }
    if (options.on_step) options.on_step(t, concat_condition(x, masks));
    x = p_sample_step(model, x, masks, t, sched, t > 1 ? &z : nullptr, options.variance);
  }
  for (auto& v : x.values()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

Image sample(const EpsilonModel& model, const Mask& mask, const NoiseSchedule& sched,
             uint64_t seed, const SampleOptions& options) {
  const uint64_t seeds[] = {seed};
  if (mask.n() != 1) throw std::invalid_argument("sample: expected a single mask");
  return sample(model, mask, sched, seeds, options);
}

}  // namespace maskdiff
