#include "maskdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace maskdiff {

namespace {

void validate(int T, double s) {
  if (T < 1) throw std::domain_error("schedule: T must be >= 1, got " + std::to_string(T));
  if (!(s >= 0.0) || !std::isfinite(s)) {
    throw std::domain_error("schedule: offset s must be finite and >= 0");
  }
}

double cosine_f(int t, int T, double s) {
  const double arg = (static_cast<double>(t) / T + s) / (1.0 + s) * (std::numbers::pi / 2.0);
  const double c = std::cos(arg);
  return c * c;
}

}  // namespace

double cosine_alpha_bar(int t, int T, double s) {
  validate(T, s);
  if (t < 0 || t > T) {
    throw std::domain_error("schedule: timestep " + std::to_string(t) +
                            " outside [0, " + std::to_string(T) + "]");
  }
  if (t == 0) return 1.0;
  // The argument is exactly pi/2 at t = T; cos(pi/2) in floating point is
  // ~6e-17 rather than 0.
  if (t == T) return 0.0;
  return cosine_f(t, T, s) / cosine_f(0, T, s);
}

NoiseSchedule build_schedule(int T, double s) {
  validate(T, s);
  NoiseSchedule sched;
  sched.T = T;
  sched.s = s;
  const size_t n = static_cast<size_t>(T) + 1;
  sched.alpha_bar.resize(n);
  sched.sqrt_alpha_bar.resize(n);
  sched.sqrt_one_minus_alpha_bar.resize(n);
  sched.beta.assign(n, 0.0);
  sched.alpha.assign(n, 1.0);
  sched.posterior_variance.assign(n, 0.0);
  sched.beta_clipped.assign(n, false);

  for (int t = 0; t <= T; ++t) {
    const double ab = cosine_alpha_bar(t, T, s);
    sched.alpha_bar[t] = ab;
    sched.sqrt_alpha_bar[t] = std::sqrt(ab);
    sched.sqrt_one_minus_alpha_bar[t] = std::sqrt(1.0 - ab);
  }
  for (int t = 1; t <= T; ++t) {
    const double raw = 1.0 - sched.alpha_bar[t] / sched.alpha_bar[t - 1];
    sched.beta_clipped[t] = raw > kMaxBeta;
    sched.beta[t] = std::min(raw, kMaxBeta);
    sched.alpha[t] = 1.0 - sched.beta[t];
    sched.posterior_variance[t] =
        sched.beta[t] * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t]);
  }
  return sched;
}

}  // namespace maskdiff
