#pragma once

#include <vector>

namespace maskdiff {

inline constexpr double kDefaultScheduleOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

// Cosine variance schedule and every coefficient derived from it.
// Arrays are indexed by timestep; t = 0 is clean data, the model only ever
// sees t in [1, T]. Entries at t = 0 of the per-step arrays (beta, alpha,
// posterior_variance) are unused and hold 0, 1, 0 respectively.
struct NoiseSchedule {
  int T = 0;
  double s = kDefaultScheduleOffset;
  std::vector<double> alpha_bar;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> sqrt_alpha_bar;
  std::vector<double> sqrt_one_minus_alpha_bar;
  std::vector<double> posterior_variance;
  // beta_clipped[t] is true when the 0.999 ceiling replaced the raw value.
  std::vector<bool> beta_clipped;
};

// f(t) / f(0) with f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).
// Exactly 1 at t = 0 and exactly 0 at t = T. Throws std::domain_error when
// t > T, t < 0, T < 1 or s < 0.
double cosine_alpha_bar(int t, int T, double s);

NoiseSchedule build_schedule(int T, double s = kDefaultScheduleOffset);

}  // namespace maskdiff
