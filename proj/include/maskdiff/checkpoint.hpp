#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "maskdiff/denoiser.hpp"
#include "maskdiff/params.hpp"

namespace maskdiff {

// Adaptive-moment optimizer state; moments share the parameter layout.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  ParamSet<float> m, v;

  static AdamState for_params(const ParamSet<float>& params);
  // One update at learning rate lr; gradients are not modified.
  void step(ParamSet<float>& params, const ParamSet<float>& grads, double lr);
};

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DenoiserConfig model;
  int timesteps = 0;
  double schedule_offset = 0.0;
  int64_t step = 0;
  DenoiserParams params;
  std::optional<AdamState> optimizer;
  // Free-form header entries (image size, seed, ...).
  std::map<std::string, std::string> extra;
};

// Layout:
//   "MDCK", u32 version, u32 header length, header text (key=value lines),
//   u32 tensor count, then per tensor: u32 name length, name bytes,
//   u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 dims, raw values.
// All integers and values little-endian. Optimizer moments are stored as
// tensors named "adam.m/<param>" and "adam.v/<param>".
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parsing helpers shared with the config reader.
std::string format_int_list(const std::vector<int>& values);
std::vector<int> parse_int_list(const std::string& text);
std::string format_double(double v);
double parse_double(const std::string& text);
int64_t parse_int(const std::string& text);

}  // namespace maskdiff
