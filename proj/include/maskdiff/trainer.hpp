#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/data.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct TrainConfig {
  int iterations = 5000;
  double learning_rate = 1e-4;
  int batch_size = 16;
  int timesteps = 250;
  double schedule_offset = kDefaultScheduleOffset;
  uint64_t seed = 0;
  int checkpoint_every = 1000;
  std::string data_root;
  int image_size = 32;
  std::string out_dir = "run";
  std::string loss = "l1";  // the only accepted value
  double train_fraction = 0.9;
  bool augment = true;
  int log_every = 100;       // console progress; the loss log gets every step
  std::string resume;        // checkpoint to continue from
  int base_channels = 64;
  std::vector<int> channel_mults{1, 2, 4, 8};
  std::vector<int> attention_levels{2, 3};
  int groups = 8;

  // Throws std::invalid_argument naming the offending key.
  void validate() const;
  DenoiserConfig model_config(int image_channels) const;
};

// Flat "key = value" lines; '#' starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(const std::string& text, const std::string& source = "config");
TrainConfig load_train_config(const std::filesystem::path& path);
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string format_train_config(const TrainConfig& cfg);

// In-memory training loop over a fixed sample set. Step k draws its batch,
// augmentation, timesteps and noise from a stream derived from (seed, k), so
// a run resumed from a checkpoint continues exactly like an uninterrupted one.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<PairedSample> data);
  Trainer(const TrainConfig& cfg, std::vector<PairedSample> data, const Checkpoint& resume);

  // One optimizer step; returns the batch loss before the update.
  double step();
  int64_t steps_done() const { return step_; }

  const DenoiserParams& params() const { return params_; }
  const Denoiser<float>& network() const { return net_; }
  const NoiseSchedule& schedule() const { return sched_; }
  Checkpoint checkpoint() const;

 private:
  TrainConfig cfg_;
  std::vector<PairedSample> data_;
  Denoiser<float> net_;
  NoiseSchedule sched_;
  DenoiserParams params_;
  AdamState adam_;
  int64_t step_ = 0;
};

struct TrainSummary {
  int64_t first_step = 0;  // steps already done when this run started
  int64_t final_step = 0;
  std::vector<double> losses;  // losses of the steps run here
  std::filesystem::path final_checkpoint;
};

// Full command: loads the dataset, trains, writes <out_dir>/loss.tsv,
// <out_dir>/checkpoint_<step>.mdck every checkpoint_every steps and
// <out_dir>/final.mdck at the end. Progress lines go to `log`.
TrainSummary run_training(const TrainConfig& cfg, std::ostream& log);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, int64_t step);

}  // namespace maskdiff
