#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "maskdiff/data.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/embedder.hpp"

namespace maskdiff {

struct SampleRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path masks_dir;
  std::filesystem::path out_dir;
  uint64_t seed = 0;
  int count = 1;
  ReverseVariance variance = ReverseVariance::Posterior;
};

struct SampleResult {
  std::vector<std::filesystem::path> images;    // <out>/<mask id>_<k>.png
  std::vector<std::filesystem::path> montages;  // <out>/montage/<mask id>.png
};

// Seed of sample k for a mask id.
uint64_t sample_seed(uint64_t seed, const std::string& mask_id, int k);

SampleResult run_sampling(const SampleRequest& request, std::ostream& log);

struct EvaluateRequest {
  std::filesystem::path real_dir;
  std::filesystem::path synth_dir;
  std::optional<std::filesystem::path> masks_dir;
  std::filesystem::path report;
  double threshold = 0.0;
};

struct EvaluationReport {
  double fid = 0, kid = 0, is_synth = 0, is_real = 0;
  size_t n_real = 0, n_synth = 0;
  std::string embedder_id;
  std::optional<double> fidelity;
  size_t n_fidelity = 0;
};

// Images of a directory (or of <dir>/images when present), stacked. All must
// share one shape.
Image load_image_set(const std::filesystem::path& dir, std::vector<std::string>* ids = nullptr);

// Embeds a batch in parallel chunks; rows keep the batch order.
FeatureSet embed_batch(const FeatureExtractor& extractor, const Image& batch);

// Mask id of a sample file stem "<id>_<k>".
std::string mask_id_of(const std::string& sample_stem);

EvaluationReport run_evaluation(const EvaluateRequest& request, std::ostream& log);
void write_report(const std::filesystem::path& path, const EvaluationReport& report);

// Command entry points: exit status 0 on success; failures print one
// "error: ..." line to `err` and return 1.
int cmd_make_toy(int n, int size, uint64_t seed, const std::filesystem::path& out_dir,
                 int channels, std::ostream& out, std::ostream& err);
int cmd_train(const std::filesystem::path& config_file,
              const std::vector<std::string>& overrides, std::ostream& out, std::ostream& err);
int cmd_sample(const SampleRequest& request, std::ostream& out, std::ostream& err);
int cmd_evaluate(const EvaluateRequest& request, std::ostream& out, std::ostream& err);

}  // namespace maskdiff
