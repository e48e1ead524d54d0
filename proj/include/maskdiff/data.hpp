#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskdiff/random.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// One training pair: image 1 x C x H x W in [-1, 1], mask 1 x 1 x H x W in {0, 1}.
struct PairedSample {
  Image image;
  Mask mask;
  std::string id;
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int height = 0;
  int width = 0;
};

// Problems that do not stop loading but are worth surfacing.
struct LoadReport {
  std::vector<std::string> empty_masks;
};

inline constexpr float kMaskThreshold = 0.5f;
inline constexpr double kMaxSmallRotationDeg = 15.0;

Image resize_bilinear(const Image& image, int height, int width);
// Nearest-neighbour resize; values are carried over unchanged.
Tensor<float> resize_nearest(const Tensor<float>& plane, int height, int width);
// v >= threshold -> 1, else 0.
Mask binarize(const Tensor<float>& values, float threshold = kMaskThreshold);

// Reads an (image, mask) file pair, resizes to height x width and applies the
// value mappings. A mask that is empty after thresholding is recorded in the
// report (when given) but still returned.
PairedSample load_pair(const std::filesystem::path& image_file,
                       const std::filesystem::path& mask_file, int height, int width,
                       LoadReport* report = nullptr, std::string id = {});

// Reads a mask file at its native size: channels averaged, scaled to [0, 1]
// and thresholded.
Mask load_mask(const std::filesystem::path& mask_file);

// One draw of the geometric augmentation. Identity when all fields are off.
struct AugmentParams {
  bool flip = false;
  int quarter_turns = 0;         // counter-clockwise, 0..3
  double rotation_deg = 0.0;     // small-angle rotation, 0 disables
};

// flip with p = 1/2; quarter turns uniform in {0..3} (only {0, 2} when the
// sample is not square); with p = 1/2 a rotation uniform in [-15, 15] degrees.
AugmentParams draw_augment(Rng& rng, bool square);

// Same transform for image (bilinear) and mask (nearest, re-thresholded);
// out-of-frame samples use reflect padding.
PairedSample apply_augment(const PairedSample& sample, const AugmentParams& params);
PairedSample augment(const PairedSample& sample, Rng& rng);

// Geometric primitives, applied per channel to any batch-of-one tensor.
Tensor<float> flip_horizontal(const Tensor<float>& x);
Tensor<float> rotate_quarter_turns(const Tensor<float>& x, int turns);
enum class Interp { Bilinear, Nearest };
Tensor<float> rotate_small(const Tensor<float>& x, double degrees, Interp interp);

struct ToyOptions {
  int channels = 3;
  double min_axis_fraction = 0.15;  // full axis length bounds as fractions of the side
  double max_axis_fraction = 0.40;
  double noise_sigma = 0.03;
};

// Parameters of one toy ellipse in pixel units: centre (cx, cy), semi-axes a, b.
struct ToyEllipse {
  double cx = 0, cy = 0, a = 0, b = 0, theta = 0;
};

// Draws the ellipse and rasterizes image and mask for toy pair `index`.
PairedSample make_toy_sample(int index, int size, uint64_t seed,
                             const ToyOptions& options = {}, ToyEllipse* ellipse = nullptr);

// Writes n pairs as PNGs under out_dir/images and out_dir/masks plus
// out_dir/manifest.tsv. Deterministic per seed.
DatasetManifest make_toy_dataset(int n, int size, uint64_t seed,
                                 const std::filesystem::path& out_dir,
                                 const ToyOptions& options = {});

// manifest.tsv: header "id\timage_path\tmask_path", paths relative to root.
void write_manifest(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& root);

// Uses root/manifest.tsv when present, else pairs root/images/<id>.<ext>
// with root/masks/<id>.<ext> by file stem (sorted by id).
DatasetManifest open_dataset(const std::filesystem::path& root);

std::vector<PairedSample> load_dataset(const DatasetManifest& manifest, int height,
                                       int width, LoadReport* report = nullptr);

// Leading fraction of entries for training, the rest held out.
struct Split {
  std::vector<size_t> train;
  std::vector<size_t> test;
};
Split split_indices(size_t count, double train_fraction = 0.9);

// Sorted image files in a directory.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace maskdiff
