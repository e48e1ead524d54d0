#include "maskdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "maskdiff/image_io.hpp"

namespace maskdiff {

namespace fs = std::filesystem;

namespace {

double reflect(double v, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  v = std::fmod(v, period);
  if (v < 0) v += period;
  return v > n - 1 ? period - v : v;
}

float sample_bilinear(const float* plane, int h, int w, double y, double x) {
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, h - 1);
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = std::clamp(y - y0, 0.0, 1.0);
  const double fx = std::clamp(x - x0, 0.0, 1.0);
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

void require_single(const Tensor<float>& x, const char* what) {
  if (x.n() != 1) throw std::invalid_argument(std::string(what) + ": expected a batch of one");
}

// Gray collapse of a decoded mask to [0, 1].
Tensor<float> mask_plane(const RawImage& raw) {
  Tensor<float> out(1, 1, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      int sum = 0;
      for (int c = 0; c < raw.channels; ++c) sum += raw.at(y, x, c);
      out.at(0, 0, y, x) = static_cast<float>(sum / (255.0 * raw.channels));
    }
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Image resize_bilinear(const Image& image, int height, int width) {
  require_single(image, "resize_bilinear");
  if (height < 1 || width < 1) throw std::invalid_argument("resize_bilinear: bad target size");
  if (image.h() == height && image.w() == width) return image;
  Image out(1, image.c(), height, width, Uninitialized{});
  const double sy = static_cast<double>(image.h()) / height;
  const double sx = static_cast<double>(image.w()) / width;
  for (int c = 0; c < image.c(); ++c) {
    const float* src = image.channel(0, c);
    for (int y = 0; y < height; ++y) {
      const double yy = std::max((y + 0.5) * sy - 0.5, 0.0);
      for (int x = 0; x < width; ++x) {
        const double xx = std::max((x + 0.5) * sx - 0.5, 0.0);
        out.at(0, c, y, x) = sample_bilinear(src, image.h(), image.w(), yy, xx);
      }
    }
  }
  return out;
}

Tensor<float> resize_nearest(const Tensor<float>& plane, int height, int width) {
  require_single(plane, "resize_nearest");
  if (height < 1 || width < 1) throw std::invalid_argument("resize_nearest: bad target size");
  Tensor<float> out(1, plane.c(), height, width, Uninitialized{});
  const double sy = static_cast<double>(plane.h()) / height;
  const double sx = static_cast<double>(plane.w()) / width;
  for (int c = 0; c < plane.c(); ++c) {
    for (int y = 0; y < height; ++y) {
      const int iy = std::min(static_cast<int>((y + 0.5) * sy), plane.h() - 1);
      for (int x = 0; x < width; ++x) {
        const int ix = std::min(static_cast<int>((x + 0.5) * sx), plane.w() - 1);
        out.at(0, c, y, x) = plane.at(0, c, iy, ix);
      }
    }
  }
  return out;
}

Mask binarize(const Tensor<float>& values, float threshold) {
  Mask out = Mask::uninit_like(values);
  for (size_t i = 0; i < values.size(); ++i) out[i] = values[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

PairedSample load_pair(const fs::path& image_file, const fs::path& mask_file, int height,
                       int width, LoadReport* report, std::string id) {
  const RawImage raw_image = read_image(image_file);
  const RawImage raw_mask = read_image(mask_file);
  PairedSample sample;
  sample.id = id.empty() ? image_file.stem().string() : std::move(id);
  sample.image = resize_bilinear(to_tensor(raw_image), height, width);
  sample.mask = binarize(resize_nearest(mask_plane(raw_mask), height, width));
  const bool empty = std::none_of(sample.mask.values().begin(), sample.mask.values().end(),
                                  [](float v) { return v > 0.0f; });
  if (empty && report) report->empty_masks.push_back(sample.id);
  return sample;
}

Mask load_mask(const fs::path& mask_file) { return binarize(mask_plane(read_image(mask_file))); }

// -------------------------------------------------------------- geometry

Tensor<float> flip_horizontal(const Tensor<float>& x) {
  require_single(x, "flip_horizontal");
  Tensor<float> out = Tensor<float>::uninit_like(x);
  for (int c = 0; c < x.c(); ++c) {
    for (int y = 0; y < x.h(); ++y) {
      for (int i = 0; i < x.w(); ++i) out.at(0, c, y, i) = x.at(0, c, y, x.w() - 1 - i);
    }
  }
  return out;
}

Tensor<float> rotate_quarter_turns(const Tensor<float>& x, int turns) {
  require_single(x, "rotate_quarter_turns");
  turns = ((turns % 4) + 4) % 4;
  if (turns == 0) return x;
  Tensor<float> cur = x;
  for (int k = 0; k < turns; ++k) {
    // Counter-clockwise: out(y, x) = in(x, W - 1 - y), output is W x H.
    Tensor<float> out(1, cur.c(), cur.w(), cur.h(), Uninitialized{});
    for (int c = 0; c < cur.c(); ++c) {
      for (int y = 0; y < out.h(); ++y) {
        for (int i = 0; i < out.w(); ++i) out.at(0, c, y, i) = cur.at(0, c, i, cur.w() - 1 - y);
      }
    }
    cur = std::move(out);
  }
  return cur;
}

Tensor<float> rotate_small(const Tensor<float>& x, double degrees, Interp interp) {
  require_single(x, "rotate_small");
  if (degrees == 0.0) return x;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (x.h() - 1) / 2.0, cx = (x.w() - 1) / 2.0;
  Tensor<float> out = Tensor<float>::uninit_like(x);
  for (int y = 0; y < x.h(); ++y) {
    for (int i = 0; i < x.w(); ++i) {
      const double dy = y - cy, dx = i - cx;
      const double sx = reflect(cx + cs * dx + sn * dy, x.w());
      const double sy = reflect(cy - sn * dx + cs * dy, x.h());
      for (int c = 0; c < x.c(); ++c) {
        const float* plane = x.channel(0, c);
        if (interp == Interp::Bilinear) {
          out.at(0, c, y, i) = sample_bilinear(plane, x.h(), x.w(), sy, sx);
        } else {
          const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, x.h() - 1);
          const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, x.w() - 1);
          out.at(0, c, y, i) = plane[iy * x.w() + ix];
        }
      }
    }
  }
  return out;
}

AugmentParams draw_augment(Rng& rng, bool square) {
  AugmentParams p;
  p.flip = rng.coin();
  p.quarter_turns = square ? static_cast<int>(rng.integer(0, 3))
                           : 2 * static_cast<int>(rng.integer(0, 1));
  if (rng.coin()) p.rotation_deg = rng.uniform(-kMaxSmallRotationDeg, kMaxSmallRotationDeg);
  return p;
}

PairedSample apply_augment(const PairedSample& sample, const AugmentParams& params) {
  if (params.quarter_turns % 2 != 0 && sample.image.h() != sample.image.w()) {
    throw std::invalid_argument("apply_augment: odd quarter turns need a square sample");
  }
  PairedSample out = sample;
  if (params.flip) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  if (params.quarter_turns % 4 != 0) {
    out.image = rotate_quarter_turns(out.image, params.quarter_turns);
    out.mask = rotate_quarter_turns(out.mask, params.quarter_turns);
  }
  if (params.rotation_deg != 0.0) {
    out.image = rotate_small(out.image, params.rotation_deg, Interp::Bilinear);
    out.mask = binarize(rotate_small(out.mask, params.rotation_deg, Interp::Nearest));
  }
  return out;
}

PairedSample augment(const PairedSample& sample, Rng& rng) {
  return apply_augment(sample, draw_augment(rng, sample.image.h() == sample.image.w()));
}

// ------------------------------------------------------------------- toy

PairedSample make_toy_sample(int index, int size, uint64_t seed, const ToyOptions& options,
                             ToyEllipse* ellipse_out) {
  if (size < 16) throw std::invalid_argument("toy dataset: size must be >= 16");
  if (options.channels != 1 && options.channels != 3) {
    throw std::invalid_argument("toy dataset: channels must be 1 or 3");
  }
  Rng rng = Rng::derive(seed, static_cast<uint64_t>(index));

  ToyEllipse e;
  e.a = 0.5 * rng.uniform(options.min_axis_fraction, options.max_axis_fraction) * size;
  e.b = 0.5 * rng.uniform(options.min_axis_fraction, options.max_axis_fraction) * size;
  e.theta = rng.uniform(0.0, std::numbers::pi);
  const double cs = std::cos(e.theta), sn = std::sin(e.theta);
  // Half extents of the rotated ellipse; keep it inside the frame.
  const double ex = std::sqrt(e.a * e.a * cs * cs + e.b * e.b * sn * sn);
  const double ey = std::sqrt(e.a * e.a * sn * sn + e.b * e.b * cs * cs);
  auto center = [&](double extent) {
    const double lo = extent, hi = size - 1 - extent;
    return lo < hi ? rng.uniform(lo, hi) : (size - 1) / 2.0;
  };
  e.cx = center(ex);
  e.cy = center(ey);

  // Low-frequency texture: a few random plane waves, normalized to [0, 1].
  struct Wave {
    double fx, fy, phase, amp;
  };
  auto make_waves = [&] {
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
      const double f = rng.uniform(0.5, 2.5) * 2.0 * std::numbers::pi / size;
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      w = {f * std::cos(dir), f * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
           rng.uniform(0.5, 1.0)};
    }
    return waves;
  };
  auto texture = [](const std::vector<Wave>& waves, int y, int x) {
    double v = 0.0, total = 0.0;
    for (const auto& w : waves) {
      v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      total += w.amp;
    }
    return 0.5 + 0.5 * v / total;
  };
  const auto background = make_waves();
  const auto lesion = make_waves();
  std::vector<double> tint_out(options.channels), tint_in(options.channels);
  for (int c = 0; c < options.channels; ++c) {
    tint_out[c] = rng.uniform(0.7, 1.0);
    tint_in[c] = rng.uniform(0.7, 1.0);
  }

  PairedSample sample;
  sample.id = "toy_" + std::string(4 - std::min<size_t>(4, std::to_string(index).size()), '0') +
              std::to_string(index);
  sample.image = Image(1, options.channels, size, size);
  sample.mask = Mask(1, 1, size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - e.cx, dy = y - e.cy;
      const double u = (dx * cs + dy * sn) / e.a;
      const double v = (-dx * sn + dy * cs) / e.b;
      const bool inside = u * u + v * v <= 1.0;
      sample.mask.at(0, 0, y, x) = inside ? 1.0f : 0.0f;
      for (int c = 0; c < options.channels; ++c) {
        const double noise = options.noise_sigma * rng.normal();
        double value;
        if (inside) {
          value = 0.3 + 0.7 * std::clamp(texture(lesion, y, x) * tint_in[c] + noise, 0.0, 1.0);
        } else {
          value = -1.0 + 0.8 * std::clamp(texture(background, y, x) * tint_out[c] + noise, 0.0, 1.0);
        }
        sample.image.at(0, c, y, x) = static_cast<float>(value);
      }
    }
  }
  if (ellipse_out) *ellipse_out = e;
  return sample;
}

DatasetManifest make_toy_dataset(int n, int size, uint64_t seed, const fs::path& out_dir,
                                 const ToyOptions& options) {
  if (n < 1) throw std::invalid_argument("toy dataset: n must be >= 1");
  if (size < 16) throw std::invalid_argument("toy dataset: size must be >= 16");
  if (options.channels != 1 && options.channels != 3) {
    throw std::invalid_argument("toy dataset: channels must be 1 or 3");
  }
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) {
    throw std::runtime_error("cannot create dataset directories under '" + out_dir.string() +
                             "': " + ec.message());
  }

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.height = manifest.width = size;
  for (int i = 0; i < n; ++i) {
    const PairedSample s = make_toy_sample(i, size, seed, options);
    ManifestEntry entry{s.id, fs::path("images") / (s.id + ".png"),
                        fs::path("masks") / (s.id + ".png")};
    write_png(out_dir / entry.image, from_tensor(s.image));
    write_png(out_dir / entry.mask, mask_to_raw(s.mask));
    manifest.entries.push_back(std::move(entry));
  }
  write_manifest(manifest);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest) {
  const fs::path path = manifest.root / "manifest.tsv";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  out << "id\timage_path\tmask_path\n";
  for (const auto& e : manifest.entries) {
    out << e.id << '\t' << e.image.generic_string() << '\t' << e.mask.generic_string() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing manifest '" + path.string() + "'");
}

DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.tsv";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest '" + path.string() + "'");
  DatasetManifest manifest;
  manifest.root = root;
  std::string line;
  std::set<std::string> seen;
  bool header = true;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    if (header) {
      header = false;
      if (trim(line) == "id\timage_path\tmask_path") continue;
    }
    std::istringstream fields(line);
    ManifestEntry e;
    std::string image, mask;
    if (!std::getline(fields, e.id, '\t') || !std::getline(fields, image, '\t') ||
        !std::getline(fields, mask)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected id, image_path, mask_path");
    }
    e.image = trim(image);
    e.mask = trim(mask);
    if (!seen.insert(e.id).second) {
      throw std::runtime_error(path.string() + ": duplicate id '" + e.id + "'");
    }
    for (const auto& f : {e.image, e.mask}) {
      if (!fs::exists(root / f)) {
        throw std::runtime_error(path.string() + ": missing file '" + (root / f).string() + "'");
      }
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

DatasetManifest open_dataset(const fs::path& root) {
  if (fs::exists(root / "manifest.tsv")) return read_manifest(root);
  std::map<std::string, fs::path> masks;
  for (const auto& m : list_images(root / "masks")) masks.emplace(m.stem().string(), m);
  DatasetManifest manifest;
  manifest.root = root;
  for (const auto& img : list_images(root / "images")) {
    const std::string id = img.stem().string();
    auto it = masks.find(id);
    if (it == masks.end()) continue;
    manifest.entries.push_back({id, fs::relative(img, root), fs::relative(it->second, root)});
  }
  if (manifest.entries.empty()) {
    throw std::runtime_error("no image/mask pairs found under '" + root.string() + "'");
  }
  return manifest;
}

std::vector<PairedSample> load_dataset(const DatasetManifest& manifest, int height, int width,
                                       LoadReport* report) {
  std::vector<PairedSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    out.push_back(load_pair(manifest.root / e.image, manifest.root / e.mask, height, width,
                            report, e.id));
  }
  return out;
}

Split split_indices(size_t count, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument("split: train fraction must be in (0, 1]");
  }
  Split split;
  size_t n_train = static_cast<size_t>(std::llround(count * train_fraction));
  if (count > 1) n_train = std::clamp<size_t>(n_train, 1, count - (train_fraction < 1.0 ? 1 : 0));
  for (size_t i = 0; i < count; ++i) (i < n_train ? split.train : split.test).push_back(i);
  return split;
}

}  // namespace maskdiff
