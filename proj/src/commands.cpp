#include "maskdiff/commands.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/image_io.hpp"
#include "maskdiff/metrics.hpp"
#include "maskdiff/parallel.hpp"
#include "maskdiff/random.hpp"
#include "maskdiff/trainer.hpp"

namespace maskdiff {

namespace fs = std::filesystem;

namespace {

constexpr int kMontageGap = 2;

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Mask followed by the samples in one row, separated by white gaps.
RawImage montage(const Mask& mask, const Image& samples) {
  const int h = samples.h(), w = samples.w(), c = samples.c();
  const int tiles = samples.n() + 1;
  RawImage out{tiles * w + (tiles - 1) * kMontageGap, h, c, {}};
  out.pixels.assign(static_cast<size_t>(out.width) * out.height * c, 255);
  const RawImage m = mask_to_raw(mask);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = m.at(y, x, 0);
    }
  }
  for (int k = 0; k < samples.n(); ++k) {
    const RawImage tile = from_tensor(samples, k);
    const int x0 = (k + 1) * (w + kMontageGap);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < c; ++ch) out.at(y, x0 + x, ch) = tile.at(y, x, ch);
      }
    }
  }
  return out;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    body();
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << std::endl;
    return 1;
  }
}

fs::path image_dir(const fs::path& dir) {
  return fs::is_directory(dir / "images") ? dir / "images" : dir;
}

}  // namespace

uint64_t sample_seed(uint64_t seed, const std::string& mask_id, int k) {
  return Rng::derive(seed, fnv1a(mask_id), static_cast<uint64_t>(k)).next();
}

SampleResult run_sampling(const SampleRequest& req, std::ostream& log) {
  if (req.count < 1) throw std::invalid_argument("--count must be >= 1");
  const Checkpoint ckpt = load_checkpoint(req.checkpoint);
  const Denoiser<float> net(ckpt.model);
  const NoiseSchedule sched = build_schedule(ckpt.timesteps, ckpt.schedule_offset);
  const DenoiserModel model(net, ckpt.params);

  std::optional<int> size;
  if (auto it = ckpt.extra.find("image_size"); it != ckpt.extra.end()) {
    size = static_cast<int>(parse_int(it->second));
  }
  const auto mask_files = list_images(req.masks_dir);
  if (mask_files.empty()) throw std::invalid_argument("no masks in '" + req.masks_dir.string() + "'");
  std::vector<Mask> masks;
  for (const auto& f : mask_files) {
    Mask m = load_mask(f);
    if (size && (m.h() != *size || m.w() != *size)) {
      throw std::invalid_argument("mask '" + f.string() + "' is " + std::to_string(m.w()) + "x" +
                                  std::to_string(m.h()) + " but the model was trained at " +
                                  std::to_string(*size) + "x" + std::to_string(*size));
    }
    if (m.h() % ckpt.model.spatial_multiple() || m.w() % ckpt.model.spatial_multiple()) {
      throw std::invalid_argument("mask '" + f.string() + "' size is not a multiple of " +
                                  std::to_string(ckpt.model.spatial_multiple()));
    }
    masks.push_back(std::move(m));
  }

  fs::create_directories(req.out_dir / "montage");
  SampleResult result;
  const int threads = thread_count();
  for (size_t i = 0; i < mask_files.size(); ++i) {
    const std::string id = mask_files[i].stem().string();
    std::vector<uint64_t> seeds(req.count);
    for (int k = 0; k < req.count; ++k) seeds[k] = sample_seed(req.seed, id, k);

    const auto chunks = split_range(req.count, threads);
    std::vector<Image> parts(chunks.size());
    run_chunks(chunks.size(), [&](size_t c) {
      const auto [b0, b1] = chunks[c];
      std::vector<Mask> batch(b1 - b0, masks[i]);
      SampleOptions opts;
      opts.variance = req.variance;
      parts[c] = sample(model, stack<float>(batch), sched,
                        std::span<const uint64_t>(seeds.data() + b0, b1 - b0), opts);
    });
    std::vector<Image> singles;
    for (const auto& p : parts) {
      for (int b = 0; b < p.n(); ++b) singles.push_back(p.slice(b));
    }
    const Image all = stack<float>(singles);
    for (int k = 0; k < all.n(); ++k) {
      const fs::path file = req.out_dir / (id + "_" + std::to_string(k) + ".png");
      write_png(file, from_tensor(all, k));
      result.images.push_back(file);
    }
    const fs::path mfile = req.out_dir / "montage" / (id + ".png");
    write_png(mfile, montage(masks[i], all));
    result.montages.push_back(mfile);
    log << "sampled " << req.count << " image(s) for mask " << id << '\n';
  }
  return result;
}

Image load_image_set(const fs::path& dir, std::vector<std::string>* ids) {
  const auto files = list_images(image_dir(dir));
  std::vector<Image> images;
  for (const auto& f : files) {
    images.push_back(to_tensor(read_image(f)));
    if (!images.back().same_shape(images.front())) {
      throw std::invalid_argument("image '" + f.string() + "' is " +
                                  images.back().shape_string() + ", expected " +
                                  images.front().shape_string());
    }
    if (ids) ids->push_back(f.stem().string());
  }
  if (images.size() < 2) {
    throw std::invalid_argument("'" + dir.string() + "' has " + std::to_string(images.size()) +
                                " image(s); metrics need N >= 2");
  }
  return stack<float>(images);
}

FeatureSet embed_batch(const FeatureExtractor& extractor, const Image& batch) {
  const auto chunks = split_range(batch.n(), thread_count());
  FeatureSet out(batch.n(), extractor.dim());
  run_chunks(chunks.size(), [&](size_t c) {
    const auto [b0, b1] = chunks[c];
    Image part(b1 - b0, batch.c(), batch.h(), batch.w(), Uninitialized{});
    std::copy(batch.sample(b0), batch.sample(b1), part.data());
    out.middleRows(b0, b1 - b0) = extractor.embed(part);
  });
  return out;
}

std::string mask_id_of(const std::string& stem) {
  const auto us = stem.rfind('_');
  if (us == std::string::npos || us + 1 == stem.size()) return stem;
  const bool digits = std::all_of(stem.begin() + us + 1, stem.end(),
                                  [](unsigned char c) { return std::isdigit(c); });
  return digits ? stem.substr(0, us) : stem;
}

EvaluationReport run_evaluation(const EvaluateRequest& req, std::ostream& log) {
  if (req.report.empty()) throw std::invalid_argument("--report is required");
  const Image real = load_image_set(req.real_dir);
  std::vector<std::string> synth_ids;
  const Image synth = load_image_set(req.synth_dir, &synth_ids);
  if (real.c() != synth.c()) {
    throw std::invalid_argument("real images have " + std::to_string(real.c()) +
                                " channels, synthetic " + std::to_string(synth.c()));
  }
  std::map<std::string, fs::path> mask_files;
  if (req.masks_dir) {
    for (const auto& f : list_images(*req.masks_dir)) {
      mask_files.emplace(f.stem().string(), f);
    }
    if (mask_files.empty()) throw std::invalid_argument("no masks in '" + req.masks_dir->string() + "'");
  }

  const ReferenceEmbedder embedder(real.c());
  const FeatureSet fr = embed_batch(embedder, real);
  const FeatureSet fs_ = embed_batch(embedder, synth);

  EvaluationReport r;
  r.n_real = static_cast<size_t>(real.n());
  r.n_synth = static_cast<size_t>(synth.n());
  r.embedder_id = embedder.id();
  r.fid = frechet_distance(compute_stats(fr), compute_stats(fs_));
  r.kid = kid(fr, fs_);
  r.is_synth = inception_score(embedder.class_probabilities(fs_));
  r.is_real = inception_score(embedder.class_probabilities(fr));

  if (req.masks_dir) {
    double sum = 0.0;
    for (int k = 0; k < synth.n(); ++k) {
      auto it = mask_files.find(mask_id_of(synth_ids[k]));
      if (it == mask_files.end()) continue;
      const Mask m = load_mask(it->second);
      if (m.h() != synth.h() || m.w() != synth.w()) {
        throw std::invalid_argument("mask '" + it->second.string() + "' does not match the " +
                                    "synthetic image size");
      }
      sum += conditioning_fidelity(synth.slice(k), m, req.threshold);
      ++r.n_fidelity;
    }
    if (r.n_fidelity == 0) {
      throw std::invalid_argument("no synthetic image name matches a mask id in '" +
                                  req.masks_dir->string() + "'");
    }
    r.fidelity = sum / static_cast<double>(r.n_fidelity);
  }
  write_report(req.report, r);
  log << "FID " << r.fid << "  KID " << r.kid << "  IS " << r.is_synth;
  if (r.fidelity) log << "  fidelity " << *r.fidelity;
  log << '\n';
  return r;
}

void write_report(const fs::path& path, const EvaluationReport& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report '" + path.string() + "'");
  out << "# Features come from a fixed random embedder, not Inception-v3; values are only\n"
      << "# comparable with other reports that use the same embedder_id.\n";
  out << "metric\tvalue\tn_real\tn_synth\tembedder_id\n";
  auto row = [&](const char* name, double v, size_t nr, size_t ns) {
    out << name << '\t' << format_double(v) << '\t' << nr << '\t' << ns << '\t'
        << r.embedder_id << '\n';
  };
  row("FID", r.fid, r.n_real, r.n_synth);
  row("KID", r.kid, r.n_real, r.n_synth);
  row("IS", r.is_synth, 0, r.n_synth);
  row("IS_real", r.is_real, r.n_real, 0);
  if (r.fidelity) row("conditioning_fidelity", *r.fidelity, 0, r.n_fidelity);
  if (!out) throw std::runtime_error("failed writing report '" + path.string() + "'");
}

int cmd_make_toy(int n, int size, uint64_t seed, const fs::path& out_dir, int channels,
                 std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    ToyOptions opts;
    opts.channels = channels;
    const DatasetManifest m = make_toy_dataset(n, size, seed, out_dir, opts);
    out << "wrote " << m.entries.size() << " image/mask pairs of " << size << "x" << size
        << " to " << out_dir.string() << '\n';
  });
}

int cmd_train(const fs::path& config_file, const std::vector<std::string>& overrides,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    TrainConfig cfg = load_train_config(config_file);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + o + "'");
      set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    const TrainSummary s = run_training(cfg, out);
    out << "finished at step " << s.final_step << '\n';
  });
}

int cmd_sample(const SampleRequest& request, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const SampleResult r = run_sampling(request, out);
    out << "wrote " << r.images.size() << " image(s) and " << r.montages.size()
        << " montage(s) to " << request.out_dir.string() << '\n';
  });
}

int cmd_evaluate(const EvaluateRequest& request, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    run_evaluation(request, out);
    out << "wrote " << request.report.string() << '\n';
  });
}

}  // namespace maskdiff
