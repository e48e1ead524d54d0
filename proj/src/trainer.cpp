#include "maskdiff/trainer.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/parallel.hpp"
#include "maskdiff/random.hpp"

namespace maskdiff {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kTrainStream = 0x747261696eULL;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config key '" + key + "': expected true or false, got '" + v + "'");
}

int parse_count(const std::string& key, const std::string& v) {
  try {
    const int64_t n = parse_int(v);
    if (n < INT32_MIN || n > INT32_MAX) throw std::out_of_range(key);
    return static_cast<int>(n);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

// Rows [begin, end) of a batch.
Tensor<float> rows(const Tensor<float>& x, int begin, int end) {
  Tensor<float> out(end - begin, x.c(), x.h(), x.w(), Uninitialized{});
  std::copy(x.sample(begin), x.sample(begin) + (end - begin) * x.sample_size(), out.data());
  return out;
}

void check_data(const TrainConfig& cfg, const std::vector<PairedSample>& data) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  const Image& first = data.front().image;
  for (const auto& s : data) {
    if (s.image.h() != cfg.image_size || s.image.w() != cfg.image_size ||
        s.mask.h() != cfg.image_size || s.mask.w() != cfg.image_size) {
      throw std::invalid_argument("sample '" + s.id + "' is not " +
                                  std::to_string(cfg.image_size) + "x" +
                                  std::to_string(cfg.image_size));
    }
    if (s.image.c() != first.c()) {
      throw std::invalid_argument("sample '" + s.id + "' has " + std::to_string(s.image.c()) +
                                  " channels, expected " + std::to_string(first.c()));
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': " + why);
  };
  if (iterations < 1) fail("iterations", "must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be > 0");
  if (batch_size < 1) fail("batch_size", "must be positive");
  if (timesteps < 1) fail("timesteps", "must be positive");
  if (!(schedule_offset >= 0.0)) fail("schedule_offset", "must be >= 0");
  if (checkpoint_every < 1) fail("checkpoint_every", "must be positive");
  if (image_size < 1) fail("image_size", "must be positive");
  if (loss != "l1") fail("loss", "only l1 is supported");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) fail("train_fraction", "must be in (0, 1]");
  if (log_every < 1) fail("log_every", "must be positive");
  if (out_dir.empty()) fail("out_dir", "must not be empty");
  const DenoiserConfig m = model_config(3);
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("model settings: ") + e.what());
  }
  if (image_size % m.spatial_multiple() != 0) {
    fail("image_size", "must be a multiple of " + std::to_string(m.spatial_multiple()) +
                           " for " + std::to_string(m.levels()) + " levels");
  }
}

DenoiserConfig TrainConfig::model_config(int image_channels) const {
  DenoiserConfig m;
  m.in_channels = image_channels + 1;
  m.out_channels = image_channels;
  m.base_channels = base_channels;
  m.channel_mults = channel_mults;
  m.attention_levels = attention_levels;
  m.groups = groups;
  return m;
}

void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "iterations") c.iterations = parse_count(key, value);
  else if (key == "learning_rate") c.learning_rate = parse_real(key, value);
  else if (key == "batch_size") c.batch_size = parse_count(key, value);
  else if (key == "timesteps") c.timesteps = parse_count(key, value);
  else if (key == "schedule_offset") c.schedule_offset = parse_real(key, value);
  else if (key == "seed") {
    try {
      c.seed = std::stoull(value);
    } catch (const std::exception&) {
      throw std::invalid_argument("config key 'seed': expected an unsigned integer");
    }
  }
  else if (key == "checkpoint_every") c.checkpoint_every = parse_count(key, value);
  else if (key == "data_root") c.data_root = value;
  else if (key == "image_size") c.image_size = parse_count(key, value);
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "loss") c.loss = value;
  else if (key == "train_fraction") c.train_fraction = parse_real(key, value);
  else if (key == "augment") c.augment = parse_bool(key, value);
  else if (key == "log_every") c.log_every = parse_count(key, value);
  else if (key == "resume") c.resume = value;
  else if (key == "base_channels") c.base_channels = parse_count(key, value);
  else if (key == "channel_mults") c.channel_mults = parse_int_list(value);
  else if (key == "attention_levels") c.attention_levels = parse_int_list(value);
  else if (key == "groups") c.groups = parse_count(key, value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text, const std::string& source) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), path.string());
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "iterations = " << c.iterations << '\n'
      << "learning_rate = " << format_double(c.learning_rate) << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "timesteps = " << c.timesteps << '\n'
      << "schedule_offset = " << format_double(c.schedule_offset) << '\n'
      << "seed = " << c.seed << '\n'
      << "checkpoint_every = " << c.checkpoint_every << '\n'
      << "data_root = " << c.data_root << '\n'
      << "image_size = " << c.image_size << '\n'
      << "out_dir = " << c.out_dir << '\n'
      << "loss = " << c.loss << '\n'
      << "train_fraction = " << format_double(c.train_fraction) << '\n'
      << "augment = " << (c.augment ? "true" : "false") << '\n'
      << "log_every = " << c.log_every << '\n'
      << "resume = " << c.resume << '\n'
      << "base_channels = " << c.base_channels << '\n'
      << "channel_mults = " << format_int_list(c.channel_mults) << '\n'
      << "attention_levels = " << format_int_list(c.attention_levels) << '\n'
      << "groups = " << c.groups << '\n';
  return out.str();
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(const TrainConfig& cfg, std::vector<PairedSample> data)
    : cfg_(cfg),
      data_((check_data(cfg, data), std::move(data))),
      net_(cfg.model_config(data_.front().image.c())),
      sched_(build_schedule(cfg.timesteps, cfg.schedule_offset)),
      params_(net_.init_params(cfg.seed)),
      adam_(AdamState::for_params(params_)) {}

Trainer::Trainer(const TrainConfig& cfg, std::vector<PairedSample> data, const Checkpoint& ckpt)
    : Trainer(cfg, std::move(data)) {
  if (!(ckpt.model == net_.config())) {
    throw std::invalid_argument("checkpoint model settings differ from the config");
  }
  if (ckpt.timesteps != cfg.timesteps || ckpt.schedule_offset != cfg.schedule_offset) {
    throw std::invalid_argument("checkpoint schedule differs from the config");
  }
  if (!ckpt.optimizer) throw std::invalid_argument("checkpoint has no optimizer state");
  if (!ckpt.params.same_layout(params_)) {
    throw std::invalid_argument("checkpoint parameter layout differs");
  }
  params_ = ckpt.params;
  adam_ = *ckpt.optimizer;
  step_ = ckpt.step;
}

double Trainer::step() {
  Rng rng = Rng::derive(cfg_.seed, kTrainStream, static_cast<uint64_t>(step_ + 1));
  const int batch = cfg_.batch_size;
  std::vector<Image> images;
  std::vector<Mask> masks;
  std::vector<int> t(batch);
  images.reserve(batch);
  masks.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    const auto idx = static_cast<size_t>(rng.integer(0, static_cast<int64_t>(data_.size()) - 1));
    if (cfg_.augment) {
      PairedSample s = augment(data_[idx], rng);
      images.push_back(std::move(s.image));
      masks.push_back(std::move(s.mask));
    } else {
      images.push_back(data_[idx].image);
      masks.push_back(data_[idx].mask);
    }
    t[b] = static_cast<int>(rng.integer(1, sched_.T));
  }
  const Image x0 = stack<float>(images);
  const Mask mask = stack<float>(masks);
  Image eps = Image::uninit_like(x0);
  for (auto& v : eps.values()) v = static_cast<float>(rng.normal());

  const auto chunks = split_range(batch, thread_count());
  std::vector<DenoiserParams> grads(chunks.size());
  std::vector<double> losses(chunks.size());
  run_chunks(chunks.size(), [&](size_t c) {
    const auto [b0, b1] = chunks[c];
    grads[c] = params_.zeros_like();
    if (chunks.size() == 1) {
      losses[c] = training_loss_and_grad(net_, params_, x0, mask, t, eps, sched_, grads[c]);
    } else {
      const std::vector<int> tc(t.begin() + b0, t.begin() + b1);
      losses[c] = training_loss_and_grad(net_, params_, rows(x0, b0, b1), rows(mask, b0, b1),
                                         tc, rows(eps, b0, b1), sched_, grads[c]);
    }
  });

  double loss = 0.0;
  DenoiserParams& total = grads.front();
  if (chunks.size() > 1) {
    for (auto& g : total) {
      const float w = static_cast<float>(chunks[0].end - chunks[0].begin) / batch;
      for (auto& v : g.values) v *= w;
    }
  }
  loss = losses[0] * (chunks[0].end - chunks[0].begin) / batch;
  for (size_t c = 1; c < chunks.size(); ++c) {
    const float w = static_cast<float>(chunks[c].end - chunks[c].begin) / batch;
    loss += losses[c] * (chunks[c].end - chunks[c].begin) / batch;
    for (size_t i = 0; i < total.size(); ++i) {
      float* dst = total.data(i);
      const float* src = grads[c].data(i);
      for (size_t k = 0; k < total[i].values.size(); ++k) dst[k] += w * src[k];
    }
  }
  if (!std::isfinite(loss)) {
    throw std::runtime_error("non-finite loss at step " + std::to_string(step_ + 1) +
                             "; lower learning_rate or check the data");
  }
  adam_.step(params_, total, cfg_.learning_rate);
  ++step_;
  return loss;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model = net_.config();
  c.timesteps = cfg_.timesteps;
  c.schedule_offset = cfg_.schedule_offset;
  c.step = step_;
  c.params = params_;
  c.optimizer = adam_;
  c.extra["image_size"] = std::to_string(cfg_.image_size);
  c.extra["seed"] = std::to_string(cfg_.seed);
  return c;
}

// ------------------------------------------------------------------ command

fs::path checkpoint_path(const fs::path& out_dir, int64_t step) {
  return out_dir / ("checkpoint_" + std::to_string(step) + ".mdck");
}

TrainSummary run_training(const TrainConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.data_root.empty()) throw std::invalid_argument("config key 'data_root' is required");

  const DatasetManifest manifest = open_dataset(cfg.data_root);
  LoadReport report;
  std::vector<PairedSample> all =
      load_dataset(manifest, cfg.image_size, cfg.image_size, &report);
  for (const auto& id : report.empty_masks) log << "warning: mask '" << id << "' is empty\n";
  const Split split = split_indices(all.size(), cfg.train_fraction);
  std::vector<PairedSample> train;
  for (size_t i : split.train) train.push_back(std::move(all[i]));

  std::optional<Checkpoint> resume;
  if (!cfg.resume.empty()) resume = load_checkpoint(cfg.resume);
  Trainer trainer = resume ? Trainer(cfg, std::move(train), *resume)
                           : Trainer(cfg, std::move(train));
  if (trainer.steps_done() > cfg.iterations) {
    throw std::invalid_argument("checkpoint is already past iterations = " +
                                std::to_string(cfg.iterations));
  }

  const fs::path out_dir = cfg.out_dir;
  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "loss.tsv";
  // Keep the rows a resumed run already produced, drop anything after it.
  std::vector<std::string> kept;
  if (resume && fs::exists(log_path)) {
    std::ifstream old(log_path);
    std::string line;
    std::getline(old, line);
    while (std::getline(old, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      if (parse_int(line.substr(0, tab)) <= trainer.steps_done()) kept.push_back(line);
    }
  }
  std::ofstream loss_log(log_path, std::ios::trunc);
  if (!loss_log) throw std::runtime_error("cannot write '" + log_path.string() + "'");
  loss_log << "step\tloss\n";
  for (const auto& line : kept) loss_log << line << '\n';

  log << "training " << manifest.entries.size() << " pairs (" << split.train.size()
      << " train), " << trainer.params().total_count() << " parameters, "
      << thread_count() << " thread(s)\n";

  TrainSummary summary;
  summary.first_step = trainer.steps_done();
  while (trainer.steps_done() < cfg.iterations) {
    const double loss = trainer.step();
    const int64_t k = trainer.steps_done();
    summary.losses.push_back(loss);
    loss_log << k << '\t' << format_double(loss) << '\n';
    loss_log.flush();
    if (k % cfg.log_every == 0 || k == 1) log << "step " << k << " loss " << loss << std::endl;
    if (k % cfg.checkpoint_every == 0) save_checkpoint(checkpoint_path(out_dir, k), trainer.checkpoint());
  }
  summary.final_step = trainer.steps_done();
  summary.final_checkpoint = out_dir / "final.mdck";
  save_checkpoint(summary.final_checkpoint, trainer.checkpoint());
  log << "wrote " << summary.final_checkpoint.string() << '\n';
  return summary;
}

}  // namespace maskdiff
