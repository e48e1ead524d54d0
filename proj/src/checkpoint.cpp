#include "maskdiff/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace maskdiff {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'D', 'C', 'K'};
constexpr const char* kAdamM = "adam.m/";
constexpr const char* kAdamV = "adam.v/";

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), n); }
  template <typename U>
  void le(U v) {
    unsigned char buf[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, sizeof(U));
  }
  void f32(float v) { le(std::bit_cast<uint32_t>(v)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, const fs::path& path) : in_(in), path_(path) {}
  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) fail("truncated file");
  }
  template <typename U>
  U le() {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw std::runtime_error("checkpoint '" + path_.string() + "': " + why);
  }

 private:
  std::istream& in_;
  const fs::path& path_;
};

void write_tensor(Writer& w, const std::string& name, const NamedTensor<float>& t) {
  w.le<uint32_t>(static_cast<uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.le<uint8_t>(0);
  w.le<uint8_t>(static_cast<uint8_t>(t.shape.size()));
  for (size_t d : t.shape) w.le<uint64_t>(d);
  for (float v : t.values) w.f32(v);
}

int to_int(const std::string& key, const std::string& value) {
  int out = 0;
  const auto* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end) {
    throw std::runtime_error("bad integer for '" + key + "': '" + value + "'");
  }
  return out;
}

}  // namespace

double parse_double(const std::string& text) {
  double out = 0.0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || p != end) throw std::runtime_error("bad number '" + text + "'");
  return out;
}

int64_t parse_int(const std::string& text) {
  int64_t out = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || p != end) throw std::runtime_error("bad integer '" + text + "'");
  return out;
}

std::string format_int_list(const std::vector<int>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(to_int("list", item.substr(b, e - b + 1)));
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

AdamState AdamState::for_params(const ParamSet<float>& params) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

void AdamState::step(ParamSet<float>& params, const ParamSet<float>& grads, double lr) {
  if (!params.same_layout(grads) || !params.same_layout(m)) {
    throw std::invalid_argument("AdamState::step: layout mismatch");
  }
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    float* p = params.data(i);
    const float* g = grads.data(i);
    float* mi = m.data(i);
    float* vi = v.data(i);
    const size_t n = params[i].values.size();
    for (size_t k = 0; k < n; ++k) {
      const double gk = g[k];
      const double mk = beta1 * mi[k] + (1.0 - beta1) * gk;
      const double vk = beta2 * vi[k] + (1.0 - beta2) * gk * gk;
      mi[k] = static_cast<float>(mk);
      vi[k] = static_cast<float>(vk);
      p[k] = static_cast<float>(p[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + eps));
    }
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ostringstream header;
  const auto& m = ckpt.model;
  header << "in_channels=" << m.in_channels << '\n'
         << "base_channels=" << m.base_channels << '\n'
         << "channel_mults=" << format_int_list(m.channel_mults) << '\n'
         << "attention_levels=" << format_int_list(m.attention_levels) << '\n'
         << "groups=" << m.groups << '\n'
         << "time_embed_dim=" << m.time_embed_dim << '\n'
         << "out_channels=" << m.out_channels << '\n'
         << "timesteps=" << ckpt.timesteps << '\n'
         << "schedule_offset=" << format_double(ckpt.schedule_offset) << '\n'
         << "step=" << ckpt.step << '\n';
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    header << "optimizer=adam\n"
           << "adam_beta1=" << format_double(o.beta1) << '\n'
           << "adam_beta2=" << format_double(o.beta2) << '\n'
           << "adam_eps=" << format_double(o.eps) << '\n'
           << "adam_t=" << o.t << '\n';
  } else {
    header << "optimizer=none\n";
  }
  for (const auto& [k, v] : ckpt.extra) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint header entry '" + k + "' is not representable");
    }
    header << "x." << k << '=' << v << '\n';
  }
  const std::string text = header.str();

  // Written to a sibling file, then renamed into place.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + tmp.string() + "'");
    Writer w(out);
    w.bytes(kMagic, 4);
    w.le<uint32_t>(kCheckpointVersion);
    w.le<uint32_t>(static_cast<uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
    const size_t per = ckpt.optimizer ? 3 : 1;
    w.le<uint32_t>(static_cast<uint32_t>(ckpt.params.size() * per));
    for (const auto& t : ckpt.params) write_tensor(w, t.name, t);
    if (ckpt.optimizer) {
      for (const auto& t : ckpt.optimizer->m) write_tensor(w, kAdamM + t.name, t);
      for (const auto& t : ckpt.optimizer->v) write_tensor(w, kAdamV + t.name, t);
    }
    out.flush();
    if (!out) throw std::runtime_error("failed writing checkpoint '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  Reader r(in, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("not a checkpoint (bad magic)");
  const uint32_t version = r.le<uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const uint32_t header_len = r.le<uint32_t>();
  std::string text(header_len, '\0');
  r.bytes(text.data(), header_len);

  std::map<std::string, std::string> kv;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) r.fail("header lacks '" + key + "'");
    return it->second;
  };

  Checkpoint ckpt;
  auto& m = ckpt.model;
  m.in_channels = to_int("in_channels", get("in_channels"));
  m.base_channels = to_int("base_channels", get("base_channels"));
  m.channel_mults = parse_int_list(get("channel_mults"));
  m.attention_levels = parse_int_list(get("attention_levels"));
  m.groups = to_int("groups", get("groups"));
  m.time_embed_dim = to_int("time_embed_dim", get("time_embed_dim"));
  m.out_channels = to_int("out_channels", get("out_channels"));
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    r.fail(e.what());
  }
  ckpt.timesteps = to_int("timesteps", get("timesteps"));
  ckpt.schedule_offset = parse_double(get("schedule_offset"));
  ckpt.step = parse_int(get("step"));
  const bool has_adam = get("optimizer") == "adam";
  for (const auto& [k, v] : kv) {
    if (k.rfind("x.", 0) == 0) ckpt.extra[k.substr(2)] = v;
  }

  ckpt.params = Denoiser<float>(m).layout();
  if (has_adam) {
    AdamState o = AdamState::for_params(ckpt.params);
    o.beta1 = parse_double(get("adam_beta1"));
    o.beta2 = parse_double(get("adam_beta2"));
    o.eps = parse_double(get("adam_eps"));
    o.t = parse_int(get("adam_t"));
    ckpt.optimizer = std::move(o);
  }

  const uint32_t count = r.le<uint32_t>();
  const size_t expected = ckpt.params.size() * (has_adam ? 3 : 1);
  if (count != expected) {
    r.fail("expected " + std::to_string(expected) + " tensors, found " + std::to_string(count));
  }
  std::vector<bool> seen(expected, false);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.le<uint32_t>();
    if (name_len > 4096) r.fail("implausible tensor name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const uint8_t dtype = r.le<uint8_t>();
    const uint8_t rank = r.le<uint8_t>();
    std::vector<size_t> shape(rank);
    for (auto& d : shape) d = static_cast<size_t>(r.le<uint64_t>());

    ParamSet<float>* target = &ckpt.params;
    std::string base = name;
    size_t slot_offset = 0;
    if (has_adam && name.rfind(kAdamM, 0) == 0) {
      target = &ckpt.optimizer->m;
      base = name.substr(std::strlen(kAdamM));
      slot_offset = ckpt.params.size();
    } else if (has_adam && name.rfind(kAdamV, 0) == 0) {
      target = &ckpt.optimizer->v;
      base = name.substr(std::strlen(kAdamV));
      slot_offset = 2 * ckpt.params.size();
    }
    if (!target->contains(base)) r.fail("unexpected tensor '" + name + "'");
    const size_t idx = target->index_of(base);
    auto& dst = (*target)[idx];
    if (dst.shape != shape) r.fail("shape mismatch for tensor '" + name + "'");
    if (seen[slot_offset + idx]) r.fail("duplicate tensor '" + name + "'");
    seen[slot_offset + idx] = true;
    for (auto& v : dst.values) {
      if (dtype == 0) {
        v = std::bit_cast<float>(r.le<uint32_t>());
      } else if (dtype == 1) {
        v = static_cast<float>(std::bit_cast<double>(r.le<uint64_t>()));
      } else {
        r.fail("unknown dtype code " + std::to_string(dtype));
      }
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the last tensor");
  return ckpt;
}

}  // namespace maskdiff
