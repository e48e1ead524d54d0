#include "maskdiff/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "maskdiff/random.hpp"

namespace maskdiff {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string level_name(const char* prefix, int level) {
  return std::string(prefix) + "." + std::to_string(level);
}

}  // namespace

bool DenoiserConfig::has_attention(int level) const {
  for (int l : attention_levels) {
    if (l == level) return true;
  }
  return false;
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("DenoiserConfig: " + msg);
  };
  if (in_channels < 2) fail("in_channels must be >= 2 (image + mask)");
  if (out_channels != in_channels - 1) fail("out_channels must equal in_channels - 1");
  if (base_channels < 1) fail("base_channels must be positive");
  if (groups < 1) fail("groups must be positive");
  if (base_channels % groups != 0) fail("base_channels must be divisible by groups");
  if (base_channels % 2 != 0) fail("base_channels must be even (sinusoid width)");
  if (channel_mults.empty()) fail("channel_mults must not be empty");
  for (int m : channel_mults) {
    if (m < 1) fail("channel multipliers must be positive");
  }
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) fail("attention level " + std::to_string(l) + " out of range");
  }
  if (time_embed_dim < 0) fail("time_embed_dim must be >= 0");
}

template <typename T>
Denoiser<T>::Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto& p = layout_;
  const int g = cfg_.groups;
  const int temb = cfg_.embed_dim();
  const int L = cfg_.levels();

  time_ = TimeEmbedding<T>::create(p, "time", cfg_.base_channels, temb);
  input_conv_ = Conv2d<T>::create(p, "input", cfg_.in_channels, cfg_.base_channels, 3);

  int ch = cfg_.base_channels;
  for (int l = 0; l < L; ++l) {
    const std::string name = level_name("down", l);
    const int out = cfg_.channels_at(l);
    EncoderLevel lvl{ResBlock<T>::create(p, name + ".block0", ch, out, temb, g),
                     ResBlock<T>::create(p, name + ".block1", out, out, temb, g),
                     std::nullopt, std::nullopt};
    if (cfg_.has_attention(l)) lvl.attn = Attention<T>::create(p, name + ".attn", out, g);
    if (l + 1 < L) lvl.down = Conv2d<T>::create(p, name + ".downsample", out, out, 3, 2);
    encoder_.push_back(std::move(lvl));
    ch = out;
  }

  mid0_ = ResBlock<T>::create(p, "mid.block0", ch, ch, temb, g);
  mid_attn_ = Attention<T>::create(p, "mid.attn", ch, g);
  mid1_ = ResBlock<T>::create(p, "mid.block1", ch, ch, temb, g);

  for (int l = L - 1; l >= 0; --l) {
    const std::string name = level_name("up", l);
    const int out = cfg_.channels_at(l);
    DecoderLevel lvl{ResBlock<T>::create(p, name + ".block0", ch + out, out, temb, g),
                     ResBlock<T>::create(p, name + ".block1", out, out, temb, g),
                     std::nullopt, std::nullopt};
    if (cfg_.has_attention(l)) lvl.attn = Attention<T>::create(p, name + ".attn", out, g);
    if (l > 0) lvl.up = Upsample<T>::create(p, name + ".upsample", out);
    decoder_.push_back(std::move(lvl));
    ch = out;
  }

  out_norm_ = GroupNorm<T>::create(p, "out.norm", ch, g);
  out_conv_ = Conv2d<T>::create(p, "out.conv", ch, cfg_.out_channels, 3);
}

template <typename T>
ParamSet<T> Denoiser<T>::init_params(uint64_t seed) const {
  ParamSet<T> params = layout_;
  Rng rng(seed);
  for (auto& t : params) {
    if (ends_with(t.name, ".gamma")) {
      std::fill(t.values.begin(), t.values.end(), T(1));
      continue;
    }
    if (ends_with(t.name, ".beta")) continue;
    if (t.name.rfind("out.conv.", 0) == 0) continue;  // zero output head

    const std::string stem = t.name.substr(0, t.name.rfind('.'));
    const auto& w = layout_[layout_.index_of(stem + ".weight")];
    const size_t fan_in = w.numel() / w.shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return params;
}

template <typename T>
Tensor<T> Denoiser<T>::forward(const ParamSet<T>& params, const Tensor<T>& x,
                               const std::vector<int>& t, Tape* tape) const {
  if (!params.same_layout(layout_)) {
    throw std::invalid_argument("Denoiser: parameter layout does not match config");
  }
  if (x.c() != cfg_.in_channels) {
    throw std::invalid_argument("Denoiser: expected " + std::to_string(cfg_.in_channels) +
                                " input channels, got " + std::to_string(x.c()));
  }
  const int mult = cfg_.spatial_multiple();
  if (x.h() % mult != 0 || x.w() % mult != 0 || x.h() == 0 || x.w() == 0) {
    throw std::invalid_argument("Denoiser: spatial size " + std::to_string(x.h()) + "x" +
                                std::to_string(x.w()) + " not divisible by " +
                                std::to_string(mult));
  }
  if (static_cast<int>(t.size()) != x.n()) {
    throw std::invalid_argument("Denoiser: need one timestep per sample");
  }
  for (int ti : t) {
    if (ti < 0) throw std::invalid_argument("Denoiser: negative timestep");
  }

  const int L = cfg_.levels();
  if (tape) {
    tape->encoder.assign(L, {});
    tape->decoder.assign(L, {});
  }

  Tensor<T> temb = time_.forward(params, t, tape ? &tape->time : nullptr);
  const Tensor<T> act = silu_forward(temb);
  if (tape) tape->time_embed = std::move(temb);

  Tensor<T> h = input_conv_.forward(params, x, tape ? &tape->input_conv : nullptr);
  std::vector<Tensor<T>> skips;
  for (int l = 0; l < L; ++l) {
    const auto& lvl = encoder_[l];
    auto* c = tape ? &tape->encoder[l] : nullptr;
    h = lvl.block0.forward(params, h, act, c ? &c->block0 : nullptr);
    h = lvl.block1.forward(params, h, act, c ? &c->block1 : nullptr);
    if (lvl.attn) h = lvl.attn->forward(params, h, c ? &c->attn : nullptr);
    skips.push_back(h);
    if (lvl.down) h = lvl.down->forward(params, h, c ? &c->down : nullptr);
  }

  h = mid0_.forward(params, h, act, tape ? &tape->mid0 : nullptr);
  h = mid_attn_.forward(params, h, tape ? &tape->mid_attn : nullptr);
  h = mid1_.forward(params, h, act, tape ? &tape->mid1 : nullptr);

  for (int i = 0; i < L; ++i) {
    const int l = L - 1 - i;
    const auto& lvl = decoder_[i];
    auto* c = tape ? &tape->decoder[i] : nullptr;
    if (c) c->skip_channels = h.c();
    h = concat_channels(h, skips[l]);
    h = lvl.block0.forward(params, h, act, c ? &c->block0 : nullptr);
    h = lvl.block1.forward(params, h, act, c ? &c->block1 : nullptr);
    if (lvl.attn) h = lvl.attn->forward(params, h, c ? &c->attn : nullptr);
    if (lvl.up) h = lvl.up->forward(params, h, c ? &c->up : nullptr);
  }

  Tensor<T> pre = out_norm_.forward(params, h, tape ? &tape->out_norm : nullptr);
  Tensor<T> out = out_conv_.forward(params, silu_forward(pre), tape ? &tape->out_conv : nullptr);
  if (tape) tape->out_pre_act = std::move(pre);
  return out;
}

template <typename T>
Tensor<T> Denoiser<T>::backward(const ParamSet<T>& params, const Tape& tape,
                                const Tensor<T>& dout, ParamSet<T>& grads) const {
  if (!grads.same_layout(layout_)) {
    throw std::invalid_argument("Denoiser: gradient layout does not match config");
  }
  const int L = cfg_.levels();
  Tensor<T> d_act = Tensor<T>::like(tape.time_embed);

  Tensor<T> dh = out_conv_.backward(params, tape.out_conv, dout, grads);
  dh = out_norm_.backward(params, tape.out_norm, silu_backward(tape.out_pre_act, dh), grads);

  std::vector<Tensor<T>> dskips(L);
  for (int i = L - 1; i >= 0; --i) {
    const int l = L - 1 - i;
    const auto& lvl = decoder_[i];
    const auto& c = tape.decoder[i];
    if (lvl.up) dh = lvl.up->backward(params, c.up, dh, grads);
    if (lvl.attn) dh = lvl.attn->backward(params, c.attn, dh, grads);
    dh = lvl.block1.backward(params, c.block1, dh, grads, d_act);
    dh = lvl.block0.backward(params, c.block0, dh, grads, d_act);
    Tensor<T> dprev;
    split_channels(dh, c.skip_channels, dprev, dskips[l]);
    dh = std::move(dprev);
  }

  dh = mid1_.backward(params, tape.mid1, dh, grads, d_act);
  dh = mid_attn_.backward(params, tape.mid_attn, dh, grads);
  dh = mid0_.backward(params, tape.mid0, dh, grads, d_act);

  for (int l = L - 1; l >= 0; --l) {
    const auto& lvl = encoder_[l];
    const auto& c = tape.encoder[l];
    if (lvl.down) dh = lvl.down->backward(params, c.down, dh, grads);
    for (size_t i = 0; i < dh.size(); ++i) dh[i] += dskips[l][i];
    if (lvl.attn) dh = lvl.attn->backward(params, c.attn, dh, grads);
    dh = lvl.block1.backward(params, c.block1, dh, grads, d_act);
    dh = lvl.block0.backward(params, c.block0, dh, grads, d_act);
  }
  Tensor<T> dx = input_conv_.backward(params, tape.input_conv, dh, grads);

  time_.backward(params, tape.time, silu_backward(tape.time_embed, d_act), grads);
  return dx;
}

template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace maskdiff
