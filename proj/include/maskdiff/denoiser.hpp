#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maskdiff/layers.hpp"
#include "maskdiff/params.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

struct DenoiserConfig {
  int in_channels = 4;  // image channels + 1 mask channel
  int base_channels = 64;
  std::vector<int> channel_mults{1, 2, 4, 8};
  std::vector<int> attention_levels{2, 3};
  int groups = 8;
  int time_embed_dim = 0;  // 0 selects 4 * base_channels
  int out_channels = 3;

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int embed_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
  int channels_at(int level) const { return base_channels * channel_mults.at(level); }
  bool has_attention(int level) const;
  // Input H and W must be multiples of this.
  int spatial_multiple() const { return 1 << (levels() - 1); }

  // Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  bool operator==(const DenoiserConfig&) const = default;
};

using DenoiserParams = ParamSet<float>;

// Conditional U-Net epsilon predictor. The object holds the layer graph and
// the parameter layout; parameter values live in a separate ParamSet so one
// network description can drive float and double parameter copies.
template <typename T>
class Denoiser {
 public:
  explicit Denoiser(const DenoiserConfig& cfg);

  const DenoiserConfig& config() const { return cfg_; }

  // Zero-valued parameters with the layout this config implies.
  const ParamSet<T>& layout() const { return layout_; }

  // Fan-in scaled uniform weights, unit GroupNorm scales, zero output head.
  ParamSet<T> init_params(uint64_t seed) const;

  struct Tape;

  // x: n x in_channels x H x W; t: one timestep per sample.
  // When `tape` is non-null it receives everything backward() needs.
  Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& x,
                    const std::vector<int>& t, Tape* tape = nullptr) const;

  // Accumulates dL/dparams into `grads`; returns dL/dx.
  Tensor<T> backward(const ParamSet<T>& params, const Tape& tape,
                     const Tensor<T>& dout, ParamSet<T>& grads) const;

  struct EncoderLevel {
    ResBlock<T> block0, block1;
    std::optional<Attention<T>> attn;
    std::optional<Conv2d<T>> down;
  };
  struct DecoderLevel {
    ResBlock<T> block0, block1;
    std::optional<Attention<T>> attn;
    std::optional<Upsample<T>> up;
  };

  struct Tape {
    typename TimeEmbedding<T>::Cache time;
    Tensor<T> time_embed;  // pre-SiLU
    typename Conv2d<T>::Cache input_conv;
    struct Level {
      typename ResBlock<T>::Cache block0, block1;
      typename Attention<T>::Cache attn;
      typename Conv2d<T>::Cache down;
      typename Upsample<T>::Cache up;
      int skip_channels = 0;  // decoder: channels of h before concatenation
    };
    std::vector<Level> encoder, decoder;
    typename ResBlock<T>::Cache mid0, mid1;
    typename Attention<T>::Cache mid_attn;
    typename GroupNorm<T>::Cache out_norm;
    Tensor<T> out_pre_act;
    typename Conv2d<T>::Cache out_conv;
  };

 private:
  DenoiserConfig cfg_;
  ParamSet<T> layout_;
  TimeEmbedding<T> time_;
  Conv2d<T> input_conv_;
  std::vector<EncoderLevel> encoder_;
  ResBlock<T> mid0_, mid1_;
  Attention<T> mid_attn_;
  std::vector<DecoderLevel> decoder_;
  GroupNorm<T> out_norm_;
  Conv2d<T> out_conv_;
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

}  // namespace maskdiff
