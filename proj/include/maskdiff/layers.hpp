#pragma once

// Building blocks of the denoiser with hand-written backward passes.
//
// Every layer owns only indices into a ParamSet; the same layer object can
// therefore run against different parameter values (a float training copy,
// a double gradient-check copy). forward() fills an optional cache that
// backward() consumes; backward() accumulates parameter gradients into
// `grads` (same layout as the params) and returns the input gradient.

#include <Eigen/Core>
#include <string>
#include <vector>

#include "maskdiff/params.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Sinusoidal timestep features: entries [0, dim/2) are sin(t * w_k), entries
// [dim/2, dim) are cos(t * w_k), with w_k = 10000^(-2k/dim).
std::vector<double> sinusoidal_embedding(int t, int dim);

template <typename T>
Tensor<T> silu_forward(const Tensor<T>& x);
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy);

// Channel concatenation [a | b]; spatial dims and batch must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void split_channels(const Tensor<T>& d, int first_channels, Tensor<T>& da,
                    Tensor<T>& db);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy);

template <typename T>
struct Conv2d {
  size_t weight = 0;  // [out, in, k, k]
  size_t bias = 0;    // [out]
  int in = 0, out = 0, kernel = 3, stride = 1;

  static Conv2d create(ParamSet<T>& p, const std::string& name, int in,
                       int out, int kernel, int stride = 1);

  // The unfolded input, (in * k * k) x (n * ho * wo) row-major.
  struct Cache {
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> columns;
    int n = 0, h = 0, w = 0;
  };
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    Cache* cache) const;
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads) const;
};

template <typename T>
struct Linear {
  size_t weight = 0;  // [out, in]
  size_t bias = 0;    // [out]
  int in = 0, out = 0;

  static Linear create(ParamSet<T>& p, const std::string& name, int in, int out);

  // Inputs and outputs are batches of vectors stored as n x features x 1 x 1.
  struct Cache {
    Tensor<T> input;
  };
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    Cache* cache) const;
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads) const;
};

template <typename T>
struct GroupNorm {
  size_t gamma = 0, beta = 0;  // [channels]
  int channels = 0, groups = 1;
  static constexpr double kEps = 1e-5;

  static GroupNorm create(ParamSet<T>& p, const std::string& name,
                          int channels, int groups);

  struct Cache {
    Tensor<T> normalized;     // x-hat, before scale and shift
    std::vector<T> inv_std;   // per (sample, group)
  };
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    Cache* cache) const;
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads) const;
};

// Sinusoid -> Linear -> SiLU -> Linear.
template <typename T>
struct TimeEmbedding {
  int sinusoid_dim = 0;
  Linear<T> fc1, fc2;

  static TimeEmbedding create(ParamSet<T>& p, const std::string& name,
                              int sinusoid_dim, int embed_dim);

  struct Cache {
    typename Linear<T>::Cache fc1, fc2;
    Tensor<T> hidden;  // fc1 output, SiLU input
  };
  Tensor<T> forward(const ParamSet<T>& p, const std::vector<int>& t,
                    Cache* cache) const;
  void backward(const ParamSet<T>& p, const Cache& cache, const Tensor<T>& dy,
                ParamSet<T>& grads) const;
};

// GroupNorm -> SiLU -> conv -> (+ time bias) -> GroupNorm -> SiLU -> conv,
// added to an identity or 1x1-projected shortcut.
template <typename T>
struct ResBlock {
  int in = 0, out = 0;
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;
  Linear<T> time_proj;
  bool has_shortcut = false;
  Conv2d<T> shortcut;

  static ResBlock create(ParamSet<T>& p, const std::string& name, int in,
                         int out, int time_dim, int groups);

  struct Cache {
    typename GroupNorm<T>::Cache norm1, norm2;
    Tensor<T> pre_act1, pre_act2;
    typename Conv2d<T>::Cache conv1, conv2, shortcut;
    typename Linear<T>::Cache time_proj;
  };
  // `time_act` is SiLU(time embedding), n x time_dim x 1 x 1.
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    const Tensor<T>& time_act, Cache* cache) const;
  // Returns dx; accumulates into d_time_act.
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads,
                     Tensor<T>& d_time_act) const;
};

// Single-head self-attention over the flattened spatial positions:
// y = x + proj(V softmax(Q^T K / sqrt(C))^T) with Q, K, V from a 1x1 conv of
// GroupNorm(x).
template <typename T>
struct Attention {
  int channels = 0;
  GroupNorm<T> norm;
  Conv2d<T> qkv, proj;

  static Attention create(ParamSet<T>& p, const std::string& name,
                          int channels, int groups);

  struct Cache {
    typename GroupNorm<T>::Cache norm;
    typename Conv2d<T>::Cache qkv, proj;
    Tensor<T> qkv_out;
    std::vector<std::vector<T>> weights;  // per sample, N x N row-stochastic
  };
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    Cache* cache) const;
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads) const;
};

// Nearest-neighbour 2x followed by a 3x3 conv.
template <typename T>
struct Upsample {
  Conv2d<T> conv;
  static Upsample create(ParamSet<T>& p, const std::string& name,
                         int channels);
  struct Cache {
    typename Conv2d<T>::Cache conv;
  };
  Tensor<T> forward(const ParamSet<T>& p, const Tensor<T>& x,
                    Cache* cache) const;
  Tensor<T> backward(const ParamSet<T>& p, const Cache& cache,
                     const Tensor<T>& dy, ParamSet<T>& grads) const;
};

}  // namespace maskdiff
