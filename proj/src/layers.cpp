#include "maskdiff/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace maskdiff {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

int conv_out_size(int in, int kernel, int stride) {
  const int pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

// col is (C*k*k) x (n*ho*wo), row-major.
template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int ho, int wo, T* col) {
  const int pad = k / 2;
  const size_t ncols = static_cast<size_t>(x.n()) * ho * wo;
  const int h = x.h(), w = x.w();
  for (int ci = 0; ci < x.c(); ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<size_t>(ci * k + ky) * k + kx) * ncols;
        for (int b = 0; b < x.n(); ++b) {
          const T* src = x.channel(b, ci);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            T* row = dst + (static_cast<size_t>(b) * ho + oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, T(0));
              continue;
            }
            const T* srow = src + static_cast<size_t>(iy) * w;
            if (stride == 1) {
              const int shift = kx - pad;
              const int lo = std::max(0, -shift);
              const int hi = std::min(wo, w - shift);
              for (int ox = 0; ox < lo; ++ox) row[ox] = T(0);
              for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox + shift];
              for (int ox = std::max(hi, lo); ox < wo; ++ox) row[ox] = T(0);
            } else {
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride + kx - pad;
                row[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int k, int stride, int ho, int wo, Tensor<T>& dx) {
  const int pad = k / 2;
  const size_t ncols = static_cast<size_t>(dx.n()) * ho * wo;
  const int h = dx.h(), w = dx.w();
  for (int ci = 0; ci < dx.c(); ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<size_t>(ci * k + ky) * k + kx) * ncols;
        for (int b = 0; b < dx.n(); ++b) {
          T* dst = dx.channel(b, ci);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const T* row = src + (static_cast<size_t>(b) * ho + oy) * wo;
            T* drow = dst + static_cast<size_t>(iy) * w;
            if (stride == 1) {
              const int shift = kx - pad;
              const int lo = std::max(0, -shift);
              const int hi = std::min(wo, w - shift);
              for (int ox = lo; ox < hi; ++ox) drow[ox + shift] += row[ox];
            } else {
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix >= 0 && ix < w) drow[ix] += row[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
using MapArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstMapArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

}  // namespace

std::vector<double> sinusoidal_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2, got " +
                                std::to_string(dim));
  }
  if (t < 0) throw std::invalid_argument("sinusoidal_embedding: negative timestep");
  const int half = dim / 2;
  std::vector<double> out(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -2.0 * k / dim);
    out[k] = std::sin(t * freq);
    out[k + half] = std::cos(t * freq);
  }
  return out;
}

template <typename T>
Tensor<T> silu_forward(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::uninit_like(x);
  const auto n = static_cast<Eigen::Index>(x.size());
  ConstMapArr<T> xa(x.data(), n);
  MapArr<T>(y.data(), n) = xa / (T(1) + (-xa).exp());
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx = Tensor<T>::uninit_like(x);
  const auto n = static_cast<Eigen::Index>(x.size());
  ConstMapArr<T> xa(x.data(), n);
  const Eigen::Array<T, Eigen::Dynamic, 1> sig = T(1) / (T(1) + (-xa).exp());
  MapArr<T>(dx.data(), n) =
      ConstMapArr<T>(dy.data(), n) * sig * (T(1) + xa * (T(1) - sig));
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw std::invalid_argument("concat_channels: shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
  }
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w(), Uninitialized{});
  for (int s = 0; s < a.n(); ++s) {
    std::copy_n(a.sample(s), a.sample_size(), out.sample(s));
    std::copy_n(b.sample(s), b.sample_size(), out.sample(s) + a.sample_size());
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& d, int first_channels, Tensor<T>& da,
                    Tensor<T>& db) {
  da = Tensor<T>(d.n(), first_channels, d.h(), d.w(), Uninitialized{});
  db = Tensor<T>(d.n(), d.c() - first_channels, d.h(), d.w(), Uninitialized{});
  for (int s = 0; s < d.n(); ++s) {
    std::copy_n(d.sample(s), da.sample_size(), da.sample(s));
    std::copy_n(d.sample(s) + da.sample_size(), db.sample_size(), db.sample(s));
  }
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), x.h() * 2, x.w() * 2, Uninitialized{});
  for (int b = 0; b < x.n(); ++b) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.channel(b, c);
      T* dst = y.channel(b, c);
      for (int yy = 0; yy < y.h(); ++yy) {
        const T* srow = src + static_cast<size_t>(yy / 2) * x.w();
        T* drow = dst + static_cast<size_t>(yy) * y.w();
        for (int xx = 0; xx < y.w(); ++xx) drow[xx] = srow[xx / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
  for (int b = 0; b < dy.n(); ++b) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* src = dy.channel(b, c);
      T* dst = dx.channel(b, c);
      for (int yy = 0; yy < dy.h(); ++yy) {
        const T* srow = src + static_cast<size_t>(yy) * dy.w();
        T* drow = dst + static_cast<size_t>(yy / 2) * dx.w();
        for (int xx = 0; xx < dy.w(); ++xx) drow[xx / 2] += srow[xx];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T> Conv2d<T>::create(ParamSet<T>& p, const std::string& name, int in,
                            int out, int kernel, int stride) {
  Conv2d c;
  c.in = in;
  c.out = out;
  c.kernel = kernel;
  c.stride = stride;
  c.weight = p.add(name + ".weight", {size_t(out), size_t(in), size_t(kernel), size_t(kernel)});
  c.bias = p.add(name + ".bias", {size_t(out)});
  return c;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                             Cache* cache) const {
  if (x.c() != in) {
    throw std::invalid_argument("Conv2d: expected " + std::to_string(in) +
                                " input channels, got " + std::to_string(x.c()));
  }
  const int ho = conv_out_size(x.h(), kernel, stride);
  const int wo = conv_out_size(x.w(), kernel, stride);
  const size_t hw = static_cast<size_t>(ho) * wo;
  const Eigen::Index K = static_cast<Eigen::Index>(in) * kernel * kernel;
  const Eigen::Index N = static_cast<Eigen::Index>(x.n()) * hw;

  RowMat<T> columns(K, N);
  im2col(x, kernel, stride, ho, wo, columns.data());
  ConstMapMat<T> W(p.data(weight), out, K);
  RowMat<T> Y(out, N);
  Y.noalias() = W * columns;

  Tensor<T> y(x.n(), out, ho, wo, Uninitialized{});
  const T* b = p.data(bias);
  for (int s = 0; s < x.n(); ++s) {
    for (int o = 0; o < out; ++o) {
      const T* src = Y.data() + o * N + s * hw;
      T* dst = y.channel(s, o);
      for (size_t i = 0; i < hw; ++i) dst[i] = src[i] + b[o];
    }
  }
  if (cache) {
    cache->columns = std::move(columns);
    cache->n = x.n();
    cache->h = x.h();
    cache->w = x.w();
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const ParamSet<T>& p, const Cache& cache,
                              const Tensor<T>& dy, ParamSet<T>& grads) const {
  const int ho = dy.h(), wo = dy.w();
  const size_t hw = static_cast<size_t>(ho) * wo;
  const Eigen::Index K = static_cast<Eigen::Index>(in) * kernel * kernel;
  const Eigen::Index N = static_cast<Eigen::Index>(cache.n) * hw;
  if (cache.columns.rows() != K || cache.columns.cols() != N) {
    throw std::logic_error("Conv2d::backward: cache does not match gradient shape");
  }

  RowMat<T> dY(out, N);
  T* gb = grads.data(bias);
  for (int s = 0; s < cache.n; ++s) {
    for (int o = 0; o < out; ++o) {
      const T* src = dy.channel(s, o);
      T* dst = dY.data() + o * N + s * hw;
      T acc = 0;
      for (size_t i = 0; i < hw; ++i) {
        dst[i] = src[i];
        acc += src[i];
      }
      gb[o] += acc;
    }
  }

  MapMat<T> gW(grads.data(weight), out, K);
  gW.noalias() += dY * cache.columns.transpose();

  ConstMapMat<T> W(p.data(weight), out, K);
  RowMat<T> dcol(K, N);
  dcol.noalias() = W.transpose() * dY;
  Tensor<T> dx(cache.n, in, cache.h, cache.w);
  col2im(dcol.data(), kernel, stride, ho, wo, dx);
  return dx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T> Linear<T>::create(ParamSet<T>& p, const std::string& name, int in,
                            int out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = p.add(name + ".weight", {size_t(out), size_t(in)});
  l.bias = p.add(name + ".bias", {size_t(out)});
  return l;
}

template <typename T>
Tensor<T> Linear<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                             Cache* cache) const {
  if (static_cast<int>(x.sample_size()) != in) {
    throw std::invalid_argument("Linear: expected " + std::to_string(in) + " features");
  }
  Tensor<T> y(x.n(), out, 1, 1, Uninitialized{});
  ConstMapMat<T> X(x.data(), x.n(), in);
  ConstMapMat<T> W(p.data(weight), out, in);
  MapMat<T> Y(y.data(), x.n(), out);
  Y.noalias() = X * W.transpose();
  const T* b = p.data(bias);
  for (int s = 0; s < x.n(); ++s) {
    for (int o = 0; o < out; ++o) Y(s, o) += b[o];
  }
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const ParamSet<T>& p, const Cache& cache,
                              const Tensor<T>& dy, ParamSet<T>& grads) const {
  const Tensor<T>& x = cache.input;
  ConstMapMat<T> X(x.data(), x.n(), in);
  ConstMapMat<T> dY(dy.data(), dy.n(), out);
  MapMat<T> gW(grads.data(weight), out, in);
  gW.noalias() += dY.transpose() * X;
  T* gb = grads.data(bias);
  for (int s = 0; s < dy.n(); ++s) {
    for (int o = 0; o < out; ++o) gb[o] += dY(s, o);
  }
  Tensor<T> dx = Tensor<T>::uninit_like(x);
  MapMat<T> dX(dx.data(), x.n(), in);
  ConstMapMat<T> W(p.data(weight), out, in);
  dX.noalias() = dY * W;
  return dx;
}

// ------------------------------------------------------------- GroupNorm

template <typename T>
GroupNorm<T> GroupNorm<T>::create(ParamSet<T>& p, const std::string& name,
                                  int channels, int groups) {
  if (groups < 1 || channels % groups != 0) {
    throw std::invalid_argument("GroupNorm: " + std::to_string(channels) +
                                " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  GroupNorm g;
  g.channels = channels;
  g.groups = groups;
  g.gamma = p.add(name + ".gamma", {size_t(channels)});
  g.beta = p.add(name + ".beta", {size_t(channels)});
  return g;
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                                Cache* cache) const {
  if (x.c() != channels) throw std::invalid_argument("GroupNorm: channel mismatch");
  const int per_group = channels / groups;
  const size_t count = static_cast<size_t>(per_group) * x.plane();
  Tensor<T> xhat = Tensor<T>::uninit_like(x);
  std::vector<T> inv_std(static_cast<size_t>(x.n()) * groups);
  for (int s = 0; s < x.n(); ++s) {
    for (int g = 0; g < groups; ++g) {
      const T* src = x.channel(s, g * per_group);
      double sum = 0.0;
      for (size_t i = 0; i < count; ++i) sum += src[i];
      const double mean = sum / count;
      double sq = 0.0;
      for (size_t i = 0; i < count; ++i) {
        const double d = src[i] - mean;
        sq += d * d;
      }
      const double rstd = 1.0 / std::sqrt(sq / count + kEps);
      T* dst = xhat.channel(s, g * per_group);
      for (size_t i = 0; i < count; ++i) dst[i] = static_cast<T>((src[i] - mean) * rstd);
      inv_std[s * groups + g] = static_cast<T>(rstd);
    }
  }
  Tensor<T> y = Tensor<T>::uninit_like(x);
  const T* ga = p.data(gamma);
  const T* be = p.data(beta);
  const size_t plane = x.plane();
  for (int s = 0; s < x.n(); ++s) {
    for (int c = 0; c < channels; ++c) {
      const T* src = xhat.channel(s, c);
      T* dst = y.channel(s, c);
      for (size_t i = 0; i < plane; ++i) dst[i] = ga[c] * src[i] + be[c];
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const ParamSet<T>& p, const Cache& cache,
                                 const Tensor<T>& dy, ParamSet<T>& grads) const {
  const Tensor<T>& xhat = cache.normalized;
  const int per_group = channels / groups;
  const size_t plane = dy.plane();
  const size_t count = static_cast<size_t>(per_group) * plane;
  const T* ga = p.data(gamma);
  T* gga = grads.data(gamma);
  T* gbe = grads.data(beta);
  Tensor<T> dx = Tensor<T>::uninit_like(dy);
  for (int s = 0; s < dy.n(); ++s) {
    for (int c = 0; c < channels; ++c) {
      const T* d = dy.channel(s, c);
      const T* xh = xhat.channel(s, c);
      T* dxh = dx.channel(s, c);
      T acc_g = 0, acc_b = 0;
      for (size_t i = 0; i < plane; ++i) {
        acc_g += d[i] * xh[i];
        acc_b += d[i];
        dxh[i] = d[i] * ga[c];
      }
      gga[c] += acc_g;
      gbe[c] += acc_b;
    }
    for (int g = 0; g < groups; ++g) {
      T* dxh = dx.channel(s, g * per_group);
      const T* xh = xhat.channel(s, g * per_group);
      double m1 = 0.0, m2 = 0.0;
      for (size_t i = 0; i < count; ++i) {
        m1 += dxh[i];
        m2 += static_cast<double>(dxh[i]) * xh[i];
      }
      m1 /= count;
      m2 /= count;
      const double rstd = cache.inv_std[s * groups + g];
      for (size_t i = 0; i < count; ++i) {
        dxh[i] = static_cast<T>(rstd * (dxh[i] - m1 - xh[i] * m2));
      }
    }
  }
  return dx;
}

// --------------------------------------------------------- TimeEmbedding

template <typename T>
TimeEmbedding<T> TimeEmbedding<T>::create(ParamSet<T>& p, const std::string& name,
                                          int sinusoid_dim, int embed_dim) {
  TimeEmbedding e;
  e.sinusoid_dim = sinusoid_dim;
  e.fc1 = Linear<T>::create(p, name + ".fc1", sinusoid_dim, embed_dim);
  e.fc2 = Linear<T>::create(p, name + ".fc2", embed_dim, embed_dim);
  return e;
}

template <typename T>
Tensor<T> TimeEmbedding<T>::forward(const ParamSet<T>& p, const std::vector<int>& t,
                                    Cache* cache) const {
  Tensor<T> feats(static_cast<int>(t.size()), sinusoid_dim, 1, 1);
  for (size_t s = 0; s < t.size(); ++s) {
    const auto e = sinusoidal_embedding(t[s], sinusoid_dim);
    for (int k = 0; k < sinusoid_dim; ++k) feats.sample(int(s))[k] = static_cast<T>(e[k]);
  }
  Tensor<T> hidden = fc1.forward(p, feats, cache ? &cache->fc1 : nullptr);
  Tensor<T> y = fc2.forward(p, silu_forward(hidden), cache ? &cache->fc2 : nullptr);
  if (cache) cache->hidden = std::move(hidden);
  return y;
}

template <typename T>
void TimeEmbedding<T>::backward(const ParamSet<T>& p, const Cache& cache,
                                const Tensor<T>& dy, ParamSet<T>& grads) const {
  Tensor<T> da = fc2.backward(p, cache.fc2, dy, grads);
  fc1.backward(p, cache.fc1, silu_backward(cache.hidden, da), grads);
}

// -------------------------------------------------------------- ResBlock

template <typename T>
ResBlock<T> ResBlock<T>::create(ParamSet<T>& p, const std::string& name, int in,
                                int out, int time_dim, int groups) {
  ResBlock r;
  r.in = in;
  r.out = out;
  r.norm1 = GroupNorm<T>::create(p, name + ".norm1", in, groups);
  r.conv1 = Conv2d<T>::create(p, name + ".conv1", in, out, 3);
  r.time_proj = Linear<T>::create(p, name + ".time_proj", time_dim, out);
  r.norm2 = GroupNorm<T>::create(p, name + ".norm2", out, groups);
  r.conv2 = Conv2d<T>::create(p, name + ".conv2", out, out, 3);
  r.has_shortcut = in != out;
  if (r.has_shortcut) r.shortcut = Conv2d<T>::create(p, name + ".shortcut", in, out, 1);
  return r;
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                               const Tensor<T>& time_act, Cache* cache) const {
  Tensor<T> h1 = norm1.forward(p, x, cache ? &cache->norm1 : nullptr);
  Tensor<T> c1 = conv1.forward(p, silu_forward(h1), cache ? &cache->conv1 : nullptr);
  const Tensor<T> tb = time_proj.forward(p, time_act, cache ? &cache->time_proj : nullptr);
  const size_t plane = c1.plane();
  for (int s = 0; s < c1.n(); ++s) {
    for (int c = 0; c < out; ++c) {
      const T bias = tb.sample(s)[c];
      T* dst = c1.channel(s, c);
      for (size_t i = 0; i < plane; ++i) dst[i] += bias;
    }
  }
  Tensor<T> h2 = norm2.forward(p, c1, cache ? &cache->norm2 : nullptr);
  Tensor<T> y = conv2.forward(p, silu_forward(h2), cache ? &cache->conv2 : nullptr);
  if (has_shortcut) {
    const Tensor<T> sc = shortcut.forward(p, x, cache ? &cache->shortcut : nullptr);
    for (size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
  } else {
    for (size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  }
  if (cache) {
    cache->pre_act1 = std::move(h1);
    cache->pre_act2 = std::move(h2);
  }
  return y;
}

template <typename T>
Tensor<T> ResBlock<T>::backward(const ParamSet<T>& p, const Cache& cache,
                                const Tensor<T>& dy, ParamSet<T>& grads,
                                Tensor<T>& d_time_act) const {
  Tensor<T> da2 = conv2.backward(p, cache.conv2, dy, grads);
  Tensor<T> dc1 = norm2.backward(p, cache.norm2, silu_backward(cache.pre_act2, da2), grads);

  Tensor<T> dtb(dc1.n(), out, 1, 1);
  const size_t plane = dc1.plane();
  for (int s = 0; s < dc1.n(); ++s) {
    for (int c = 0; c < out; ++c) {
      const T* src = dc1.channel(s, c);
      T acc = 0;
      for (size_t i = 0; i < plane; ++i) acc += src[i];
      dtb.sample(s)[c] = acc;
    }
  }
  const Tensor<T> dta = time_proj.backward(p, cache.time_proj, dtb, grads);
  for (size_t i = 0; i < dta.size(); ++i) d_time_act[i] += dta[i];

  Tensor<T> da1 = conv1.backward(p, cache.conv1, dc1, grads);
  Tensor<T> dx = norm1.backward(p, cache.norm1, silu_backward(cache.pre_act1, da1), grads);
  if (has_shortcut) {
    const Tensor<T> dsc = shortcut.backward(p, cache.shortcut, dy, grads);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dsc[i];
  } else {
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  }
  return dx;
}

// ------------------------------------------------------------- Attention

template <typename T>
Attention<T> Attention<T>::create(ParamSet<T>& p, const std::string& name,
                                  int channels, int groups) {
  Attention a;
  a.channels = channels;
  a.norm = GroupNorm<T>::create(p, name + ".norm", channels, groups);
  a.qkv = Conv2d<T>::create(p, name + ".qkv", channels, 3 * channels, 1);
  a.proj = Conv2d<T>::create(p, name + ".proj", channels, channels, 1);
  return a;
}

template <typename T>
Tensor<T> Attention<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                                Cache* cache) const {
  const Tensor<T> h = norm.forward(p, x, cache ? &cache->norm : nullptr);
  Tensor<T> qkv_out = qkv.forward(p, h, cache ? &cache->qkv : nullptr);
  const Eigen::Index C = channels;
  const Eigen::Index N = static_cast<Eigen::Index>(x.plane());
  const T scale = T(1) / std::sqrt(static_cast<T>(channels));

  Tensor<T> o = Tensor<T>::uninit_like(x);
  if (cache) cache->weights.assign(x.n(), {});
  for (int s = 0; s < x.n(); ++s) {
    const T* base = qkv_out.sample(s);
    ConstMapMat<T> Q(base, C, N);
    ConstMapMat<T> K(base + C * N, C, N);
    ConstMapMat<T> V(base + 2 * C * N, C, N);
    RowMat<T> A(N, N);
    A.noalias() = Q.transpose() * K;
    A *= scale;
    for (Eigen::Index i = 0; i < N; ++i) {
      const T m = A.row(i).maxCoeff();
      A.row(i) = (A.row(i).array() - m).exp();
      A.row(i) /= A.row(i).sum();
    }
    MapMat<T> O(o.sample(s), C, N);
    O.noalias() = V * A.transpose();
    if (cache) cache->weights[s].assign(A.data(), A.data() + N * N);
  }
  Tensor<T> y = proj.forward(p, o, cache ? &cache->proj : nullptr);
  for (size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  if (cache) cache->qkv_out = std::move(qkv_out);
  return y;
}

template <typename T>
Tensor<T> Attention<T>::backward(const ParamSet<T>& p, const Cache& cache,
                                 const Tensor<T>& dy, ParamSet<T>& grads) const {
  const Tensor<T> dout = proj.backward(p, cache.proj, dy, grads);
  const Eigen::Index C = channels;
  const Eigen::Index N = static_cast<Eigen::Index>(dy.plane());
  const T scale = T(1) / std::sqrt(static_cast<T>(channels));

  Tensor<T> dqkv = Tensor<T>::uninit_like(cache.qkv_out);
  for (int s = 0; s < dy.n(); ++s) {
    const T* base = cache.qkv_out.sample(s);
    ConstMapMat<T> Q(base, C, N);
    ConstMapMat<T> K(base + C * N, C, N);
    ConstMapMat<T> V(base + 2 * C * N, C, N);
    ConstMapMat<T> A(cache.weights[s].data(), N, N);
    ConstMapMat<T> dO(dout.sample(s), C, N);

    T* dbase = dqkv.sample(s);
    MapMat<T> dQ(dbase, C, N);
    MapMat<T> dK(dbase + C * N, C, N);
    MapMat<T> dV(dbase + 2 * C * N, C, N);
    dV.noalias() = dO * A;
    RowMat<T> dA(N, N);
    dA.noalias() = dO.transpose() * V;
    // Softmax Jacobian per row: dS = A * (dA - <A, dA>_row).
    for (Eigen::Index i = 0; i < N; ++i) {
      const T inner = A.row(i).dot(dA.row(i));
      dA.row(i) = A.row(i).array() * (dA.row(i).array() - inner);
    }
    dQ.noalias() = K * dA.transpose();
    dQ *= scale;
    dK.noalias() = Q * dA;
    dK *= scale;
  }
  const Tensor<T> dh = qkv.backward(p, cache.qkv, dqkv, grads);
  Tensor<T> dx = norm.backward(p, cache.norm, dh, grads);
  for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  return dx;
}

// -------------------------------------------------------------- Upsample

template <typename T>
Upsample<T> Upsample<T>::create(ParamSet<T>& p, const std::string& name,
                                int channels) {
  Upsample u;
  u.conv = Conv2d<T>::create(p, name + ".conv", channels, channels, 3);
  return u;
}

template <typename T>
Tensor<T> Upsample<T>::forward(const ParamSet<T>& p, const Tensor<T>& x,
                               Cache* cache) const {
  return conv.forward(p, upsample_nearest2x(x), cache ? &cache->conv : nullptr);
}

template <typename T>
Tensor<T> Upsample<T>::backward(const ParamSet<T>& p, const Cache& cache,
                                const Tensor<T>& dy, ParamSet<T>& grads) const {
  return upsample_nearest2x_backward(conv.backward(p, cache.conv, dy, grads));
}

#define MASKDIFF_INSTANTIATE(T)                                                   \
  template Tensor<T> silu_forward<T>(const Tensor<T>&);                          \
  template Tensor<T> silu_backward<T>(const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);     \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&); \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                    \
  template Tensor<T> upsample_nearest2x_backward<T>(const Tensor<T>&);           \
  template struct Conv2d<T>;                                                     \
  template struct Linear<T>;                                                     \
  template struct GroupNorm<T>;                                                  \
  template struct TimeEmbedding<T>;                                              \
  template struct ResBlock<T>;                                                   \
  template struct Attention<T>;                                                  \
  template struct Upsample<T>;

MASKDIFF_INSTANTIATE(float)
MASKDIFF_INSTANTIATE(double)

#undef MASKDIFF_INSTANTIATE

}  // namespace maskdiff
