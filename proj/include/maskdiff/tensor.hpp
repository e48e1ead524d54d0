#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <memory>
#include <new>
#include <type_traits>
#include <utility>
#include <vector>

namespace maskdiff {

// 64-byte aligned storage. Vectorized elementwise kernels peel scalar
// iterations up to the first aligned address, so a fixed base alignment keeps
// results independent of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

// Allocator that leaves trivially constructible values uninitialized on
// resize, for buffers that are fully overwritten right after allocation.
template <typename T, typename A = AlignedAllocator<T>>
class DefaultInitAllocator : public A {
  using traits = std::allocator_traits<A>;

 public:
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U, typename traits::template rebind_alloc<U>>;
  };
  using A::A;

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    traits::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

struct Uninitialized {};

// Batched channel-major grid: n samples of c x h x w, row-major within a plane.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
    data_.assign(static_cast<size_t>(n) * c * h * w, fill);
  }
  // Contents are indeterminate until written.
  Tensor(int n, int c, int h, int w, Uninitialized) : n_(n), c_(c), h_(h), w_(w) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
    data_.resize(static_cast<size_t>(n) * c * h * w);
  }

  using Storage = std::vector<T, DefaultInitAllocator<T>>;

  static Tensor like(const Tensor& other, T fill = T(0)) {
    return Tensor(other.n_, other.c_, other.h_, other.w_, fill);
  }
  static Tensor uninit_like(const Tensor& other) {
    return Tensor(other.n_, other.c_, other.h_, other.w_, Uninitialized{});
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  size_t size() const { return data_.size(); }
  size_t plane() const { return static_cast<size_t>(h_) * w_; }
  size_t sample_size() const { return static_cast<size_t>(c_) * h_ * w_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T& at(int b, int ch, int y, int x) {
    return data_[((static_cast<size_t>(b) * c_ + ch) * h_ + y) * w_ + x];
  }
  const T& at(int b, int ch, int y, int x) const {
    return data_[((static_cast<size_t>(b) * c_ + ch) * h_ + y) * w_ + x];
  }

  T* sample(int b) { return data_.data() + b * sample_size(); }
  const T* sample(int b) const { return data_.data() + b * sample_size(); }
  T* channel(int b, int ch) { return sample(b) + ch * plane(); }
  const T* channel(int b, int ch) const { return sample(b) + ch * plane(); }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" +
           std::to_string(h_) + "x" + std::to_string(w_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Copy of sample b as a batch of one.
  Tensor slice(int b) const {
    Tensor out(1, c_, h_, w_, Uninitialized{});
    std::copy_n(sample(b), sample_size(), out.data());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_, Uninitialized{});
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor& o) const {
    return same_shape(o) && data_ == o.data_;
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  Storage data_;
};

// Stack single-sample tensors of identical shape into one batch.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw std::invalid_argument("stack: empty input");
  const auto& first = items.front();
  Tensor<T> out(static_cast<int>(items.size()), first.c(), first.h(),
                first.w(), Uninitialized{});
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].n() != 1 || items[i].c() != first.c() ||
        items[i].h() != first.h() || items[i].w() != first.w()) {
      throw std::invalid_argument("stack: shape mismatch at item " +
                                  std::to_string(i));
    }
    std::copy_n(items[i].data(), first.sample_size(),
                out.sample(static_cast<int>(i)));
  }
  return out;
}

using Image = Tensor<float>;
using Mask = Tensor<float>;

}  // namespace maskdiff
