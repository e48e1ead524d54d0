#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace maskdiff {

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<size_t> shape;
  std::vector<T> values;

  size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), size_t{1},
                           std::multiplies<>());
  }
};

// Ordered collection of named tensors; insertion order is the serialization
// and initialization order.
template <typename T>
class ParamSet {
 public:
  size_t add(const std::string& name, std::vector<size_t> shape) {
    if (index_.count(name)) {
      throw std::invalid_argument("ParamSet: duplicate tensor name '" + name + "'");
    }
    NamedTensor<T> t{name, std::move(shape), {}};
    t.values.assign(t.numel(), T(0));
    index_.emplace(name, tensors_.size());
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }

  size_t size() const { return tensors_.size(); }
  NamedTensor<T>& operator[](size_t i) { return tensors_[i]; }
  const NamedTensor<T>& operator[](size_t i) const { return tensors_[i]; }
  T* data(size_t i) { return tensors_[i].values.data(); }
  const T* data(size_t i) const { return tensors_[i].values.data(); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("ParamSet: no tensor named '" + name + "'");
    }
    return it->second;
  }

  size_t total_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.values.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& t : out.tensors_) std::fill(t.values.begin(), t.values.end(), T(0));
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), T(0));
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors_) {
      const size_t i = out.add(t.name, t.shape);
      std::transform(t.values.begin(), t.values.end(), out[i].values.begin(),
                     [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

  // Same names, shapes and order.
  bool same_layout(const ParamSet& o) const {
    if (o.size() != size()) return false;
    for (size_t i = 0; i < size(); ++i) {
      if (tensors_[i].name != o.tensors_[i].name ||
          tensors_[i].shape != o.tensors_[i].shape) {
        return false;
      }
    }
    return true;
  }

  bool operator==(const ParamSet& o) const {
    if (!same_layout(o)) return false;
    for (size_t i = 0; i < size(); ++i) {
      if (tensors_[i].values != o.tensors_[i].values) return false;
    }
    return true;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::vector<NamedTensor<T>> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace maskdiff
