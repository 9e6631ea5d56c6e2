#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "voxopt/common.hpp"
#include "voxopt/rng.hpp"

namespace voxopt {

/// Dense row-major tensor. Volumes use NCDHW order throughout.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}
  Tensor(std::vector<std::int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ValidationError("tensor data size does not match shape");
    }
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::int64_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.gaussian()) * stddev;
    return t;
  }

  static Tensor uniform(std::vector<std::int64_t> shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  Tensor reshaped(std::vector<std::int64_t> shape) const {
    if (checked_numel(shape) != numel()) throw ValidationError("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t = Tensor<U>(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void add_scaled(const Tensor& o, T alpha) {
    for (std::int64_t i = 0; i < numel(); ++i) data_[static_cast<std::size_t>(i)] += alpha * o[i];
  }

  bool all_finite() const {
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  T max_abs() const {
    T m = T(0);
    for (const T& x : data_) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(x))));
    return m;
  }

  static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
      if (d <= 0) throw ValidationError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<T> data_;
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

}  // namespace voxopt
