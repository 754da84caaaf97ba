#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "raseg/common.hpp"

namespace raseg::nd {

/// (batch, channel, depth, height, width)
struct Shape5 {
  int n = 1, c = 1, d = 1, h = 1, w = 1;

  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
  std::size_t numel() const { return static_cast<std::size_t>(n) * c * spatial(); }
  std::array<int, 5> dims() const { return {n, c, d, h, w}; }
  std::string str() const;
  friend bool operator==(const Shape5&, const Shape5&) = default;
};

template <typename T>
class Tensor5 {
 public:
  using value_type = T;

  Tensor5() = default;
  explicit Tensor5(Shape5 shape, T fill = T(0)) : shape_(shape) {
    for (int v : shape.dims()) {
      if (v < 1) throw DimensionError("tensor dimensions must be >= 1, got " + shape.str());
    }
    data_.assign(shape.numel(), fill);
  }

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  std::size_t offset(int n, int c, int d, int h, int w) const {
    return (((static_cast<std::size_t>(n) * shape_.c + c) * shape_.d + d) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(int n, int c, int d, int h, int w) { return data_[offset(n, c, d, h, w)]; }
  T operator()(int n, int c, int d, int h, int w) const { return data_[offset(n, c, d, h, w)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor5<U> cast() const {
    Tensor5<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor5&, const Tensor5&) = default;

 private:
  Shape5 shape_{};
  std::vector<T> data_;
};

}  // namespace raseg::nd
