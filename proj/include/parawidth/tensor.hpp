#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "parawidth/errors.hpp"

namespace parawidth {

// Dense NCHW tensor. Linear activations use h = w = 1.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w) : shape_{n, c, h, w}, data_(count(n, c, h, w), T(0)) {}

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }
  std::size_t sample_stride() const { return static_cast<std::size_t>(shape_[1]) * plane(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T* sample(int i) { return data_.data() + i * sample_stride(); }
  const T* sample(int i) const { return data_.data() + i * sample_stride(); }
  T* channel(int i, int ch) { return sample(i) + ch * plane(); }
  const T* channel(int i, int ch) const { return sample(i) + ch * plane(); }

  T& at(int i, int ch, int y, int x) { return channel(i, ch)[y * shape_[3] + x]; }
  T at(int i, int ch, int y, int x) const { return channel(i, ch)[y * shape_[3] + x]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(int n, int c, int h, int w) {
    if (count(n, c, h, w) != data_.size()) {
      throw DimensionError("reshape changes element count");
    }
    shape_ = {n, c, h, w};
  }

  // Rows [begin, end) as a new tensor.
  Tensor rows(int begin, int end) const {
    Tensor out(end - begin, c(), h(), w());
    std::copy(sample(begin), sample(begin) + out.size(), out.data());
    return out;
  }

  std::string shape_string() const {
    return "(" + std::to_string(shape_[0]) + "," + std::to_string(shape_[1]) + "," +
           std::to_string(shape_[2]) + "," + std::to_string(shape_[3]) + ")";
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(int n, int c, int h, int w) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw DimensionError("negative tensor dimension");
    return static_cast<std::size_t>(n) * c * h * w;
  }

  std::array<int, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

}  // namespace parawidth
