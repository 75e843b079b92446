#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "uwf/common.hpp"

namespace uwf {

using EMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using EConstMap = Eigen::Map<const EMatrix>;

/// Dense row-major float tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0f);
  }
  Tensor(std::vector<int> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw std::invalid_argument("tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<float>(rng.normal()) * stddev;
    return t;
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  float& at(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
  float at(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw std::invalid_argument("reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  /// View the (possibly >2-d) tensor as a rows x cols matrix.
  EMap as_matrix(int rows, int cols) {
    return EMap(data_.data(), rows, cols);
  }
  EConstMap as_matrix(int rows, int cols) const {
    return EConstMap(data_.data(), rows, cols);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  uint64_t content_hash() const {
    return fnv1a64(data_.data(), data_.size() * sizeof(float));
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

}  // namespace uwf
