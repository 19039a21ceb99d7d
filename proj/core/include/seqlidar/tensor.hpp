// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "seqlidar/errors.hpp"

namespace seqlidar {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "float32 or float64 only");
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

/// Dense row-major array. Value type: copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T{1}) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng) * static_cast<double>(stddev));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[d]) throw DimensionError("index out of range for " + shape_str(shape_));
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

// L4DT container: "L4DT", version 1, dtype byte, ndim byte, ndim little-endian
// u64 extents, row-major little-endian scalars.
void write_l4dt(const std::filesystem::path& path, const AnyTensor& tensor);
AnyTensor read_l4dt_any(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_l4dt(const AnyTensor& tensor);
AnyTensor decode_l4dt(std::span<const std::uint8_t> bytes);

template <typename T>
void write_l4dt(const std::filesystem::path& path, const Tensor<T>& tensor) {
  write_l4dt(path, AnyTensor(tensor));
}

/// Reads an L4DT file and converts to the requested scalar type.
template <typename T>
Tensor<T> read_l4dt(const std::filesystem::path& path) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, read_l4dt_any(path));
}

}  // namespace seqlidar
