/* Copyright 2026 The SSR Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ssr/error.hpp"

namespace ssr {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are stored little-endian");

enum class DType { f32, f64, i32, u8 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::u8: return "u8";
  }
  return "?";
}

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  return 0;
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
  else static_assert(sizeof(T) == 0, "unsupported tensor element type");
}

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major n-d array. A rank-0 tensor holds one element.
class Tensor {
 public:
  Tensor() : Tensor(DType::f32, Shape{0}) {}

  Tensor(DType dtype, Shape shape) : shape_(std::move(shape)) {
    for (auto d : shape_) {
      if (d < 0) throw InvalidArgument("negative tensor dimension");
    }
    const auto n = static_cast<std::size_t>(shape_numel(shape_));
    switch (dtype) {
      case DType::f32: data_ = std::vector<float>(n); break;
      case DType::f64: data_ = std::vector<double>(n); break;
      case DType::i32: data_ = std::vector<std::int32_t>(n); break;
      case DType::u8: data_ = std::vector<std::uint8_t>(n); break;
    }
  }

  template <typename T>
  static Tensor from(Shape shape, std::vector<T> values) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw InvalidArgument("tensor of shape " + shape_str(shape) + " cannot hold " +
                            std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
  }

  DType dtype() const noexcept { return static_cast<DType>(data_.index()); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept {
    return std::visit([](const auto& v) { return v.size(); }, data_);
  }
  std::size_t nbytes() const noexcept { return numel() * dtype_size(dtype()); }

  template <typename T>
  std::span<const T> values() const {
    check_type<T>();
    return std::get<std::vector<T>>(data_);
  }
  template <typename T>
  std::span<T> values() {
    check_type<T>();
    return std::get<std::vector<T>>(data_);
  }

  /// Element-wise copy into doubles regardless of storage type.
  std::vector<double> to_double() const {
    return std::visit(
        [](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
  }

  const char* raw_bytes() const {
    return std::visit([](const auto& v) { return reinterpret_cast<const char*>(v.data()); },
                      data_);
  }
  char* raw_bytes() {
    return std::visit([](auto& v) { return reinterpret_cast<char*>(v.data()); }, data_);
  }

  /// Bitwise equality: same dtype, shape and payload bytes.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dtype() == b.dtype() && a.shape_ == b.shape_ &&
           std::memcmp(a.raw_bytes(), b.raw_bytes(), a.nbytes()) == 0;
  }

 private:
  template <typename T>
  void check_type() const {
    if (dtype() != dtype_of<T>()) {
      throw InvalidArgument(std::string("tensor holds ") + dtype_name(dtype()) +
                            ", requested " + dtype_name(dtype_of<T>()));
    }
  }

  Shape shape_;
  // Alternative order matches DType.
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int32_t>,
               std::vector<std::uint8_t>>
      data_;
};

template <typename T>
Tensor tensor_from_doubles(Shape shape, const std::vector<double>& v) {
  return Tensor::from<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

}  // namespace ssr
