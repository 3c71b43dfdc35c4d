// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "todsel/util.hpp"

namespace todsel::ts {

inline std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major value container, rank 1 or 2. Scalars are shape {1}.
template <typename T>
struct Array {
  std::vector<size_t> shape;
  std::vector<T> data;

  Array() = default;
  Array(std::vector<size_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  static size_t numel_of(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(s));
      n *= d;
    }
    return s.empty() ? 0 : n;
  }

  static Array zeros(std::vector<size_t> s) { return Array(std::move(s), T(0)); }
  static Array full(std::vector<size_t> s, T v) { return Array(std::move(s), v); }
  static Array scalar(T v) { return Array({1}, v); }

  static Array from_vector(std::vector<size_t> s, std::vector<T> values) {
    Array a;
    a.shape = std::move(s);
    if (values.size() != numel_of(a.shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(a.shape));
    a.data = std::move(values);
    return a;
  }

  // 2-d literal, e.g. Array<double>::from_rows({{1,2},{3,4}}).
  static Array from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Array a;
    a.shape = {rows.size(), rows.begin()->size()};
    for (const auto& r : rows) {
      if (r.size() != a.cols())
        throw ShapeError("ragged row in 2-d literal");
      a.data.insert(a.data.end(), r.begin(), r.end());
    }
    return a;
  }

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t rows() const {
    if (rank() != 2) throw ShapeError("rows() on rank-" + std::to_string(rank()) + " array");
    return shape[0];
  }
  size_t cols() const {
    if (rank() != 2) throw ShapeError("cols() on rank-" + std::to_string(rank()) + " array");
    return shape[1];
  }

  T& at(size_t i) { return data[i]; }
  T at(size_t i) const { return data[i]; }
  T& at(size_t r, size_t c) { return data[r * shape[1] + c]; }
  T at(size_t r, size_t c) const { return data[r * shape[1] + c]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on array of shape " + shape_str(shape));
    return data[0];
  }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Array<U> cast() const {
    Array<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

}  // namespace todsel::ts
