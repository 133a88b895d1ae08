/* Copyright 2026 the uspsim authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "uspsim/error.hpp"
#include "uspsim/rng.hpp"

namespace uspsim {

/// Dense row-major matrix. The default-constructed (0x0) state is only a
/// placeholder for moved-from/optional storage; every kernel requires
/// rows >= 1 and cols >= 1.
template <typename T>
class Mat {
 public:
  Mat() = default;

  Mat(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("Mat: rows and cols must be >= 1");
  }

  Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) throw ShapeError("Mat: rows and cols must be >= 1");
    if (data_.size() != rows * cols)
      throw ShapeError("Mat: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }

  Mat(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    if (rows_ == 0) throw ShapeError("Mat: empty initializer");
    cols_ = rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Mat: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = T{1};
    return m;
  }

  static Mat random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Mat m(rows, cols);
    for (auto& x : m.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return m;
  }

  static Mat random_normal(std::size_t rows, std::size_t cols, Rng& rng, double mean = 0.0,
                           double stddev = 1.0) {
    Mat m(rows, cols);
    for (auto& x : m.data_) x = static_cast<T>(rng.normal(mean, stddev));
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  /// Rows [begin, end) as a new matrix.
  Mat slice_rows(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > rows_) throw ShapeError("Mat::slice_rows: bad range");
    Mat out(end - begin, cols_);
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
              data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
    return out;
  }

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatD = Mat<double>;
using MatF = Mat<float>;

/// Row-major binary mask (1 = visible / valid, 0 = masked).
struct BoolMat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> v;

  BoolMat() = default;
  BoolMat(std::size_t r, std::size_t c, std::uint8_t fill = 1) : rows(r), cols(c), v(r * c, fill) {}

  std::uint8_t& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

// ---- kernels ----------------------------------------------------------------

/// Standard matrix product. a.cols must equal b.rows.
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Mat<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a.at(i, k);
      if (aik == T{0}) continue;
      const auto brow = b.row(k);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// Row-wise softmax with per-row max subtraction. -inf entries act as masks;
/// a row that is entirely -inf has no distribution and is an error.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& m) {
  Mat<T> out(m.rows(), m.cols());
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    T mx = neg_inf;
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, m.at(i, j));
    if (mx == neg_inf)
      throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " fully masked");
    T denom{0};
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const T e = std::exp(m.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) /= denom;
  }
  return out;
}

/// Per-row layer normalization followed by the affine gamma/beta transform.
/// Uses the biased (1/N) variance.
template <typename T>
Mat<T> layer_norm(const Mat<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps) {
  if (gamma.size() != x.cols() || beta.size() != x.cols())
    throw ShapeError("layer_norm: gamma/beta length != cols");
  if (!(eps > T{0})) throw ValueError("layer_norm: eps must be > 0");
  Mat<T> out(x.rows(), x.cols());
  const T n = static_cast<T>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T mean{0};
    for (std::size_t j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean /= n;
    T var{0};
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const T d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const T inv = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols(); ++j)
      out.at(i, j) = (x.at(i, j) - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                  T eps) {
  return layer_norm(x, std::span<const T>(gamma), std::span<const T>(beta), eps);
}

/// GELU, tanh approximation.
template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028653558798921198687);  // sqrt(2/pi)
  const T inner = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(inner));
}

/// Two-layer MLP: gelu(x*w1 + b1)*w2 + b2, applied row-wise.
template <typename T>
Mat<T> mlp2(const Mat<T>& x, const Mat<T>& w1, std::span<const T> b1, const Mat<T>& w2,
            std::span<const T> b2) {
  if (x.cols() != w1.rows()) throw ShapeError("mlp2: x.cols != w1.rows");
  if (w1.cols() != b1.size()) throw ShapeError("mlp2: w1.cols != b1 length");
  if (w1.cols() != w2.rows()) throw ShapeError("mlp2: w1.cols != w2.rows");
  if (w2.cols() != b2.size()) throw ShapeError("mlp2: w2.cols != b2 length");
  Mat<T> h = matmul(x, w1);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) h.at(i, j) = gelu(h.at(i, j) + b1[j]);
  Mat<T> out = matmul(h, w2);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += b2[j];
  return out;
}

template <typename T>
Mat<T> mlp2(const Mat<T>& x, const Mat<T>& w1, const std::vector<T>& b1, const Mat<T>& w2,
            const std::vector<T>& b2) {
  return mlp2(x, w1, std::span<const T>(b1), w2, std::span<const T>(b2));
}

/// Elementwise static_cast between element types.
template <typename To, typename From>
Mat<To> mat_cast(const Mat<From>& m) {
  Mat<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.data()[i] = static_cast<To>(m.data()[i]);
  }
  return out;
}

/// Largest absolute elementwise difference; shapes must match.
template <typename T>
double max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) -
                                     static_cast<double>(b.data()[i])));
  return worst;
}

}  // namespace uspsim
