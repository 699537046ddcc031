#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "spikesleep/error.hpp"

namespace spikesleep {

// Dense row-major array of doubles. Most of the model works on 2-D views.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), fill);
  }
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) s += (i ? "x" : "") + std::to_string(t.shape[i]);
  return s + "]";
}

namespace linalg {

// C = A B
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw Error(ErrorKind::ShapeMismatch, "matmul " + shape_string(a) + " * " + shape_string(b));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &c.data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b.data[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C += A^T B
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = &a.data[p * m];
    const double* brow = &b.data[p * n];
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = &c.data[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = A B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw Error(ErrorKind::ShapeMismatch, "matmul_nt " + shape_string(a) + " * " + shape_string(b) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.data[i * k + p] * b.data[j * k + p];
      c.data[i * n + j] = s;
    }
  return c;
}

inline void add_row_bias(Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) x.data[i * n + j] += bias.data[j];
}

inline void col_sum_acc(const Tensor& x, Tensor& out) {
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += x.data[i * n + j];
}

// Columns [c0, c0 + w) of x.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t w) {
  Tensor out(x.rows(), w);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, c0 + j);
  return out;
}

inline void set_cols(Tensor& x, std::size_t c0, const Tensor& part) {
  for (std::size_t i = 0; i < part.rows(); ++i)
    for (std::size_t j = 0; j < part.cols(); ++j) x(i, c0 + j) = part(i, j);
}

inline void add_inplace(Tensor& x, const Tensor& y) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

}  // namespace linalg
}  // namespace spikesleep
