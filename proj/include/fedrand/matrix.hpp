// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_MATRIX_HPP
#define FEDRAND_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedrand/errors.hpp"

namespace fedrand {

// Dense row-major matrix of doubles. Problem sizes here are tiny (d <= 64),
// so there is no blocking, no views, no BLAS.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ArgumentError("Matrix dimensions must be positive, got " + shape_str(rows, cols));
    }
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
      throw ArgumentError("Matrix dimensions must be positive, got " + shape_str(rows, cols));
    }
    if (data_.size() != rows * cols) {
      throw DimensionError("Matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(rows, cols));
    }
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 0.0); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::string shape() const { return shape_str(rows_, cols_); }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  // Bitwise equality, used by the protocol fallback / determinism checks.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }
  friend bool operator!=(const Matrix& a, const Matrix& b) { return !(a == b); }

  Matrix& operator+=(const Matrix& other) {
    check_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& other) {
    check_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  // this += s * other, the workhorse of weighted aggregation.
  void axpy(double s, const Matrix& other) {
    check_same_shape(other, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs_diff(const Matrix& other) const {
    check_same_shape(other, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i)
      m = std::max(m, std::fabs(data_[i] - other.data_[i]));
    return m;
  }

 private:
  static std::string shape_str(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

  void check_same_shape(const Matrix& other, const char* op) const {
    if (!same_shape(other)) {
      throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape() + " vs " +
                           other.shape());
    }
  }

  std::size_t rows_, cols_;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + a.shape() + " * " + b.shape());
  }
  Matrix out(a.rows(), b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

// Elementwise product, used by the Hadamard-composed adapters.
inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("hadamard shape mismatch: " + a.shape() + " vs " + b.shape());
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

// y = M^T x for a column vector x (len == M.rows()). Avoids materializing the
// transpose in the per-position model loop.
inline std::vector<double> matvec_transposed(const Matrix& m, const std::vector<double>& x) {
  if (x.size() != m.rows()) {
    throw DimensionError("matvec_transposed shape mismatch: " + m.shape() + "^T * vector of length " +
                         std::to_string(x.size()));
  }
  std::vector<double> y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] += m(r, c) * xr;
  }
  return y;
}

// y = M x for a column vector x (len == M.cols()).
inline std::vector<double> matvec(const Matrix& m, const std::vector<double>& x) {
  if (x.size() != m.cols()) {
    throw DimensionError("matvec shape mismatch: " + m.shape() + " * vector of length " +
                         std::to_string(x.size()));
  }
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) acc += m(r, c) * x[c];
    y[r] = acc;
  }
  return y;
}

// Numerically stable softmax with max subtraction.
inline std::vector<double> softmax_row(const std::vector<double>& logits) {
  if (logits.empty()) {
    throw ArgumentError("softmax_row: empty input");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

// log(sum(exp(logits))), same max-subtraction trick. Feeds the NLL loss.
inline double log_sum_exp(const std::vector<double>& logits) {
  if (logits.empty()) {
    throw ArgumentError("log_sum_exp: empty input");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

}  // namespace fedrand

#endif  // FEDRAND_MATRIX_HPP
