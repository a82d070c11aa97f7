#pragma once

#include <cstdint>
#include <vector>

#include "fslora/rng.hpp"

namespace fslora {

// Dense row-major matrix of doubles. Value semantics; shape fixed at
// construction. All numerics below route through the kernel dispatch table.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}
  Matrix(size_t rows, size_t cols) : rows_(rows), cols_(cols), v_(rows * cols, 0.0) {}

  static Matrix identity(size_t n);

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return v_.size(); }

  double& at(size_t i, size_t j) { return v_[i * cols_ + j]; }
  double at(size_t i, size_t j) const { return v_[i * cols_ + j]; }
  double& operator()(size_t i, size_t j) { return v_[i * cols_ + j]; }
  double operator()(size_t i, size_t j) const { return v_[i * cols_ + j]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double* row(size_t i) { return v_.data() + i * cols_; }
  const double* row(size_t i) const { return v_.data() + i * cols_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const;

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && v_ == o.v_;
  }

 private:
  size_t rows_, cols_;
  std::vector<double> v_;
};

// Throws ShapeError (naming both shapes) unless a.cols == b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(double alpha, const Matrix& a);
// y += alpha * x
void add_scaled_inplace(Matrix& y, double alpha, const Matrix& x);

double frobenius_norm_sq(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);  // shapes must match

// i.i.d. Gaussian(0, stddev^2) entries, drawn row-major from the stream.
Matrix gaussian_matrix(size_t rows, size_t cols, double stddev, RngStream& rng);

// FNV-1a over the raw entry bytes (shape included). Detects any mutation.
uint64_t content_hash(const Matrix& a);

// Throws NumericalError naming `what` if any entry is NaN/Inf.
void require_finite(const Matrix& a, const char* what);

}  // namespace fslora
