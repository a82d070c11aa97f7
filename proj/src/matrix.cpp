#include "fslora/matrix.hpp"

#include <cmath>
#include <string>

#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"

namespace fslora {

namespace {
std::string shape_str(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}
}  // namespace

Matrix Matrix::identity(size_t n) {
  Matrix m(n, n);
  for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const {
  for (double x : v_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix c(a.rows(), b.cols());
  kern::active().matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (size_t i = 0; i < a.rows(); ++i) {
    for (size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
  Matrix c = a;
  kern::active().axpy(1.0, b.data(), c.data(), c.size());
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("sub: shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
  Matrix c = a;
  kern::active().axpy(-1.0, b.data(), c.data(), c.size());
  return c;
}

Matrix scale(double alpha, const Matrix& a) {
  Matrix c(a.rows(), a.cols());
  kern::active().scale(alpha, a.data(), c.data(), c.size());
  return c;
}

void add_scaled_inplace(Matrix& y, double alpha, const Matrix& x) {
  if (!y.same_shape(x)) {
    throw ShapeError("add_scaled_inplace: shapes differ, " + shape_str(y) + " vs " + shape_str(x));
  }
  kern::active().axpy(alpha, x.data(), y.data(), y.size());
}

double frobenius_norm_sq(const Matrix& a) { return kern::active().sum_sq(a.data(), a.size()); }

double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_norm_sq(a)); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = std::fabs(a.data()[i] - b.data()[i]);
    if (d > m) m = d;
  }
  return m;
}

Matrix gaussian_matrix(size_t rows, size_t cols, double stddev, RngStream& rng) {
  Matrix m(rows, cols);
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.next_gaussian();
  return m;
}

uint64_t content_hash(const Matrix& a) {
  uint64_t shape[2] = {a.rows(), a.cols()};
  uint64_t h = fnv1a64(shape, sizeof(shape));
  return fnv1a64(a.data(), a.size() * sizeof(double), h);
}

void require_finite(const Matrix& a, const char* what) {
  if (!a.all_finite()) {
    throw NumericalError(std::string(what) + ": non-finite entries");
  }
}

}  // namespace fslora
