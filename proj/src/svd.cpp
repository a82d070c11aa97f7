#include "fslora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fslora/errors.hpp"

namespace fslora {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kOrthTol = 1e-15;  // off-diagonal tolerance, relative

double col_dot(const Matrix& w, size_t p, size_t q) {
  double s = 0.0;
  for (size_t i = 0; i < w.rows(); ++i) s += w.at(i, p) * w.at(i, q);
  return s;
}

// Tall case: rows >= cols. Jacobi rotations orthogonalize the columns of w;
// v accumulates the rotations.
void one_sided_jacobi(Matrix& w, Matrix& v) {
  const size_t n = w.cols();
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (size_t p = 0; p + 1 < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        const double alpha = col_dot(w, p, p);
        const double beta = col_dot(w, q, q);
        const double gamma = col_dot(w, p, q);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::fabs(gamma) <= kOrthTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t =
            (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (size_t i = 0; i < w.rows(); ++i) {
          const double wp = w.at(i, p), wq = w.at(i, q);
          w.at(i, p) = c * wp - s * wq;
          w.at(i, q) = s * wp + c * wq;
        }
        for (size_t i = 0; i < n; ++i) {
          const double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericalError("truncated_svd: Jacobi failed to converge after " +
                       std::to_string(kMaxSweeps) + " sweeps");
}

// Replaces column j of u with a unit vector orthogonal to columns [0, j).
// Candidates are the canonical basis vectors; the one with the largest
// residual after projection wins (deterministic).
void complete_column(Matrix& u, size_t j) {
  const size_t m = u.rows();
  std::vector<double> best(m, 0.0);
  double best_norm = -1.0;
  for (size_t cand = 0; cand < m; ++cand) {
    std::vector<double> r(m, 0.0);
    r[cand] = 1.0;
    for (size_t c = 0; c < j; ++c) {
      double proj = 0.0;
      for (size_t i = 0; i < m; ++i) proj += r[i] * u.at(i, c);
      for (size_t i = 0; i < m; ++i) r[i] -= proj * u.at(i, c);
    }
    double nrm = 0.0;
    for (double x : r) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm > best_norm) {
      best_norm = nrm;
      best = std::move(r);
    }
  }
  for (size_t i = 0; i < m; ++i) u.at(i, j) = best[i] / best_norm;
}

SvdResult svd_tall(const Matrix& a, size_t target_rank) {
  const size_t m = a.rows(), n = a.cols();
  Matrix w = a;
  Matrix v = Matrix::identity(n);
  one_sided_jacobi(w, v);

  std::vector<double> sigma(n);
  for (size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(col_dot(w, j, j));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t x, size_t y) { return sigma[x] > sigma[y]; });

  const size_t k = target_rank;
  SvdResult out;
  out.u = Matrix(m, k);
  out.v = Matrix(n, k);
  out.s.resize(k);
  const double smax = sigma[order[0]];
  for (size_t j = 0; j < k; ++j) {
    const size_t src = order[j];
    out.s[j] = sigma[src];
    for (size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
    if (sigma[src] > smax * 1e-13 && sigma[src] > 0.0) {
      for (size_t i = 0; i < m; ++i) out.u.at(i, j) = w.at(i, src) / sigma[src];
    } else {
      complete_column(out.u, j);
    }
  }
  return out;
}

}  // namespace

SvdResult truncated_svd(const Matrix& a, size_t target_rank) {
  const size_t mn = std::min(a.rows(), a.cols());
  if (target_rank == 0 || target_rank > mn) {
    throw RangeError("truncated_svd: target rank " + std::to_string(target_rank) +
                     " outside [1, " + std::to_string(mn) + "]");
  }
  require_finite(a, "truncated_svd input");
  if (a.rows() >= a.cols()) return svd_tall(a, target_rank);
  SvdResult t = svd_tall(transpose(a), target_rank);
  return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

}  // namespace fslora
