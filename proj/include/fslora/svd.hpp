#pragma once

#include <vector>

#include "fslora/matrix.hpp"

namespace fslora {

struct SvdResult {
  Matrix u;               // m x k, orthonormal columns
  std::vector<double> s;  // k singular values, descending, non-negative
  Matrix v;               // n x k, orthonormal columns
};

// Best rank-k approximation factors of a: a ~= u * diag(s) * v^T.
//
// One-sided Jacobi on the columns (transposed first when rows < cols), so
// singular values converge to high relative accuracy at desk scale. When the
// requested rank exceeds the numerical rank, the surplus columns of u and v
// are completed to an orthonormal set (their singular values are 0).
//
// Throws RangeError if target_rank is 0 or exceeds min(rows, cols);
// NumericalError (naming the sweep count) if Jacobi fails to converge.
SvdResult truncated_svd(const Matrix& a, size_t target_rank);

}  // namespace fslora
