#pragma once

#include <cstdint>
#include <vector>

#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/sketch.hpp"

namespace fslora {

// Frozen base weight. Immutable under every method except the FLoRA merge,
// which explicitly replaces it. content_hash(w0) lets experiments assert it
// was never touched.
struct FrozenBase {
  Matrix w0;  // m x n
};

// Low-rank adapter pair: b is m x r, a is r x n.
struct AdapterPair {
  Matrix b;
  Matrix a;

  size_t rank() const { return b.cols(); }
  bool shapes_ok() const { return b.cols() == a.rows(); }
};

// Classical init: a ~ Gaussian(0, 1/rank), b = 0, so the initial effective
// weight is exactly the base.
AdapterPair init_adapters(size_t m, size_t n, size_t rank, RngStream& rng);

// Gradients with respect to the adapter pair. For a sketch with index set I,
// columns of gb and rows of ga outside I are exactly zero.
struct AdapterGrads {
  Matrix gb;  // m x r
  Matrix ga;  // r x n
};

// W0 + (B S) A.
Matrix effective_weight(const FrozenBase& base, const AdapterPair& ad, const Sketch& s);

// Chain rule through the sketched forward map: given g = dL/dW at W0 + B S A,
//   gb = g * a^T * S^T,   ga = S^T * b^T * g.
// S is diagonal, so the sketch lands as a column scaling of g*a^T and a row
// scaling of b^T*g, and the sparsity pattern is exact.
AdapterGrads adapter_grads(const Matrix& g, const AdapterPair& ad, const Sketch& s);

// b -= lr*gb, a -= lr*ga. Entries whose gradient is zero stay bit-identical.
// Throws NumericalError if the gradients carry non-finite values (divergence).
AdapterPair sgd_step(const AdapterPair& ad, const AdapterGrads& grads, double lr);

// The k touched columns of delta-B and rows of delta-A plus their indices;
// the wire form of a client's round update.
struct SparseDelta {
  int client_id = -1;
  long round = -1;
  uint32_t r = 0;  // adapter rank (densified column/row count)
  uint32_t m = 0;  // rows of b
  uint32_t n = 0;  // cols of a
  std::vector<uint32_t> indices;  // sorted ascending
  std::vector<double> b_cols;     // indices.size() columns, each m values
  std::vector<double> a_rows;     // indices.size() rows, each n values

  double* b_col(size_t slot) { return b_cols.data() + slot * m; }
  const double* b_col(size_t slot) const { return b_cols.data() + slot * m; }
  double* a_row(size_t slot) { return a_rows.data() + slot * n; }
  const double* a_row(size_t slot) const { return a_rows.data() + slot * n; }
};

// Gathers (after - before) on the sketch's index set. Throws ContractError if
// the pairs differ anywhere outside it (the update leaked past the sketch).
SparseDelta extract_delta(const AdapterPair& before, const AdapterPair& after, const Sketch& s);

// Dense (delta_b, delta_a) form; zero outside the index set by construction.
struct DenseDelta {
  Matrix db;  // m x r
  Matrix da;  // r x n
};
DenseDelta densify(const SparseDelta& d);

}  // namespace fslora
