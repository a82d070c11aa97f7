#include "fslora/lora.hpp"

#include <cstring>
#include <string>

#include "fslora/errors.hpp"

namespace fslora {

AdapterPair init_adapters(size_t m, size_t n, size_t rank, RngStream& rng) {
  AdapterPair ad;
  ad.b = Matrix(m, rank);
  ad.a = gaussian_matrix(rank, n, 1.0 / static_cast<double>(rank), rng);
  return ad;
}

Matrix effective_weight(const FrozenBase& base, const AdapterPair& ad, const Sketch& s) {
  if (!ad.shapes_ok() || ad.rank() != s.r() || base.w0.rows() != ad.b.rows() ||
      base.w0.cols() != ad.a.cols()) {
    throw ShapeError("effective_weight: base " + std::to_string(base.w0.rows()) + "x" +
                     std::to_string(base.w0.cols()) + ", b " + std::to_string(ad.b.rows()) + "x" +
                     std::to_string(ad.b.cols()) + ", a " + std::to_string(ad.a.rows()) + "x" +
                     std::to_string(ad.a.cols()) + ", sketch rank " + std::to_string(s.r()));
  }
  // Gather the k active columns/rows and multiply compactly. Element for
  // element this is the same accumulation as the dense (b S) a product with
  // its zero columns skipped, so it stays consistent with the definition
  // while costing k/r of the dense work.
  const size_t m = ad.b.rows();
  const size_t n = ad.a.cols();
  const auto& idx = s.indices();
  const size_t k = idx.size();
  const double sc = s.sketch_scale();
  Matrix bc(m, k);
  Matrix ac(k, n);
  for (size_t i = 0; i < m; ++i) {
    const double* brow = ad.b.row(i);
    double* crow = bc.row(i);
    for (size_t slot = 0; slot < k; ++slot) crow[slot] = sc * brow[idx[slot]];
  }
  for (size_t slot = 0; slot < k; ++slot) {
    std::memcpy(ac.row(slot), ad.a.row(idx[slot]), n * sizeof(double));
  }
  return add(base.w0, matmul(bc, ac));
}

AdapterGrads adapter_grads(const Matrix& g, const AdapterPair& ad, const Sketch& s) {
  if (!ad.shapes_ok() || ad.rank() != s.r() || g.rows() != ad.b.rows() ||
      g.cols() != ad.a.cols()) {
    throw ShapeError("adapter_grads: g " + std::to_string(g.rows()) + "x" +
                     std::to_string(g.cols()) + " inconsistent with b " +
                     std::to_string(ad.b.rows()) + "x" + std::to_string(ad.b.cols()) + ", a " +
                     std::to_string(ad.a.rows()) + "x" + std::to_string(ad.a.cols()) +
                     ", sketch rank " + std::to_string(s.r()));
  }
  // Compact equivalents of (g a^T) S^T and S^T (b^T g): gather the k rows of
  // a and columns of b, multiply, scale, and scatter back. Each surviving
  // element is accumulated in the same order as in the dense products, and
  // everything outside the index set is zero by construction.
  const size_t m = ad.b.rows();
  const size_t n = ad.a.cols();
  const size_t r = ad.rank();
  const auto& idx = s.indices();
  const size_t k = idx.size();
  const double sc = s.sketch_scale();

  Matrix at_c(n, k);  // columns of a^T at the active indices
  for (size_t t = 0; t < n; ++t) {
    double* row = at_c.row(t);
    for (size_t slot = 0; slot < k; ++slot) row[slot] = ad.a.at(idx[slot], t);
  }
  Matrix bt_c(k, m);  // rows of b^T at the active indices
  for (size_t slot = 0; slot < k; ++slot) {
    double* row = bt_c.row(slot);
    for (size_t i = 0; i < m; ++i) row[i] = ad.b.at(i, idx[slot]);
  }

  Matrix gb_c = matmul(g, at_c);   // m x k
  Matrix ga_c = matmul(bt_c, g);   // k x n

  AdapterGrads out;
  out.gb = Matrix(m, r);
  out.ga = Matrix(r, n);
  for (size_t i = 0; i < m; ++i) {
    const double* src = gb_c.row(i);
    double* dst = out.gb.row(i);
    for (size_t slot = 0; slot < k; ++slot) dst[idx[slot]] = sc * src[slot];
  }
  for (size_t slot = 0; slot < k; ++slot) {
    const double* src = ga_c.row(slot);
    double* dst = out.ga.row(idx[slot]);
    for (size_t t = 0; t < n; ++t) dst[t] = sc * src[t];
  }
  return out;
}

AdapterPair sgd_step(const AdapterPair& ad, const AdapterGrads& grads, double lr) {
  if (lr <= 0.0) throw RangeError("sgd_step: learning rate must be positive");
  if (!grads.gb.same_shape(ad.b) || !grads.ga.same_shape(ad.a)) {
    throw ShapeError("sgd_step: gradient shapes do not match adapters");
  }
  if (!grads.gb.all_finite() || !grads.ga.all_finite()) {
    throw NumericalError("sgd_step: non-finite adapter gradients (divergence)");
  }
  AdapterPair out = ad;
  add_scaled_inplace(out.b, -lr, grads.gb);
  add_scaled_inplace(out.a, -lr, grads.ga);
  return out;
}

SparseDelta extract_delta(const AdapterPair& before, const AdapterPair& after, const Sketch& s) {
  if (!before.b.same_shape(after.b) || !before.a.same_shape(after.a)) {
    throw ShapeError("extract_delta: before/after shapes differ");
  }
  if (before.rank() != s.r()) {
    throw ShapeError("extract_delta: adapter rank " + std::to_string(before.rank()) +
                     " != sketch rank " + std::to_string(s.r()));
  }
  const size_t m = before.b.rows();
  const size_t n = before.a.cols();
  const uint32_t r = static_cast<uint32_t>(s.r());

  // Any difference outside the index set means the round update leaked past
  // the sketch; that breaks the upload contract, so fail loudly.
  for (uint32_t j = 0; j < r; ++j) {
    if (s.contains(j)) continue;
    for (size_t i = 0; i < m; ++i) {
      if (after.b.at(i, j) != before.b.at(i, j)) {
        throw ContractError("extract_delta: b column " + std::to_string(j) +
                            " changed outside the sketch index set");
      }
    }
    for (size_t i = 0; i < n; ++i) {
      if (after.a.at(j, i) != before.a.at(j, i)) {
        throw ContractError("extract_delta: a row " + std::to_string(j) +
                            " changed outside the sketch index set");
      }
    }
  }

  SparseDelta d;
  d.r = r;
  d.m = static_cast<uint32_t>(m);
  d.n = static_cast<uint32_t>(n);
  d.indices = s.indices();
  d.b_cols.resize(d.indices.size() * m);
  d.a_rows.resize(d.indices.size() * n);
  for (size_t slot = 0; slot < d.indices.size(); ++slot) {
    const uint32_t j = d.indices[slot];
    for (size_t i = 0; i < m; ++i) d.b_col(slot)[i] = after.b.at(i, j) - before.b.at(i, j);
    for (size_t i = 0; i < n; ++i) d.a_row(slot)[i] = after.a.at(j, i) - before.a.at(j, i);
  }
  return d;
}

DenseDelta densify(const SparseDelta& d) {
  DenseDelta out;
  out.db = Matrix(d.m, d.r);
  out.da = Matrix(d.r, d.n);
  for (size_t slot = 0; slot < d.indices.size(); ++slot) {
    const uint32_t j = d.indices[slot];
    for (size_t i = 0; i < d.m; ++i) out.db.at(i, j) = d.b_col(slot)[i];
    for (size_t i = 0; i < d.n; ++i) out.da.at(j, i) = d.a_row(slot)[i];
  }
  return out;
}

}  // namespace fslora
