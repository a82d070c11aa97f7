#include "fslora/secure_agg.hpp"

#include <algorithm>
#include <string>

#include "fslora/errors.hpp"

namespace fslora {

namespace {

std::vector<uint32_t> intersect_sorted(const std::vector<uint32_t>& a,
                                       const std::vector<uint32_t>& b) {
  std::vector<uint32_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

// slot of `value` in a sorted index list, or SIZE_MAX.
size_t slot_of(const std::vector<uint32_t>& indices, uint32_t value) {
  auto it = std::lower_bound(indices.begin(), indices.end(), value);
  if (it == indices.end() || *it != value) return SIZE_MAX;
  return static_cast<size_t>(it - indices.begin());
}

}  // namespace

MaskSet derive_masks(const std::vector<int>& ids, const std::vector<Sketch>& sketches, uint32_t m,
                     uint32_t n, double mask_stddev, uint64_t pair_seed_base, long round) {
  if (ids.size() != sketches.size()) {
    throw ShapeError("derive_masks: ids and sketches differ in length");
  }
  MaskSet out;
  const size_t count = ids.size();

  // Pair masks, (i, j) ordered by the ids list (assumed ascending by caller).
  for (size_t ti = 0; ti < count; ++ti) {
    for (size_t tj = ti + 1; tj < count; ++tj) {
      PairMask pm;
      pm.i = ids[ti];
      pm.j = ids[tj];
      pm.m = m;
      pm.n = n;
      pm.indices = intersect_sorted(sketches[ti].indices(), sketches[tj].indices());
      pm.b_cols.assign(pm.indices.size() * m, 0.0);
      pm.a_rows.assign(pm.indices.size() * n, 0.0);
      // Both ends of the pair can rebuild this stream from the shared seed.
      RngStream rng = RngStream(pair_seed_base)
                          .derive("pairmask")
                          .derive(static_cast<uint64_t>(pm.i))
                          .derive(static_cast<uint64_t>(pm.j))
                          .derive(static_cast<uint64_t>(round));
      for (double& v : pm.b_cols) v = mask_stddev * rng.next_gaussian();
      for (double& v : pm.a_rows) v = mask_stddev * rng.next_gaussian();
      out.pairs.push_back(std::move(pm));
    }
  }

  // Fold into per-client masks: R_i = sum_{j>i} M_ij - sum_{j<i} M_ji.
  for (size_t t = 0; t < count; ++t) {
    ClientMask cm;
    cm.client_id = ids[t];
    cm.shift.client_id = ids[t];
    cm.shift.round = round;
    cm.shift.r = sketches[t].r();
    cm.shift.m = m;
    cm.shift.n = n;
    cm.shift.indices = sketches[t].indices();
    cm.shift.b_cols.assign(cm.shift.indices.size() * m, 0.0);
    cm.shift.a_rows.assign(cm.shift.indices.size() * n, 0.0);
    out.per_client.push_back(std::move(cm));
  }
  for (const PairMask& pm : out.pairs) {
    const size_t ti = static_cast<size_t>(
        std::find(ids.begin(), ids.end(), pm.i) - ids.begin());
    const size_t tj = static_cast<size_t>(
        std::find(ids.begin(), ids.end(), pm.j) - ids.begin());
    SparseDelta& ri = out.per_client[ti].shift;
    SparseDelta& rj = out.per_client[tj].shift;
    for (size_t slot = 0; slot < pm.indices.size(); ++slot) {
      const uint32_t idx = pm.indices[slot];
      const size_t si = slot_of(ri.indices, idx);
      const size_t sj = slot_of(rj.indices, idx);
      // Intersection support means both slots exist.
      for (uint32_t x = 0; x < m; ++x) {
        ri.b_col(si)[x] += pm.b_cols[slot * m + x];
        rj.b_col(sj)[x] -= pm.b_cols[slot * m + x];
      }
      for (uint32_t x = 0; x < n; ++x) {
        ri.a_row(si)[x] += pm.a_rows[slot * n + x];
        rj.a_row(sj)[x] -= pm.a_rows[slot * n + x];
      }
    }
  }
  return out;
}

SparseDelta mask_delta(const SparseDelta& delta, const ClientMask& mask) {
  const SparseDelta& s = mask.shift;
  if (s.m != delta.m || s.n != delta.n || s.r != delta.r) {
    throw ShapeError("mask_delta: mask shape does not match delta");
  }
  SparseDelta out = delta;
  for (size_t mslot = 0; mslot < s.indices.size(); ++mslot) {
    const size_t dslot = slot_of(delta.indices, s.indices[mslot]);
    if (dslot == SIZE_MAX) {
      throw ContractError("mask_delta: mask touches index " + std::to_string(s.indices[mslot]) +
                          " outside the delta's index set");
    }
    for (uint32_t x = 0; x < s.m; ++x) out.b_col(dslot)[x] += s.b_col(mslot)[x];
    for (uint32_t x = 0; x < s.n; ++x) out.a_row(dslot)[x] += s.a_row(mslot)[x];
  }
  return out;
}

DenseDelta secure_aggregate(const std::vector<SparseDelta>& masked,
                            const std::vector<int>& expected_ids, uint32_t r) {
  for (int id : expected_ids) {
    bool found = false;
    for (const SparseDelta& d : masked) {
      if (d.client_id == id) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw ContractError("secure_aggregate: participant " + std::to_string(id) +
                          " missing; pair masks cannot cancel");
    }
  }
  if (masked.empty()) throw ContractError("secure_aggregate: no uploads");
  DenseDelta sum;
  sum.db = Matrix(masked.front().m, r);
  sum.da = Matrix(r, masked.front().n);
  // Ascending client id, matching the plain aggregation order.
  std::vector<const SparseDelta*> order;
  for (const SparseDelta& d : masked) order.push_back(&d);
  std::sort(order.begin(), order.end(),
            [](const SparseDelta* x, const SparseDelta* y) { return x->client_id < y->client_id; });
  for (const SparseDelta* d : order) {
    for (size_t slot = 0; slot < d->indices.size(); ++slot) {
      const uint32_t j = d->indices[slot];
      for (uint32_t i = 0; i < d->m; ++i) sum.db.at(i, j) += d->b_col(slot)[i];
      for (uint32_t i = 0; i < d->n; ++i) sum.da.at(j, i) += d->a_row(slot)[i];
    }
  }
  return sum;
}

}  // namespace fslora
