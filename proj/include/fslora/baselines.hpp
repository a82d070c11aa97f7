#pragma once

#include <vector>

#include "fslora/federation.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"

namespace fslora {

// Rival adapter-federation schemes. They share the task plumbing, the stream
// conventions, and the RoundMetrics schema with the FSLoRA engine, so runs
// under one master seed are directly comparable. The FedLoRA runner doubles
// as the equivalence oracle for the sketched engine at k == r: it is written
// against plain adapter math (no Sketch anywhere) on purpose.

// ============================================================================
// HeteroLoRA: truncate on the way down, zero-pad and average on the way up.
// ============================================================================

// First k columns of b, first k rows of a.
AdapterPair heterolora_truncate(const AdapterPair& global, uint32_t k);

// Zero-pad each local pair to rank r, then average: locals are summed in
// ascending list order and scaled by 1/locals.size(). Rows/columns beyond a
// client's rank contribute zero, which is the scheme's documented bias.
AdapterPair heterolora_aggregate(size_t rank, const std::vector<AdapterPair>& locals);

// ============================================================================
// FlexLoRA: average the products, redistribute per-client truncated SVDs.
// ============================================================================

struct FlexloraResult {
  Matrix product;                  // M = (1/N) sum of b_i * a_i
  std::vector<AdapterPair> pairs;  // per client: b = u * diag(s), a = v^T at rank k_i
};
FlexloraResult flexlora_aggregate(const std::vector<AdapterPair>& locals,
                                  const std::vector<uint32_t>& ranks);

// ============================================================================
// FLoRA: stack everything, fold the product into the base, start fresh.
// ============================================================================

// base + (1/N) * Concat(b_i) * Concat(a_i); the block structure makes the
// stacked product equal sum(b_i * a_i).
Matrix flora_merge(const Matrix& base, const std::vector<AdapterPair>& locals);

// Fresh pairs: b = 0, a ~ Gaussian(0, 1/k_i), one derived stream per client.
std::vector<AdapterPair> flora_reinit(const std::vector<uint32_t>& ranks, size_t m, size_t n,
                                      RngStream& rng);

struct FloraRoundResult {
  Matrix merged_base;
  std::vector<AdapterPair> fresh;
};
// Merge then reinitialize at the same ranks. Zero-b fresh pairs keep the
// effective weight equal to the merged base.
FloraRoundResult flora_round(const Matrix& base, const std::vector<AdapterPair>& locals,
                             const std::vector<uint32_t>& ranks, RngStream& reinit_rng);

// ============================================================================
// Upload compression
// ============================================================================

// Keep the ceil(ratio * payload) largest-magnitude scalars in the delta
// payload (b columns then a rows, flat order), zero the rest. Ties break
// toward the lower flat index. ratio == 1 returns the delta unchanged.
SparseDelta topk_compress(const SparseDelta& d, double ratio);

// ============================================================================
// Runners
// ============================================================================

// Dispatch on setup.method; Method::FSLoRA forwards to run_experiment. The
// metrics schema is identical across methods. Two caveats born of state
// shape: FlexLoRA and FLoRA report the weight-space gradient norm in the
// grad_norm column (they carry no global rank-r pair), and their
// final_state.adapters reconstruct the product only up to rank r. Top-k
// compression and secure aggregation are FSLoRA-only and rejected here.
RunResult run_baseline(const ExperimentSetup& setup,
                       const std::function<void(const RoundMetrics&)>& on_round = {});

}  // namespace fslora
