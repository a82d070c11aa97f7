#include "fslora/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <numeric>

#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"
#include "fslora/svd.hpp"

namespace fslora {

// ============================================================================
// HeteroLoRA ops
// ============================================================================

AdapterPair heterolora_truncate(const AdapterPair& global, uint32_t k) {
  const size_t r = global.rank();
  if (k < 1 || k > r) {
    throw RangeError("heterolora_truncate: k " + std::to_string(k) + " outside [1, " +
                     std::to_string(r) + "]");
  }
  const size_t m = global.b.rows();
  const size_t n = global.a.cols();
  AdapterPair out;
  out.b = Matrix(m, k);
  out.a = Matrix(k, n);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < k; ++j) out.b.at(i, j) = global.b.at(i, j);
  }
  for (size_t j = 0; j < k; ++j) {
    std::memcpy(out.a.row(j), global.a.row(j), n * sizeof(double));
  }
  return out;
}

AdapterPair heterolora_aggregate(size_t rank, const std::vector<AdapterPair>& locals) {
  if (locals.empty()) throw ContractError("heterolora_aggregate: no locals");
  const size_t m = locals.front().b.rows();
  const size_t n = locals.front().a.cols();
  AdapterPair acc;
  acc.b = Matrix(m, rank);
  acc.a = Matrix(rank, n);
  for (const AdapterPair& loc : locals) {
    const size_t k = loc.rank();
    if (k > rank) {
      throw RangeError("heterolora_aggregate: local rank " + std::to_string(k) +
                       " exceeds global rank " + std::to_string(rank));
    }
    if (loc.b.rows() != m || loc.a.cols() != n) {
      throw ShapeError("heterolora_aggregate: local pair shape mismatch");
    }
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < k; ++j) acc.b.at(i, j) += loc.b.at(i, j);
    }
    for (size_t j = 0; j < k; ++j) {
      kern::active().axpy(1.0, loc.a.row(j), acc.a.row(j), n);
    }
  }
  const double inv = 1.0 / static_cast<double>(locals.size());
  acc.b = scale(inv, acc.b);
  acc.a = scale(inv, acc.a);
  return acc;
}

// ============================================================================
// FlexLoRA ops
// ============================================================================

FlexloraResult flexlora_aggregate(const std::vector<AdapterPair>& locals,
                                  const std::vector<uint32_t>& ranks) {
  if (locals.empty()) throw ContractError("flexlora_aggregate: no locals");
  // ranks may be empty to ask for the averaged product alone.
  if (!ranks.empty() && ranks.size() != locals.size()) {
    throw ShapeError("flexlora_aggregate: ranks list does not match locals");
  }
  const size_t m = locals.front().b.rows();
  const size_t n = locals.front().a.cols();
  Matrix acc(m, n);
  for (const AdapterPair& loc : locals) {
    if (loc.b.rows() != m || loc.a.cols() != n) {
      throw ShapeError("flexlora_aggregate: product shape mismatch");
    }
    add_scaled_inplace(acc, 1.0, matmul(loc.b, loc.a));
  }
  FlexloraResult out;
  out.product = scale(1.0 / static_cast<double>(locals.size()), acc);
  out.pairs.reserve(ranks.size());
  for (uint32_t k : ranks) {
    SvdResult svd = truncated_svd(out.product, k);
    AdapterPair p;
    p.b = Matrix(m, k);
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < k; ++j) p.b.at(i, j) = svd.u.at(i, j) * svd.s[j];
    }
    p.a = transpose(svd.v);
    out.pairs.push_back(std::move(p));
  }
  return out;
}

// ============================================================================
// FLoRA ops
// ============================================================================

Matrix flora_merge(const Matrix& base, const std::vector<AdapterPair>& locals) {
  if (locals.empty()) throw ContractError("flora_merge: no locals");
  const size_t m = base.rows();
  const size_t n = base.cols();
  size_t total_k = 0;
  for (const AdapterPair& loc : locals) {
    if (loc.b.rows() != m || loc.a.cols() != n) {
      throw ShapeError("flora_merge: local pair does not match the base shape");
    }
    total_k += loc.rank();
  }
  Matrix cb(m, total_k);
  Matrix ca(total_k, n);
  size_t offset = 0;
  for (const AdapterPair& loc : locals) {
    const size_t k = loc.rank();
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < k; ++j) cb.at(i, offset + j) = loc.b.at(i, j);
    }
    for (size_t j = 0; j < k; ++j) {
      std::memcpy(ca.row(offset + j), loc.a.row(j), n * sizeof(double));
    }
    offset += k;
  }
  Matrix merged = base;
  add_scaled_inplace(merged, 1.0 / static_cast<double>(locals.size()), matmul(cb, ca));
  return merged;
}

std::vector<AdapterPair> flora_reinit(const std::vector<uint32_t>& ranks, size_t m, size_t n,
                                      RngStream& rng) {
  std::vector<AdapterPair> fresh;
  fresh.reserve(ranks.size());
  for (size_t slot = 0; slot < ranks.size(); ++slot) {
    RngStream slot_rng = rng.derive(static_cast<uint64_t>(slot));
    fresh.push_back(init_adapters(m, n, ranks[slot], slot_rng));
  }
  return fresh;
}

FloraRoundResult flora_round(const Matrix& base, const std::vector<AdapterPair>& locals,
                             const std::vector<uint32_t>& ranks, RngStream& reinit_rng) {
  FloraRoundResult out;
  out.merged_base = flora_merge(base, locals);
  out.fresh = flora_reinit(ranks, base.rows(), base.cols(), reinit_rng);
  return out;
}

// ============================================================================
// Top-k compression
// ============================================================================

SparseDelta topk_compress(const SparseDelta& d, double ratio) {
  if (ratio <= 0.0 || ratio > 1.0) {
    throw RangeError("topk_compress: ratio must lie in (0, 1]");
  }
  if (ratio == 1.0) return d;
  const std::vector<uint32_t> kept = topk_payload_indices(d, ratio);
  SparseDelta out = d;
  std::fill(out.b_cols.begin(), out.b_cols.end(), 0.0);
  std::fill(out.a_rows.begin(), out.a_rows.end(), 0.0);
  const size_t b_len = d.b_cols.size();
  for (uint32_t f : kept) {
    if (f < b_len) {
      out.b_cols[f] = d.b_cols[f];
    } else {
      out.a_rows[f - b_len] = d.a_rows[f - b_len];
    }
  }
  return out;
}

// ============================================================================
// Shared runner plumbing
// ============================================================================

namespace {

// Mirrors plan_round's participant arithmetic so the same seed yields the
// same participant sets in every method.
std::vector<int> pick_participants(size_t n, int participation, RngStream& r_rng) {
  if (participation == 0) throw RangeError("pick_participants: participation must be nonzero");
  const size_t take = participation < 0 ? n : static_cast<size_t>(participation);
  if (take > n) throw RangeError("pick_participants: participation exceeds client count");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (take < n) {
    RngStream part_rng = r_rng.derive("participants");
    part_rng.shuffle(order);
  }
  order.resize(take);
  std::sort(order.begin(), order.end());
  return order;
}

uint32_t draw_k(const ClientConfig& cfg, long round, RngStream& r_rng) {
  RngStream ks = r_rng.derive("ksched").derive(static_cast<uint64_t>(cfg.id));
  return cfg.k_schedule.k_at(round, ks);
}

struct PlainOutcome {
  AdapterPair pair;
  double train_loss = 0.0;
};

// H plain LoRA steps: w = base + scale * b * a, gradients g * a^T and
// b^T * g. Deliberately sketch-free; this is the oracle arithmetic.
PlainOutcome plain_local_steps(const Matrix& base, const AdapterPair& start, const Dataset& data,
                               const ClientConfig& cfg, long round, RngStream& batch_rng,
                               double adapter_scale) {
  PlainOutcome out;
  out.pair = start;
  const size_t shard_size = cfg.shard.indexes.size();
  std::vector<uint32_t> batch(static_cast<size_t>(cfg.batch_size));
  double loss_sum = 0.0;
  for (int h = 0; h < cfg.local_steps; ++h) {
    for (auto& slot : batch) {
      slot = cfg.shard.indexes[batch_rng.next_below(shard_size)];
    }
    try {
      Matrix low = matmul(out.pair.b, out.pair.a);
      Matrix w;
      if (adapter_scale == 1.0) {
        w = add(base, low);
      } else {
        w = base;
        add_scaled_inplace(w, adapter_scale, low);
      }
      LossGrad lg = loss_and_weight_grad(w, data, batch);
      loss_sum += lg.loss;
      AdapterGrads grads;
      grads.gb = matmul(lg.g, transpose(out.pair.a));
      grads.ga = matmul(transpose(out.pair.b), lg.g);
      if (adapter_scale != 1.0) {
        grads.gb = scale(adapter_scale, grads.gb);
        grads.ga = scale(adapter_scale, grads.ga);
      }
      out.pair = sgd_step(out.pair, grads, cfg.learning_rate);
    } catch (const NumericalError& e) {
      throw NumericalError("client " + std::to_string(cfg.id) + " round " +
                           std::to_string(round) + " step " + std::to_string(h) + ": " + e.what());
    }
  }
  out.train_loss = loss_sum / static_cast<double>(cfg.local_steps);
  return out;
}

CostParams round_costs(const ExperimentSetup& setup, const std::vector<int>& parts,
                       const std::vector<uint32_t>& ks) {
  CostParams cost;
  cost.m = setup.train.spec.m;
  cost.n = setup.train.spec.n;
  cost.r = setup.rank;
  cost.local_steps = static_cast<size_t>(setup.clients.front().local_steps);
  cost.k.assign(setup.clients.size(), 1);
  for (size_t slot = 0; slot < parts.size(); ++slot) {
    cost.k[static_cast<size_t>(parts[slot])] = ks[slot];
  }
  return cost;
}

EvalPoint weight_space_eval(const Matrix& w, const Dataset& eval) {
  LossGrad lg = loss_and_weight_grad(w, eval);
  EvalPoint out;
  out.loss = lg.loss;
  out.grad_norm = frobenius_norm(lg.g);
  return out;
}

struct RoundTimer {
  std::chrono::steady_clock::time_point tick = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tick)
        .count();
  }
};

void push_row(RunResult& result, const std::function<void(const RoundMetrics&)>& on_round,
              RoundMetrics row) {
  result.rounds.push_back(row);
  if (on_round) on_round(row);
}

// ============================================================================
// FedLoRA: the full-rank oracle. Aggregation is start + mean(deltas), summed
// in ascending client-id order, the exact arithmetic of the sketched
// engine's aggregate(), so the k == r trajectories agree bit for bit.
// ============================================================================

RunResult run_fedlora(const ExperimentSetup& setup,
                      const std::function<void(const RoundMetrics&)>& on_round) {
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const size_t r = setup.rank;
  RngStream root = experiment_root(setup.master_seed);
  RngStream init_rng = init_stream(root);
  const Matrix& w0 = setup.train.w0;
  AdapterPair pair = init_adapters(m, n, r, init_rng);

  RunResult result;
  for (long t = 0; t < setup.rounds; ++t) {
    RoundTimer timer;
    RngStream r_rng = round_stream(root, t);
    std::vector<int> parts = pick_participants(setup.clients.size(), setup.participation, r_rng);
    std::vector<uint32_t> ks(parts.size(), static_cast<uint32_t>(r));

    Matrix acc_b(m, r);
    Matrix acc_a(r, n);
    double train_loss = 0.0;
    uint64_t uplink = 0;
    for (int id : parts) {
      const ClientConfig& cfg = setup.clients[static_cast<size_t>(id)];
      RngStream b_rng = batch_stream(root, id, t);
      PlainOutcome local = plain_local_steps(w0, pair, setup.train, cfg, t, b_rng,
                                             setup.adapter_scale);
      train_loss += local.train_loss;
      AdapterPair delta;
      delta.b = sub(local.pair.b, pair.b);
      delta.a = sub(local.pair.a, pair.a);
      uplink += encode_adapter_wire(delta).size();
      add_scaled_inplace(acc_b, 1.0, delta.b);
      add_scaled_inplace(acc_a, 1.0, delta.a);
    }
    train_loss /= static_cast<double>(parts.size());
    const double inv =
        1.0 / static_cast<double>(setup.denominator == Denominator::Participants
                                      ? parts.size()
                                      : setup.clients.size());
    add_scaled_inplace(pair.b, inv, acc_b);
    add_scaled_inplace(pair.a, inv, acc_a);

    EvalPoint ev = evaluate(FrozenBase{w0}, pair, setup.eval, setup.adapter_scale);
    RoundMetrics row;
    row.round = t;
    row.train_loss = train_loss;
    row.eval_loss = ev.loss;
    row.grad_norm = ev.grad_norm;
    row.uplink_bytes = uplink;
    row.downlink_bytes = downlink_bytes(round_costs(setup, parts, ks), Method::FedLoRA, parts);
    row.wall_ms = timer.ms();
    push_row(result, on_round, row);
  }
  result.final_state = GlobalState{FrozenBase{w0}, std::move(pair), setup.rounds};
  return result;
}

// ============================================================================
// HeteroLoRA runner
// ============================================================================

RunResult run_heterolora(const ExperimentSetup& setup,
                         const std::function<void(const RoundMetrics&)>& on_round) {
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const size_t r = setup.rank;
  RngStream root = experiment_root(setup.master_seed);
  RngStream init_rng = init_stream(root);
  const Matrix& w0 = setup.train.w0;
  AdapterPair pair = init_adapters(m, n, r, init_rng);

  RunResult result;
  for (long t = 0; t < setup.rounds; ++t) {
    RoundTimer timer;
    RngStream r_rng = round_stream(root, t);
    std::vector<int> parts = pick_participants(setup.clients.size(), setup.participation, r_rng);

    std::vector<uint32_t> ks;
    std::vector<AdapterPair> locals;
    double train_loss = 0.0;
    uint64_t uplink = 0;
    for (int id : parts) {
      const ClientConfig& cfg = setup.clients[static_cast<size_t>(id)];
      const uint32_t k = draw_k(cfg, t, r_rng);
      ks.push_back(k);
      RngStream b_rng = batch_stream(root, id, t);
      PlainOutcome local = plain_local_steps(w0, heterolora_truncate(pair, k), setup.train, cfg,
                                             t, b_rng, setup.adapter_scale);
      train_loss += local.train_loss;
      uplink += encode_adapter_wire(local.pair).size();
      locals.push_back(std::move(local.pair));
    }
    train_loss /= static_cast<double>(parts.size());
    pair = heterolora_aggregate(r, locals);

    EvalPoint ev = evaluate(FrozenBase{w0}, pair, setup.eval, setup.adapter_scale);
    RoundMetrics row;
    row.round = t;
    row.train_loss = train_loss;
    row.eval_loss = ev.loss;
    row.grad_norm = ev.grad_norm;
    row.uplink_bytes = uplink;
    row.downlink_bytes = downlink_bytes(round_costs(setup, parts, ks), Method::HeteroLoRA, parts);
    row.wall_ms = timer.ms();
    push_row(result, on_round, row);
  }
  result.final_state = GlobalState{FrozenBase{w0}, std::move(pair), setup.rounds};
  return result;
}

// ============================================================================
// FlexLoRA runner
// ============================================================================

RunResult run_flexlora(const ExperimentSetup& setup,
                       const std::function<void(const RoundMetrics&)>& on_round) {
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const size_t r = setup.rank;
  RngStream root = experiment_root(setup.master_seed);
  const Matrix& w0 = setup.train.w0;

  std::vector<AdapterPair> prev_locals;  // trained pairs from the previous round
  Matrix product(m, n);

  RunResult result;
  for (long t = 0; t < setup.rounds; ++t) {
    RoundTimer timer;
    RngStream r_rng = round_stream(root, t);
    std::vector<int> parts = pick_participants(setup.clients.size(), setup.participation, r_rng);

    std::vector<uint32_t> ks;
    ks.reserve(parts.size());
    for (int id : parts) ks.push_back(draw_k(setup.clients[static_cast<size_t>(id)], t, r_rng));

    std::vector<AdapterPair> handed;
    if (t == 0) {
      RngStream flex_init = init_stream(root).derive("flexlora-client");
      for (size_t slot = 0; slot < parts.size(); ++slot) {
        RngStream c_rng = flex_init.derive(static_cast<uint64_t>(parts[slot]));
        handed.push_back(init_adapters(m, n, ks[slot], c_rng));
      }
    } else {
      handed = flexlora_aggregate(prev_locals, ks).pairs;
    }

    std::vector<AdapterPair> locals;
    double train_loss = 0.0;
    uint64_t uplink = 0;
    for (size_t slot = 0; slot < parts.size(); ++slot) {
      const ClientConfig& cfg = setup.clients[static_cast<size_t>(parts[slot])];
      RngStream b_rng = batch_stream(root, parts[slot], t);
      PlainOutcome local = plain_local_steps(w0, handed[slot], setup.train, cfg, t, b_rng,
                                             setup.adapter_scale);
      train_loss += local.train_loss;
      uplink += encode_adapter_wire(local.pair).size();
      locals.push_back(std::move(local.pair));
    }
    train_loss /= static_cast<double>(parts.size());
    product = flexlora_aggregate(locals, {}).product;
    prev_locals = std::move(locals);

    Matrix w = w0;
    add_scaled_inplace(w, setup.adapter_scale, product);
    EvalPoint ev = weight_space_eval(w, setup.eval);
    RoundMetrics row;
    row.round = t;
    row.train_loss = train_loss;
    row.eval_loss = ev.loss;
    row.grad_norm = setup.adapter_scale * ev.grad_norm;
    row.uplink_bytes = uplink;
    row.downlink_bytes = downlink_bytes(round_costs(setup, parts, ks), Method::FlexLoRA, parts);
    row.wall_ms = timer.ms();
    push_row(result, on_round, row);
  }

  // Server view of the final product as a rank-r pair (padded when r exceeds
  // the matrix shape).
  const size_t svd_rank = std::min(r, std::min(m, n));
  SvdResult svd = truncated_svd(product, svd_rank);
  AdapterPair final_pair;
  final_pair.b = Matrix(m, r);
  final_pair.a = Matrix(r, n);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < svd_rank; ++j) final_pair.b.at(i, j) = svd.u.at(i, j) * svd.s[j];
  }
  Matrix vt = transpose(svd.v);
  for (size_t j = 0; j < svd_rank; ++j) {
    std::memcpy(final_pair.a.row(j), vt.row(j), n * sizeof(double));
  }
  result.final_state = GlobalState{FrozenBase{w0}, std::move(final_pair), setup.rounds};
  return result;
}

// ============================================================================
// FLoRA runner
// ============================================================================

RunResult run_flora(const ExperimentSetup& setup,
                    const std::function<void(const RoundMetrics&)>& on_round) {
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const size_t r = setup.rank;
  RngStream root = experiment_root(setup.master_seed);
  Matrix base = setup.train.w0;

  RunResult result;
  for (long t = 0; t < setup.rounds; ++t) {
    RoundTimer timer;
    RngStream r_rng = round_stream(root, t);
    std::vector<int> parts = pick_participants(setup.clients.size(), setup.participation, r_rng);

    std::vector<uint32_t> ks;
    ks.reserve(parts.size());
    for (int id : parts) ks.push_back(draw_k(setup.clients[static_cast<size_t>(id)], t, r_rng));

    RngStream reinit_rng = root.derive("flora-reinit").derive(static_cast<uint64_t>(t));
    std::vector<AdapterPair> fresh = flora_reinit(ks, m, n, reinit_rng);

    std::vector<AdapterPair> locals;
    double train_loss = 0.0;
    uint64_t uplink = 0;
    for (size_t slot = 0; slot < parts.size(); ++slot) {
      const ClientConfig& cfg = setup.clients[static_cast<size_t>(parts[slot])];
      RngStream b_rng = batch_stream(root, parts[slot], t);
      PlainOutcome local = plain_local_steps(base, fresh[slot], setup.train, cfg, t, b_rng,
                                             setup.adapter_scale);
      train_loss += local.train_loss;
      uplink += encode_adapter_wire(local.pair).size();
      locals.push_back(std::move(local.pair));
    }
    train_loss /= static_cast<double>(parts.size());
    if (setup.adapter_scale == 1.0) {
      base = flora_merge(base, locals);
    } else {
      // Fold scale * mean(product) into the base so the effective function
      // is preserved under the scaled forward map.
      Matrix merged = flora_merge(Matrix(m, n), locals);
      add_scaled_inplace(base, setup.adapter_scale, merged);
    }

    EvalPoint ev = weight_space_eval(base, setup.eval);
    RoundMetrics row;
    row.round = t;
    row.train_loss = train_loss;
    row.eval_loss = ev.loss;
    row.grad_norm = ev.grad_norm;
    row.uplink_bytes = uplink;
    row.downlink_bytes = downlink_bytes(round_costs(setup, parts, ks), Method::FLoRA, parts);
    row.wall_ms = timer.ms();
    push_row(result, on_round, row);
  }

  GlobalState final_state;
  final_state.base = FrozenBase{base};
  final_state.adapters.b = Matrix(m, r);
  final_state.adapters.a = Matrix(r, n);
  final_state.round = setup.rounds;
  result.final_state = std::move(final_state);
  result.merged_base = std::move(base);
  return result;
}

}  // namespace

// ============================================================================
// Dispatch
// ============================================================================

RunResult run_baseline(const ExperimentSetup& setup,
                       const std::function<void(const RoundMetrics&)>& on_round) {
  if (setup.method == Method::FSLoRA) return run_experiment(setup, on_round);
  setup.validate();
  if (setup.topk_ratio < 1.0) {
    throw ConfigError("top-k compression is an fslora upload feature");
  }
  if (setup.secure) {
    throw ConfigError("secure aggregation is wired for fslora deltas only");
  }
  if (setup.selector != SketchSelector::Uniform) {
    throw ConfigError("sketch selectors only apply to fslora");
  }
  switch (setup.method) {
    case Method::FedLoRA:
      return run_fedlora(setup, on_round);
    case Method::HeteroLoRA:
      return run_heterolora(setup, on_round);
    case Method::FlexLoRA:
      return run_flexlora(setup, on_round);
    case Method::FLoRA:
      return run_flora(setup, on_round);
    case Method::FSLoRA:
      break;
  }
  throw ConfigError("run_baseline: unknown method");
}

}  // namespace fslora
