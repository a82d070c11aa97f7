#include "fslora/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fslora/baselines.hpp"
#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"
#include "fslora/secure_agg.hpp"

namespace fslora {

// ============================================================================
// KSchedule
// ============================================================================

KSchedule KSchedule::parse(const std::string& text) {
  auto parse_list = [](const std::string& body, const char* what) {
    std::vector<uint32_t> vals;
    size_t pos = 0;
    while (pos <= body.size()) {
      size_t comma = body.find(',', pos);
      if (comma == std::string::npos) comma = body.size();
      const std::string tok = body.substr(pos, comma - pos);
      try {
        size_t used = 0;
        long v = std::stol(tok, &used);
        if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
        vals.push_back(static_cast<uint32_t>(v));
      } catch (const std::exception&) {
        throw ConfigError(std::string(what) + ": bad rank value '" + tok + "'");
      }
      pos = comma + 1;
      if (comma == body.size()) break;
    }
    if (vals.empty()) throw ConfigError(std::string(what) + ": empty rank list");
    return vals;
  };

  if (text.rfind("cycle:", 0) == 0) {
    return {Mode::Cycle, parse_list(text.substr(6), "k schedule cycle")};
  }
  if (text.rfind("uniform:", 0) == 0) {
    auto vals = parse_list(text.substr(8), "k schedule uniform");
    if (vals.size() != 2 || vals[0] > vals[1]) {
      throw ConfigError("k schedule uniform: expected 'uniform:lo,hi' with lo <= hi");
    }
    return {Mode::UniformRange, std::move(vals)};
  }
  const std::string body = text.rfind("const:", 0) == 0 ? text.substr(6) : text;
  auto vals = parse_list(body, "k schedule");
  if (vals.size() != 1) throw ConfigError("k schedule: a constant takes one value, got '" + text + "'");
  return {Mode::Constant, std::move(vals)};
}

std::string KSchedule::to_string() const {
  std::string out;
  switch (mode) {
    case Mode::Constant:
      return std::to_string(values[0]);
    case Mode::Cycle:
      out = "cycle:";
      break;
    case Mode::UniformRange:
      out = "uniform:";
      break;
  }
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

uint32_t KSchedule::k_at(long round, RngStream& rng) const {
  switch (mode) {
    case Mode::Constant:
      return values[0];
    case Mode::Cycle:
      return values[static_cast<size_t>(round) % values.size()];
    case Mode::UniformRange:
      return values[0] + static_cast<uint32_t>(rng.next_below(values[1] - values[0] + 1));
  }
  return values[0];
}

uint32_t KSchedule::min_k() const { return *std::min_element(values.begin(), values.end()); }
uint32_t KSchedule::max_k() const { return *std::max_element(values.begin(), values.end()); }

// ============================================================================
// Validation
// ============================================================================

void ClientConfig::validate(size_t rank) const {
  if (k_schedule.values.empty() || k_schedule.min_k() < 1 || k_schedule.max_k() > rank) {
    throw ConfigError("client " + std::to_string(id) + ": scheduled k outside [1, " +
                      std::to_string(rank) + "]");
  }
  if (local_steps < 1) throw ConfigError("client " + std::to_string(id) + ": local_steps must be >= 1");
  if (learning_rate <= 0.0) {
    throw ConfigError("client " + std::to_string(id) + ": learning_rate must be positive");
  }
  if (batch_size < 1) throw ConfigError("client " + std::to_string(id) + ": batch_size must be >= 1");
  if (shard.indexes.empty()) {
    throw ConfigError("client " + std::to_string(id) + ": empty shard");
  }
}

void ExperimentSetup::validate() const {
  if (rank < 1) throw ConfigError("experiment: rank must be >= 1");
  if (rounds < 1) throw ConfigError("experiment: rounds must be >= 1");
  if (clients.empty()) throw ConfigError("experiment: need at least one client");
  if (shards.size() != clients.size()) {
    throw ConfigError("experiment: shard list and client list differ in length");
  }
  for (size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].id != static_cast<int>(i)) {
      throw ConfigError("experiment: client ids must be 0..N-1 in order (client slot " +
                        std::to_string(i) + " has id " + std::to_string(clients[i].id) + ")");
    }
    clients[i].validate(rank);
  }
  if (participation == 0 || participation < -1 ||
      participation > static_cast<int>(clients.size())) {
    throw ConfigError("experiment: participation must be -1 (all) or in [1, N]");
  }
  if (topk_ratio <= 0.0 || topk_ratio > 1.0) {
    throw ConfigError("experiment: topk_ratio must lie in (0, 1]");
  }
  if (mask_stddev < 0.0) throw ConfigError("experiment: mask_stddev must be >= 0");
  if (adapter_scale <= 0.0) throw ConfigError("experiment: adapter_scale must be positive");
  if (train.spec.m != eval.spec.m || train.spec.n != eval.spec.n) {
    throw ConfigError("experiment: train and eval task shapes differ");
  }
  if (eval.size() < 1) throw ConfigError("experiment: empty eval set");
  if (method == Method::FedLoRA) {
    for (const ClientConfig& c : clients) {
      if (!c.k_schedule.is_constant() || c.k_schedule.values[0] != rank) {
        throw ConfigError("experiment: fedlora requires uniform k == rank for every client");
      }
    }
  }
}

// ============================================================================
// Stream plumbing
// ============================================================================

RngStream experiment_root(uint64_t master_seed) { return RngStream(master_seed); }

RngStream init_stream(const RngStream& root) { return root.derive("adapter-init"); }

RngStream round_stream(const RngStream& root, long round) {
  return root.derive("round").derive(static_cast<uint64_t>(round));
}

RngStream batch_stream(const RngStream& root, int client_id, long round) {
  return root.derive("client")
      .derive(static_cast<uint64_t>(client_id))
      .derive("round-batch")
      .derive(static_cast<uint64_t>(round));
}

// ============================================================================
// Round building blocks
// ============================================================================

RoundPlan plan_round(const GlobalState& state, const std::vector<ClientConfig>& clients,
                     int participation, SketchSelector selector, RngStream& rng) {
  const size_t n = clients.size();
  if (participation == 0) throw RangeError("plan_round: participation must be nonzero");
  if (participation > static_cast<int>(n)) {
    throw RangeError("plan_round: participation exceeds client count");
  }
  const size_t take = participation < 0 ? n : static_cast<size_t>(participation);

  RoundPlan plan;
  plan.round = state.round;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (take < n) {
    RngStream part_rng = rng.derive("participants");
    part_rng.shuffle(order);
  }
  order.resize(take);
  std::sort(order.begin(), order.end());
  plan.participants = order;

  const uint32_t r = static_cast<uint32_t>(state.adapters.rank());
  for (int id : plan.participants) {
    const ClientConfig& cfg = clients[static_cast<size_t>(id)];
    RngStream ksched_rng = rng.derive("ksched").derive(static_cast<uint64_t>(id));
    const uint32_t k = cfg.k_schedule.k_at(state.round, ksched_rng);
    RngStream sketch_rng = rng.derive("sketch").derive(static_cast<uint64_t>(id));
    switch (selector) {
      case SketchSelector::Uniform:
        plan.sketches.push_back(sample_random_k(SketchSpec{r, k}, sketch_rng));
        break;
      case SketchSelector::ImportanceNormProduct:
        plan.sketches.push_back(sample_importance(state.adapters.b, state.adapters.a, k,
                                                  ImportanceMetric::NormProduct, sketch_rng));
        break;
      case SketchSelector::ImportanceNormSum:
        plan.sketches.push_back(sample_importance(state.adapters.b, state.adapters.a, k,
                                                  ImportanceMetric::NormSum, sketch_rng));
        break;
    }
  }
  return plan;
}

namespace {

Matrix forward_weight(const FrozenBase& base, const AdapterPair& ad, const Sketch& s,
                      double adapter_scale) {
  if (adapter_scale == 1.0) return effective_weight(base, ad, s);
  Matrix low = matmul(apply_right(ad.b, s), ad.a);
  Matrix w = base.w0;
  add_scaled_inplace(w, adapter_scale, low);
  return w;
}

}  // namespace

LocalOutcome local_round(const GlobalState& snapshot, const Dataset& data,
                         const ClientConfig& cfg, const Sketch& sketch, RngStream& batch_rng,
                         double adapter_scale) {
  if (snapshot.adapters.rank() != sketch.r()) {
    throw ShapeError("local_round: adapter rank " + std::to_string(snapshot.adapters.rank()) +
                     " != sketch rank " + std::to_string(sketch.r()));
  }
  AdapterPair ad = snapshot.adapters;
  const size_t shard_size = cfg.shard.indexes.size();
  std::vector<uint32_t> batch(static_cast<size_t>(cfg.batch_size));
  double loss_sum = 0.0;
  for (int h = 0; h < cfg.local_steps; ++h) {
    for (auto& slot : batch) {
      slot = cfg.shard.indexes[batch_rng.next_below(shard_size)];
    }
    try {
      Matrix w = forward_weight(snapshot.base, ad, sketch, adapter_scale);
      LossGrad lg = loss_and_weight_grad(w, data, batch);
      loss_sum += lg.loss;
      AdapterGrads grads = adapter_grads(lg.g, ad, sketch);
      if (adapter_scale != 1.0) {
        grads.gb = scale(adapter_scale, grads.gb);
        grads.ga = scale(adapter_scale, grads.ga);
      }
      ad = sgd_step(ad, grads, cfg.learning_rate);
    } catch (const NumericalError& e) {
      throw NumericalError("client " + std::to_string(cfg.id) + " round " +
                           std::to_string(snapshot.round) + " step " + std::to_string(h) + ": " +
                           e.what());
    }
  }
  LocalOutcome out;
  out.delta = extract_delta(snapshot.adapters, ad, sketch);
  out.delta.client_id = cfg.id;
  out.delta.round = snapshot.round;
  out.train_loss = loss_sum / static_cast<double>(cfg.local_steps);
  return out;
}

GlobalState aggregate(const GlobalState& state, const std::vector<SparseDelta>& deltas,
                      Denominator denom, size_t total_clients) {
  if (deltas.empty()) throw ContractError("aggregate: no deltas");
  const size_t m = state.adapters.b.rows();
  const size_t n = state.adapters.a.cols();
  const uint32_t r = static_cast<uint32_t>(state.adapters.rank());
  std::vector<const SparseDelta*> order;
  for (const SparseDelta& d : deltas) {
    if (d.round != state.round) {
      throw ContractError("aggregate: delta from round " + std::to_string(d.round) +
                          " mixed into round " + std::to_string(state.round));
    }
    if (d.r != r || d.m != m || d.n != n) {
      throw ContractError("aggregate: delta shape does not match the global adapters");
    }
    order.push_back(&d);
  }
  std::sort(order.begin(), order.end(),
            [](const SparseDelta* x, const SparseDelta* y) { return x->client_id < y->client_id; });

  Matrix acc_b(m, r);
  Matrix acc_a(r, n);
  for (const SparseDelta* d : order) {
    for (size_t slot = 0; slot < d->indices.size(); ++slot) {
      const uint32_t j = d->indices[slot];
      for (size_t i = 0; i < m; ++i) acc_b.at(i, j) += d->b_col(slot)[i];
      for (size_t i = 0; i < n; ++i) acc_a.at(j, i) += d->a_row(slot)[i];
    }
  }
  const double inv =
      1.0 / static_cast<double>(denom == Denominator::Participants ? deltas.size() : total_clients);
  GlobalState next = state;
  add_scaled_inplace(next.adapters.b, inv, acc_b);
  add_scaled_inplace(next.adapters.a, inv, acc_a);
  next.round = state.round + 1;
  return next;
}

EvalPoint evaluate(const FrozenBase& base, const AdapterPair& ad, const Dataset& eval,
                   double adapter_scale) {
  Matrix low = matmul(ad.b, ad.a);
  Matrix w = base.w0;
  add_scaled_inplace(w, adapter_scale, low);
  LossGrad lg = loss_and_weight_grad(w, eval);
  Matrix gb = matmul(lg.g, transpose(ad.a));
  Matrix ga = matmul(transpose(ad.b), lg.g);
  EvalPoint out;
  out.loss = lg.loss;
  const double s2 = adapter_scale * adapter_scale;
  out.grad_norm = std::sqrt(s2 * (frobenius_norm_sq(gb) + frobenius_norm_sq(ga)));
  return out;
}

// ============================================================================
// The FSLoRA experiment loop
// ============================================================================

RunResult run_experiment(const ExperimentSetup& setup,
                         const std::function<void(const RoundMetrics&)>& on_round) {
  setup.validate();
  if (setup.method != Method::FSLoRA) {
    throw ConfigError("run_experiment drives fslora; use run_baseline for " +
                      std::string(method_name(setup.method)));
  }
  const size_t m = setup.train.spec.m;
  const size_t n = setup.train.spec.n;
  const uint32_t r = static_cast<uint32_t>(setup.rank);

  RngStream root = experiment_root(setup.master_seed);
  RngStream init_rng = init_stream(root);
  const uint64_t pair_seed = root.derive("pairmask-seed").next_u64();

  GlobalState state;
  state.base = FrozenBase{setup.train.w0};
  state.adapters = init_adapters(m, n, setup.rank, init_rng);
  state.round = 0;
  const uint64_t base_hash = content_hash(state.base.w0);

  const bool compressed = setup.topk_ratio < 1.0;
  RunResult result;
  for (long t = 0; t < setup.rounds; ++t) {
    const auto tick = std::chrono::steady_clock::now();
    RngStream r_rng = round_stream(root, t);
    RoundPlan plan = plan_round(state, setup.clients, setup.participation, setup.selector, r_rng);

    std::vector<SparseDelta> deltas;
    deltas.reserve(plan.participants.size());
    double train_loss = 0.0;
    uint64_t uplink = 0;
    CostParams cost;
    cost.m = m;
    cost.n = n;
    cost.r = r;
    cost.local_steps = static_cast<size_t>(setup.clients.front().local_steps);
    cost.k.assign(setup.clients.size(), 1);

    for (size_t slot = 0; slot < plan.participants.size(); ++slot) {
      const int id = plan.participants[slot];
      const ClientConfig& cfg = setup.clients[static_cast<size_t>(id)];
      RngStream b_rng = batch_stream(root, id, t);
      LocalOutcome outcome = local_round(state, setup.train, cfg, plan.sketches[slot], b_rng,
                                         setup.adapter_scale);
      train_loss += outcome.train_loss;
      SparseDelta delta =
          compressed ? topk_compress(outcome.delta, setup.topk_ratio) : std::move(outcome.delta);
      uplink += encode_delta_wire(delta, compressed, setup.topk_ratio).size();
      deltas.push_back(std::move(delta));
    }
    train_loss /= static_cast<double>(plan.participants.size());
    for (size_t slot = 0; slot < plan.participants.size(); ++slot) {
      cost.k[static_cast<size_t>(plan.participants[slot])] = plan.sketches[slot].k();
    }
    const uint64_t downlink = downlink_bytes(cost, Method::FSLoRA, plan.participants);

    if (setup.secure) {
      MaskSet masks = derive_masks(plan.participants, plan.sketches, static_cast<uint32_t>(m),
                                   static_cast<uint32_t>(n), setup.mask_stddev, pair_seed, t);
      std::vector<SparseDelta> masked;
      masked.reserve(deltas.size());
      for (size_t slot = 0; slot < deltas.size(); ++slot) {
        masked.push_back(mask_delta(deltas[slot], masks.per_client[slot]));
      }
      DenseDelta sum = secure_aggregate(masked, plan.participants, r);
      const double inv = 1.0 / static_cast<double>(setup.denominator == Denominator::Participants
                                                       ? deltas.size()
                                                       : setup.clients.size());
      add_scaled_inplace(state.adapters.b, inv, sum.db);
      add_scaled_inplace(state.adapters.a, inv, sum.da);
      state.round += 1;
    } else {
      state = aggregate(state, deltas, setup.denominator, setup.clients.size());
    }

    EvalPoint ev = evaluate(state.base, state.adapters, setup.eval, setup.adapter_scale);
    RoundMetrics row;
    row.round = t;
    row.train_loss = train_loss;
    row.eval_loss = ev.loss;
    row.grad_norm = ev.grad_norm;
    row.uplink_bytes = uplink;
    row.downlink_bytes = downlink;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tick)
                      .count();
    result.rounds.push_back(row);
    if (on_round) on_round(row);
  }

  if (content_hash(state.base.w0) != base_hash) {
    throw ContractError("run_experiment: the frozen base was mutated during an fslora run");
  }
  result.final_state = std::move(state);
  return result;
}

}  // namespace fslora
