#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fslora/costs.hpp"
#include "fslora/lora.hpp"
#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"
#include "fslora/sketch.hpp"
#include "fslora/tasks.hpp"

namespace fslora {

// Per-round active rank: constant, a repeating cycle, or a uniform draw from
// [lo, hi] (the draw consumes the round-scoped stream, so it is a pure
// function of (seed, round)).
struct KSchedule {
  enum class Mode { Constant, Cycle, UniformRange };
  Mode mode = Mode::Constant;
  std::vector<uint32_t> values{1};

  static KSchedule constant(uint32_t k) { return {Mode::Constant, {k}}; }
  // "8" | "cycle:2,4,8" | "uniform:2,8"
  static KSchedule parse(const std::string& text);
  std::string to_string() const;

  uint32_t k_at(long round, RngStream& rng) const;
  uint32_t min_k() const;
  uint32_t max_k() const;
  bool is_constant() const { return mode == Mode::Constant; }
};

struct ClientConfig {
  int id = 0;
  KSchedule k_schedule;
  Shard shard;
  int local_steps = 1;        // H
  double learning_rate = 0.0; // gamma
  int batch_size = 1;

  void validate(size_t rank) const;  // throws ConfigError
};

struct GlobalState {
  FrozenBase base;
  AdapterPair adapters;
  long round = 0;
};

struct RoundPlan {
  long round = 0;
  std::vector<int> participants;  // ascending client ids
  std::vector<Sketch> sketches;   // aligned with participants
};

enum class Denominator { Participants, TotalClients };

// How sketch index sets are drawn each round.
enum class SketchSelector { Uniform, ImportanceNormProduct, ImportanceNormSum };

// One CSV row per completed round. wall_ms stays out of the serialized
// artifacts (it would break byte-level replay); the CSV columns are
// round, train_loss, eval_loss, grad_norm, uplink_bytes, downlink_bytes.
struct RoundMetrics {
  long round = 0;
  double train_loss = 0.0;  // sketched minibatch losses, averaged
  double eval_loss = 0.0;   // held-out full batch at W0 + B*A (no sketch)
  double grad_norm = 0.0;   // Frobenius norm of unsketched adapter gradients
  uint64_t uplink_bytes = 0;
  uint64_t downlink_bytes = 0;
  double wall_ms = 0.0;
};

// Everything a run needs, independent of config-file plumbing.
struct ExperimentSetup {
  Method method = Method::FSLoRA;
  Dataset train;
  Dataset eval;
  std::vector<Shard> shards;           // one per client, aligned with clients
  std::vector<ClientConfig> clients;
  size_t rank = 0;                     // global adapter rank r
  uint64_t master_seed = 1;
  long rounds = 1;                     // T
  int participation = -1;              // -1 = all clients every round
  Denominator denominator = Denominator::Participants;
  SketchSelector selector = SketchSelector::Uniform;
  double topk_ratio = 1.0;             // < 1 compresses FSLoRA uploads
  bool secure = false;                 // route deltas through pairwise masks
  double mask_stddev = 1.0;
  double adapter_scale = 1.0;          // classical LoRA alpha/r hook; 1 = none

  size_t n_clients() const { return clients.size(); }
  void validate() const;  // throws ConfigError
};

struct RunResult {
  std::vector<RoundMetrics> rounds;
  GlobalState final_state;
  // FLoRA only: per-client merged bases all equal this matrix.
  std::optional<Matrix> merged_base;
};

// ============================================================================
// Engine building blocks (exposed for tests)
// ============================================================================

// Root stream conventions shared by the FSLoRA engine and every baseline
// runner, so trajectories are comparable under one master seed.
RngStream experiment_root(uint64_t master_seed);
RngStream init_stream(const RngStream& root);
RngStream round_stream(const RngStream& root, long round);
RngStream batch_stream(const RngStream& root, int client_id, long round);

// Uniform participant subset (Fisher-Yates, round-scoped stream) plus one
// fresh sketch per participant at its scheduled k. Importance selectors score
// against the current global adapters.
RoundPlan plan_round(const GlobalState& state, const std::vector<ClientConfig>& clients,
                     int participation, SketchSelector selector, RngStream& rng);

struct LocalOutcome {
  SparseDelta delta;
  double train_loss = 0.0;  // mean pre-step minibatch loss over the H steps
};

// H sketched SGD steps from the round-start snapshot on minibatches drawn
// from the client's shard (uniform with replacement). The sketch is fixed for
// the whole round. adapter_scale multiplies B*S*A in the forward map.
LocalOutcome local_round(const GlobalState& snapshot, const Dataset& data,
                         const ClientConfig& cfg, const Sketch& sketch, RngStream& batch_rng,
                         double adapter_scale = 1.0);

// adapters += (1/denominator) * sum of densified deltas, summed in ascending
// client-id order; round counter advances. Throws ContractError on deltas
// from a different round or mismatched rank.
GlobalState aggregate(const GlobalState& state, const std::vector<SparseDelta>& deltas,
                      Denominator denom, size_t total_clients);

// Full-batch eval-set loss at w0 + b*a and the Frobenius norm of the
// unsketched adapter gradient there.
struct EvalPoint {
  double loss = 0.0;
  double grad_norm = 0.0;
};
EvalPoint evaluate(const FrozenBase& base, const AdapterPair& ad, const Dataset& eval,
                   double adapter_scale = 1.0);

// The FSLoRA round loop: plan, broadcast snapshot, local
// rounds, (optional masking), aggregate, evaluate. on_round fires after each
// completed round so callers can stream metrics; a numerical failure raises
// after the callback has seen every completed round.
RunResult run_experiment(const ExperimentSetup& setup,
                         const std::function<void(const RoundMetrics&)>& on_round = {});

}  // namespace fslora
