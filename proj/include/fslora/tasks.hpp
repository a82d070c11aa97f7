#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fslora/matrix.hpp"
#include "fslora/rng.hpp"

namespace fslora {

enum class TaskKind { LeastSquares, MultinomialLogistic };

const char* task_kind_name(TaskKind k);
TaskKind parse_task_kind(const std::string& name);  // throws ConfigError

// Synthetic objective over one m x n weight matrix. The ground truth is a
// low-rank perturbation of the base: W* = W0 + B*·A* with rank(B*·A*) <=
// true_rank, so adapters of rank >= true_rank can represent the optimum.
struct TaskSpec {
  TaskKind kind = TaskKind::LeastSquares;
  size_t m = 8;
  size_t n = 8;
  size_t true_rank = 2;
  size_t sample_count = 128;
  double noise_stddev = 0.0;
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError on bad fields
};

struct Dataset {
  TaskSpec spec;
  Matrix w0;      // m x n, generating base
  Matrix wstar;   // m x n, ground truth W0 + B*·A*
  Matrix inputs;  // sample_count x n, one sample per row
  // Least-squares targets: sample_count x m. Logistic: class labels.
  Matrix targets;
  std::vector<uint32_t> labels;

  size_t size() const { return inputs.rows(); }
};

// Index view into a Dataset owned by one client.
struct Shard {
  int owner = -1;
  std::vector<uint32_t> indexes;
};

// Draws W0, B*, A*, inputs x ~ N(0, I), and targets:
//   least-squares:  y = W*x + noise_stddev * N(0, I)
//   logistic:       label = argmax(W*x + noise_stddev * Gumbel)
// The Gumbel-max form makes noise 0 a deterministic argmax and noise 1 an
// exact softmax draw. Deterministic per (spec, stream).
Dataset generate_task(const TaskSpec& spec, RngStream& rng);

// Fresh samples from an existing task instance (same W0/W*), e.g. a held-out
// evaluation set. Only the sample streams are consumed.
Dataset resample_dataset(const Dataset& d, size_t count, RngStream& rng);

// Mean loss and mean dL/dW over the batch rows named by `batch` (indices into
// the dataset; duplicates allowed -- sampling is with replacement).
//   least-squares: loss = mean 0.5*||Wx - y||^2,  g = mean (Wx - y) x^T
//   logistic:      loss = mean -log softmax(Wx)[label], g = mean (p - onehot) x^T
// Throws RangeError on an empty batch.
struct LossGrad {
  double loss = 0.0;
  Matrix g;  // m x n
};
LossGrad loss_and_weight_grad(const Matrix& w, const Dataset& d,
                              const std::vector<uint32_t>& batch);
// Full-dataset convenience (evaluation).
LossGrad loss_and_weight_grad(const Matrix& w, const Dataset& d);
double loss_only(const Matrix& w, const Dataset& d, const std::vector<uint32_t>& batch);

// Dirichlet(alpha) allocation: least-squares shards are size-proportional
// (one weight vector over clients), logistic shards are class-conditional
// (one weight vector per class). Re-draws until every client holds at least
// one sample. Shards are disjoint and cover the dataset exactly.
// Throws RangeError when n_clients exceeds the sample count, ConfigError on
// alpha <= 0.
std::vector<Shard> dirichlet_partition(const Dataset& d, size_t n_clients, double alpha,
                                       RngStream& rng);

// Flat binary round-trip (little-endian; header carries the spec and shapes).
void export_dataset(const Dataset& d, const std::string& path);
Dataset import_dataset(const std::string& path);

}  // namespace fslora
