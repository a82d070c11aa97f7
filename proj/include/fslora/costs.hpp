#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fslora/lora.hpp"

namespace fslora {

enum class Method { FedLoRA, HeteroLoRA, FlexLoRA, FLoRA, FSLoRA };

const char* method_name(Method m);
Method parse_method(const std::string& name);  // throws ConfigError

// Wire accounting shapes. Parameters travel as float32 (4 bytes) regardless
// of the double-precision arithmetic inside the simulator. q and P are
// derived quantities, never stored.
struct CostParams {
  size_t m = 0;
  size_t n = 0;
  size_t r = 0;
  std::vector<uint32_t> k;  // per-client active rank
  size_t local_steps = 1;   // H
  size_t bytes_per_param = 4;

  size_t clients() const { return k.size(); }
  // One rank-r adapter pair on the wire.
  uint64_t adapter_pair_bytes() const { return bytes_per_param * r * (m + n); }
  // The full base matrix on the wire.
  uint64_t base_bytes() const { return bytes_per_param * m * n; }
  void validate() const;  // throws ConfigError
};

// Per-round upload size for client i. The k_i/r fraction of the pair is
// integer-exact: (k_i/r) * q == bytes_per_param * k_i * (m + n). With top-k
// compression (FSLoRA uploads only), the value payload shrinks to
// ceil(ratio * payload) entries and an index bitmap of ceil(payload/8) bytes
// rides along, where payload = k_i * (m + n) scalars.
uint64_t uplink_bytes(const CostParams& p, Method method, size_t client, double topk_ratio = 1.0);

// Per-round broadcast size for the given participant set. One shared
// broadcast of the rank-r pair (FLoRA: the stacked concatenation instead)
// plus, for FSLoRA, one sketch-index bitmap of ceil(r/8) bytes per
// participant.
uint64_t downlink_bytes(const CostParams& p, Method method,
                        const std::vector<int>& participants);

struct ClientCost {
  uint64_t memory_bytes = 0;
  uint64_t flops = 0;  // order-constant unit-ops per round, not cycles
};
ClientCost client_costs(const CostParams& p, Method method, size_t client);

// ============================================================================
// Wire encodings. The byte buffers realize the formulas above, so tests and
// the cost reconciliation can measure real payload sizes instead of trusting
// the closed forms.
// ============================================================================

// Flat payload positions (b columns first, then a rows) of the
// ceil(ratio * payload) largest-magnitude entries, sorted ascending. Ties
// break toward the lower flat index. Shared by topk_compress and the wire
// encoder so the compressed bytes always describe the compressed delta.
std::vector<uint32_t> topk_payload_indices(const SparseDelta& d, double ratio);

// Values as float32 in payload order (b columns then a rows, ascending index).
// When compressed, a kept-entry bitmap over the payload precedes the kept
// values. The kept count must equal ceil(ratio * payload) with the
// lower-flat-index tie-break (topk_compress guarantees it).
std::vector<uint8_t> encode_delta_wire(const SparseDelta& d, bool compressed, double topk_ratio);

// Adapter pair broadcast: float32 values of b then a.
std::vector<uint8_t> encode_adapter_wire(const AdapterPair& ad);

}  // namespace fslora
