#include "fslora/costs.hpp"

#include <algorithm>
#include <cmath>

#include "fslora/errors.hpp"

namespace fslora {

const char* method_name(Method m) {
  switch (m) {
    case Method::FedLoRA:
      return "fedlora";
    case Method::HeteroLoRA:
      return "heterolora";
    case Method::FlexLoRA:
      return "flexlora";
    case Method::FLoRA:
      return "flora";
    case Method::FSLoRA:
      return "fslora";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "fedlora") return Method::FedLoRA;
  if (name == "heterolora") return Method::HeteroLoRA;
  if (name == "flexlora") return Method::FlexLoRA;
  if (name == "flora") return Method::FLoRA;
  if (name == "fslora") return Method::FSLoRA;
  throw ConfigError("unknown method '" + name +
                    "' (expected fslora|fedlora|heterolora|flexlora|flora)");
}

void CostParams::validate() const {
  if (m == 0 || n == 0 || r == 0) throw ConfigError("costs: m, n, r must be positive");
  if (k.empty()) throw ConfigError("costs: need at least one client rank");
  for (uint32_t ki : k) {
    if (ki == 0 || ki > r) {
      throw ConfigError("costs: client rank " + std::to_string(ki) + " outside [1, " +
                        std::to_string(r) + "]");
    }
  }
  if (bytes_per_param == 0) throw ConfigError("costs: bytes_per_param must be positive");
}

namespace {

void check_client(const CostParams& p, size_t client) {
  if (client >= p.clients()) {
    throw RangeError("costs: client " + std::to_string(client) + " out of range (have " +
                     std::to_string(p.clients()) + ")");
  }
}

uint64_t payload_scalars(const CostParams& p, size_t client) {
  return static_cast<uint64_t>(p.k[client]) * (p.m + p.n);
}

}  // namespace

uint64_t uplink_bytes(const CostParams& p, Method method, size_t client, double topk_ratio) {
  p.validate();
  check_client(p, client);
  if (topk_ratio <= 0.0 || topk_ratio > 1.0) {
    throw RangeError("uplink_bytes: top-k ratio must lie in (0, 1]");
  }
  if (method == Method::FedLoRA) return p.adapter_pair_bytes();
  // (k_i/r) * q collapses to an integer: bytes_per_param * k_i * (m + n).
  const uint64_t payload = payload_scalars(p, client);
  const uint64_t full = p.bytes_per_param * payload;
  if (method != Method::FSLoRA || topk_ratio == 1.0) return full;
  const uint64_t kept =
      static_cast<uint64_t>(std::ceil(topk_ratio * static_cast<double>(payload)));
  return p.bytes_per_param * kept + (payload + 7) / 8;
}

uint64_t downlink_bytes(const CostParams& p, Method method, const std::vector<int>& participants) {
  p.validate();
  switch (method) {
    case Method::FedLoRA:
    case Method::HeteroLoRA:
    case Method::FlexLoRA:
      return p.adapter_pair_bytes();
    case Method::FLoRA: {
      // Broadcast of the stacked concatenation: sum of (k_i/r) * q.
      uint64_t total = 0;
      for (int id : participants) {
        check_client(p, static_cast<size_t>(id));
        total += p.bytes_per_param * payload_scalars(p, static_cast<size_t>(id));
      }
      return total;
    }
    case Method::FSLoRA: {
      // One pair broadcast plus a ceil(r/8)-byte index bitmap per participant.
      const uint64_t bitmap = (p.r + 7) / 8;
      return p.adapter_pair_bytes() + participants.size() * bitmap;
    }
  }
  throw ConfigError("downlink_bytes: unknown method");
}

ClientCost client_costs(const CostParams& p, Method method, size_t client) {
  p.validate();
  check_client(p, client);
  const uint64_t q = p.adapter_pair_bytes();
  const uint64_t base = p.base_bytes();
  const uint64_t frac_q = p.bytes_per_param * payload_scalars(p, client);
  ClientCost out;
  switch (method) {
    case Method::FedLoRA:
      out.memory_bytes = base + q;
      out.flops = static_cast<uint64_t>(p.local_steps) * p.r * (p.m + p.n);
      return out;
    case Method::HeteroLoRA:
    case Method::FlexLoRA:
    case Method::FSLoRA:
      out.memory_bytes = base + frac_q;
      out.flops = static_cast<uint64_t>(p.local_steps) * p.k[client] * (p.m + p.n);
      return out;
    case Method::FLoRA: {
      uint64_t stacked = 0;
      uint64_t sum_k = 0;
      for (uint32_t ki : p.k) {
        stacked += p.bytes_per_param * static_cast<uint64_t>(ki) * (p.m + p.n);
        sum_k += ki;
      }
      out.memory_bytes = base + std::max(stacked, base);
      out.flops = static_cast<uint64_t>(p.local_steps) * p.k[client] * (p.m + p.n) +
                  sum_k * p.m * p.n + p.m * p.n;
      return out;
    }
  }
  throw ConfigError("client_costs: unknown method");
}

// ============================================================================
// Wire encodings
// ============================================================================

namespace {

void push_f32(std::vector<uint8_t>& out, double v) {
  const float f = static_cast<float>(v);
  uint8_t b[sizeof(float)];
  static_assert(sizeof(float) == 4);
  __builtin_memcpy(b, &f, sizeof(f));
  out.insert(out.end(), b, b + sizeof(f));
}

}  // namespace

std::vector<uint32_t> topk_payload_indices(const SparseDelta& d, double ratio) {
  if (ratio <= 0.0 || ratio > 1.0) {
    throw RangeError("topk_payload_indices: ratio must lie in (0, 1]");
  }
  const uint64_t b_span = d.indices.size() * d.m;
  const uint64_t payload = b_span + d.indices.size() * d.n;
  const auto kept_count =
      static_cast<uint64_t>(std::ceil(ratio * static_cast<double>(payload)));
  std::vector<uint32_t> order(payload);
  for (uint32_t i = 0; i < payload; ++i) order[i] = i;
  auto mag = [&](uint32_t flat) {
    return std::fabs(flat < b_span ? d.b_cols[flat] : d.a_rows[flat - b_span]);
  };
  // Descending magnitude; equal magnitudes keep the lower flat index first.
  std::stable_sort(order.begin(), order.end(),
                   [&](uint32_t x, uint32_t y) { return mag(x) > mag(y); });
  order.resize(kept_count);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<uint8_t> encode_delta_wire(const SparseDelta& d, bool compressed, double topk_ratio) {
  const uint64_t payload = d.indices.size() * (static_cast<uint64_t>(d.m) + d.n);
  std::vector<uint8_t> out;
  if (!compressed) {
    out.reserve(payload * 4);
    for (size_t slot = 0; slot < d.indices.size(); ++slot) {
      for (size_t i = 0; i < d.m; ++i) push_f32(out, d.b_col(slot)[i]);
    }
    for (size_t slot = 0; slot < d.indices.size(); ++slot) {
      for (size_t i = 0; i < d.n; ++i) push_f32(out, d.a_row(slot)[i]);
    }
    return out;
  }
  std::vector<uint32_t> kept = topk_payload_indices(d, topk_ratio);
  std::vector<uint8_t> bitmap((payload + 7) / 8, 0);
  for (uint32_t flat : kept) bitmap[flat / 8] |= static_cast<uint8_t>(1u << (flat % 8));
  out = bitmap;
  const uint64_t b_span = d.indices.size() * d.m;
  for (uint32_t flat : kept) {
    const double v = flat < b_span ? d.b_cols[flat] : d.a_rows[flat - b_span];
    push_f32(out, v);
  }
  return out;
}

std::vector<uint8_t> encode_adapter_wire(const AdapterPair& ad) {
  std::vector<uint8_t> out;
  out.reserve((ad.b.size() + ad.a.size()) * 4);
  for (size_t i = 0; i < ad.b.size(); ++i) push_f32(out, ad.b.data()[i]);
  for (size_t i = 0; i < ad.a.size(); ++i) push_f32(out, ad.a.data()[i]);
  return out;
}

}  // namespace fslora
