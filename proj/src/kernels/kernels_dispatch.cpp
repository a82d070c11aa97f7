#include <cstdlib>
#include <string>

#include "fslora/errors.hpp"
#include "fslora/kernels.hpp"

namespace fslora::kern {

// Defined in the per-ISA translation units; null when unavailable.
const Ops* avx2_table();
const Ops* neon_table();

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Ops* resolve(Kind kind) {
  switch (kind) {
    case Kind::Scalar:
      return &scalar();
    case Kind::Avx2:
      return (avx2_table() && cpu_has_avx2()) ? avx2_table() : nullptr;
    case Kind::Neon:
      return neon_table();
    case Kind::Auto:
      if (const Ops* t = avx2_table(); t && cpu_has_avx2()) return t;
      if (const Ops* t = neon_table()) return t;
      return &scalar();
  }
  return nullptr;
}

const Ops* initial_table() {
  if (const char* env = std::getenv("FSLORA_KERNELS")) {
    // A bad env value must not crash library initialization; fall back to auto.
    try {
      if (const Ops* t = resolve(parse_kind(env))) return t;
    } catch (const ConfigError&) {
    }
  }
  return resolve(Kind::Auto);
}

const Ops*& active_ptr() {
  static const Ops* table = initial_table();
  return table;
}

}  // namespace

const Ops& active() { return *active_ptr(); }

const char* active_name() { return active().name; }

void select(Kind kind) {
  const Ops* t = resolve(kind);
  if (!t) throw ConfigError("kernel variant not supported on this CPU");
  active_ptr() = t;
}

Kind parse_kind(const std::string& name) {
  if (name == "auto") return Kind::Auto;
  if (name == "scalar") return Kind::Scalar;
  if (name == "avx2") return Kind::Avx2;
  if (name == "neon") return Kind::Neon;
  throw ConfigError("unknown kernel variant '" + name + "' (expected auto|scalar|avx2|neon)");
}

const Ops* avx2() { return cpu_has_avx2() ? avx2_table() : nullptr; }
const Ops* neon() { return neon_table(); }

}  // namespace fslora::kern
