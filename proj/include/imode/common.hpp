#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace imode {

// Error taxonomy shared across modules. Exit-code mapping lives in the CLI:
// usage -> 1, data -> 2, numerics -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DepthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64: tiny, statelessly seedable, good enough for init + sampling.
// Keeping the generator hand-rolled pins the bit stream across platforms,
// which std::mt19937 + distributions would not.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }
};

inline uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive an independent stream for (seed, a, b, c). Used so that e.g. the
// window sampler of (epoch e, instance i) is a pure function of the run seed,
// which makes checkpoint resume bit-exact without serializing RNG state.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return mix64(seed ^ mix64((a + 0x632be59bd9b4e019ULL) ^ mix64(b ^ mix64(c + 0x9e3779b97f4a7c15ULL))));
}

// FNV-1a over bytes, used for config provenance hashes in output headers.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace imode
