#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ovk {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

enum class ErrorCode {
  InvalidShape,
  ShapeMismatch,
  InvalidConfig,
  NoTape,
  TapeState,
  FormatError,
  IoError,
  Numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

// SplitMix64: the project-wide deterministic generator. Same seed, same
// stream, on every platform.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1), 53 mantissa bits
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + next_unit() * (hi - lo); }
};

// Derives an independent stream; used to give every parameter tensor its own
// seed from one model seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  SplitMix64 g(seed ^ (0x632be59bd9b4e019ULL * (salt + 1)));
  return g.next();
}

}  // namespace ovk
