#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace trustdd {

// Error taxonomy: every throw carries a message naming the offending
// file/step/shape so callers can fail fast without a debugger.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LoadError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct DegenerateTrajectoryError : Error {
  using Error::Error;
};
struct PartialReportError : Error {
  using Error::Error;
};

// FNV-1a over raw bytes; stable across platforms, used to stamp artifacts
// with the originating config and to spot-check container round-trips.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace trustdd
