#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace epsilon {

// splitmix64; used to derive independent RNG streams from coordinates.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

// Unbiased draw in [0, n) via rejection. std::uniform_int_distribution is
// implementation-defined, which would break byte-reproducible outputs.
inline uint64_t rng_below(std::mt19937_64& rng, uint64_t n) {
  if (n == 0) return 0;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v = rng();
  while (v >= limit) v = rng();
  return v % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double rng_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Shortest exact decimal form of a double (round-trips through strtod).
std::string format_double(double v);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t size);

}  // namespace epsilon
