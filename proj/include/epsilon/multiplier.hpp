#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace epsilon {

enum class MultKind { Exact, Truncated, Table };

/// Behavioral model of an 8x8-bit signed multiplier. Every kind materializes
/// the full 65,536-entry product table at construction, so a multiplication
/// is always a single lookup regardless of kind. Immutable after
/// construction; safe to share across concurrent readers.
struct MultiplierModel {
  std::string id;
  MultKind kind = MultKind::Exact;
  int masked_bits = 0;         // Truncated only: LSBs zeroed on each operand
  double energy_per_op = 1.0;  // picojoules per multiplication
  std::vector<int16_t> table;  // a from -128..127 outer, b inner

  int16_t product(int8_t a, int8_t b) const {
    return table[(static_cast<int>(a) + 128) * 256 + (static_cast<int>(b) + 128)];
  }
};

struct ErrorProfile {
  double mean_abs_error = 0.0;  // average |approx - exact| over all pairs
  double max_abs_error = 0.0;
  double error_rate = 0.0;  // fraction of pairs with nonzero error
};

inline int16_t multiply(int8_t a, int8_t b, const MultiplierModel& m) {
  return m.product(a, b);
}

/// Zeroes the k least significant bits of the two's-complement representation.
inline int8_t truncate_operand(int8_t v, int k) {
  const auto u = static_cast<uint8_t>(v);
  return static_cast<int8_t>(static_cast<uint8_t>(u & static_cast<uint8_t>(0xFFu << k)));
}

MultiplierModel make_exact(double energy_per_op = 1.0);
MultiplierModel make_truncated(int masked_bits, double energy_per_op = 0.0);

/// Suggested relative energy for the truncation family. Configuration
/// defaults only; callers may override energy_per_op freely.
double default_truncated_energy(int masked_bits);

/// Binary LUT file: 16-byte header (magic "AXM8", u32 LE version = 1,
/// u32 LE entry count = 65536, 4 reserved zero bytes) followed by 65,536
/// signed 16-bit LE products, operand a outer from -128..127, b inner.
MultiplierModel load_table(const std::string& path, double energy_per_op = 1.0);
void save_table(const MultiplierModel& m, const std::string& path);

/// Exhaustive characterization against the true signed product.
ErrorProfile error_profile(const MultiplierModel& m);

/// Parses a multiplier id: "exact", "truncN" (N in 0..7) or "lut:<path>".
MultiplierModel parse_multiplier(const std::string& spec);

}  // namespace epsilon
