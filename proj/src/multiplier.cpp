#include "epsilon/multiplier.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "epsilon/util.hpp"

namespace epsilon {

namespace {

constexpr size_t kTableEntries = 65536;
constexpr char kMagic[4] = {'A', 'X', 'M', '8'};
constexpr uint32_t kFormatVersion = 1;

size_t table_index(int8_t a, int8_t b) {
  return static_cast<size_t>((static_cast<int>(a) + 128) * 256 + (static_cast<int>(b) + 128));
}

std::vector<int16_t> build_table(int masked_bits) {
  std::vector<int16_t> table(kTableEntries);
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      const int ta = truncate_operand(static_cast<int8_t>(a), masked_bits);
      const int tb = truncate_operand(static_cast<int8_t>(b), masked_bits);
      table[table_index(static_cast<int8_t>(a), static_cast<int8_t>(b))] =
          static_cast<int16_t>(ta * tb);
    }
  }
  return table;
}

uint32_t read_u32_le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

}  // namespace

MultiplierModel make_exact(double energy_per_op) {
  if (energy_per_op <= 0) throw std::invalid_argument("make_exact: energy_per_op must be > 0");
  MultiplierModel m;
  m.id = "exact";
  m.kind = MultKind::Exact;
  m.energy_per_op = energy_per_op;
  m.table = build_table(0);
  return m;
}

double default_truncated_energy(int masked_bits) {
  return 1.0 - 0.08 * masked_bits;
}

MultiplierModel make_truncated(int masked_bits, double energy_per_op) {
  if (masked_bits < 0 || masked_bits > 7) {
    throw std::invalid_argument("make_truncated: masked bit count must be in 0..7");
  }
  if (energy_per_op == 0.0) energy_per_op = default_truncated_energy(masked_bits);
  if (energy_per_op <= 0) throw std::invalid_argument("make_truncated: energy_per_op must be > 0");
  MultiplierModel m;
  m.id = "trunc" + std::to_string(masked_bits);
  m.kind = MultKind::Truncated;
  m.masked_bits = masked_bits;
  m.energy_per_op = energy_per_op;
  m.table = build_table(masked_bits);
  return m;
}

MultiplierModel load_table(const std::string& path, double energy_per_op) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 16) {
    throw std::runtime_error("load_table: " + path + ": truncated header (" +
                             std::to_string(bytes.size()) + " bytes, need 16)");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("load_table: " + path + ": bad magic at offset 0");
  }
  const uint32_t version = read_u32_le(bytes.data() + 4);
  if (version != kFormatVersion) {
    throw std::runtime_error("load_table: " + path + ": unsupported version " +
                             std::to_string(version) + " at offset 4");
  }
  const uint32_t count = read_u32_le(bytes.data() + 8);
  if (count != kTableEntries) {
    throw std::runtime_error("load_table: " + path + ": entry count " + std::to_string(count) +
                             " at offset 8, expected 65536");
  }
  for (int i = 12; i < 16; ++i) {
    if (bytes[i] != 0) {
      throw std::runtime_error("load_table: " + path + ": nonzero reserved byte at offset " +
                               std::to_string(i));
    }
  }
  const size_t payload = bytes.size() - 16;
  if (payload < kTableEntries * 2) {
    throw std::runtime_error("load_table: " + path + ": truncated table, payload ends at offset " +
                             std::to_string(bytes.size()) + ", expected " +
                             std::to_string(16 + kTableEntries * 2));
  }
  if (payload > kTableEntries * 2) {
    throw std::runtime_error("load_table: " + path + ": trailing data at offset " +
                             std::to_string(16 + kTableEntries * 2));
  }
  if (energy_per_op <= 0) throw std::invalid_argument("load_table: energy_per_op must be > 0");
  MultiplierModel m;
  m.id = "table:" + path;
  m.kind = MultKind::Table;
  m.energy_per_op = energy_per_op;
  m.table.resize(kTableEntries);
  for (size_t i = 0; i < kTableEntries; ++i) {
    const uint8_t lo = bytes[16 + 2 * i];
    const uint8_t hi = bytes[16 + 2 * i + 1];
    m.table[i] = static_cast<int16_t>(static_cast<uint16_t>(lo) | static_cast<uint16_t>(hi) << 8);
  }
  return m;
}

void save_table(const MultiplierModel& m, const std::string& path) {
  std::vector<uint8_t> bytes(16 + kTableEntries * 2, 0);
  std::memcpy(bytes.data(), kMagic, 4);
  bytes[4] = kFormatVersion;
  bytes[8] = static_cast<uint8_t>(kTableEntries & 0xFF);
  bytes[9] = static_cast<uint8_t>((kTableEntries >> 8) & 0xFF);
  bytes[10] = static_cast<uint8_t>((kTableEntries >> 16) & 0xFF);
  for (size_t i = 0; i < kTableEntries; ++i) {
    const auto v = static_cast<uint16_t>(m.table[i]);
    bytes[16 + 2 * i] = static_cast<uint8_t>(v & 0xFF);
    bytes[16 + 2 * i + 1] = static_cast<uint8_t>(v >> 8);
  }
  write_file_bytes(path, bytes.data(), bytes.size());
}

ErrorProfile error_profile(const MultiplierModel& m) {
  ErrorProfile p;
  double sum_abs = 0.0;
  long mismatches = 0;
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      const int exact = a * b;
      const int approx = m.table[table_index(static_cast<int8_t>(a), static_cast<int8_t>(b))];
      const int err = std::abs(approx - exact);
      sum_abs += err;
      if (err > p.max_abs_error) p.max_abs_error = err;
      if (err != 0) ++mismatches;
    }
  }
  p.mean_abs_error = sum_abs / static_cast<double>(kTableEntries);
  p.error_rate = static_cast<double>(mismatches) / static_cast<double>(kTableEntries);
  return p;
}

MultiplierModel parse_multiplier(const std::string& spec) {
  if (spec == "exact") return make_exact();
  if (spec.rfind("trunc", 0) == 0 && spec.size() == 6 && spec[5] >= '0' && spec[5] <= '7') {
    return make_truncated(spec[5] - '0');
  }
  if (spec.rfind("lut:", 0) == 0) return load_table(spec.substr(4));
  throw std::invalid_argument("parse_multiplier: unknown multiplier id '" + spec +
                              "' (expected exact, trunc0..trunc7 or lut:<path>)");
}

}  // namespace epsilon
