#include <doctest.h>
#include <stdexcept>

#include <cstdio>
#include <random>

#include "epsilon/multiplier.hpp"
#include "epsilon/util.hpp"

using namespace epsilon;

TEST_CASE("exact multiplier equals the wide signed product on all pairs") {
  const MultiplierModel m = make_exact();
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      REQUIRE(multiply(static_cast<int8_t>(a), static_cast<int8_t>(b), m) == a * b);
    }
  }
  CHECK(multiply(-3, 5, m) == -15);
}

TEST_CASE("truncated multiplier masks operand LSBs before multiplying") {
  CHECK(multiply(7, 5, make_truncated(2)) == 16);  // operands become 4 and 4
  CHECK(multiply(127, 127, make_truncated(7)) == 0);
  CHECK(multiply(3, 3, make_truncated(1)) == 4);
  // Definition check over every pair for every mask width.
  for (int k = 0; k <= 7; ++k) {
    const MultiplierModel m = make_truncated(k);
    for (int a = -128; a <= 127; ++a) {
      for (int b = -128; b <= 127; ++b) {
        const int expected = static_cast<int>(truncate_operand(static_cast<int8_t>(a), k)) *
                             static_cast<int>(truncate_operand(static_cast<int8_t>(b), k));
        REQUIRE(multiply(static_cast<int8_t>(a), static_cast<int8_t>(b), m) == expected);
      }
    }
  }
  CHECK_THROWS(make_truncated(8));
  CHECK_THROWS(make_truncated(-1));
}

TEST_CASE("error profile is zero for exact and k=0") {
  const ErrorProfile exact = error_profile(make_exact());
  CHECK(exact.mean_abs_error == 0.0);
  CHECK(exact.max_abs_error == 0.0);
  CHECK(exact.error_rate == 0.0);
  const ErrorProfile t0 = error_profile(make_truncated(0));
  CHECK(t0.error_rate == 0.0);
}

TEST_CASE("error profile of truncated(1) matches a brute-force recount") {
  const MultiplierModel m = make_truncated(1);
  long mismatches = 0;
  double sum = 0.0, worst = 0.0;
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      const int approx = multiply(static_cast<int8_t>(a), static_cast<int8_t>(b), m);
      const int err = std::abs(approx - a * b);
      if (err != 0) ++mismatches;
      sum += err;
      worst = std::max(worst, static_cast<double>(err));
    }
  }
  const ErrorProfile p = error_profile(m);
  CHECK(p.error_rate == doctest::Approx(mismatches / 65536.0).epsilon(1e-15));
  CHECK(p.mean_abs_error == doctest::Approx(sum / 65536.0).epsilon(1e-15));
  CHECK(p.max_abs_error == worst);
}

TEST_CASE("error profile of a one-entry deviation table") {
  MultiplierModel m = make_exact();
  m.kind = MultKind::Table;
  m.table[0] += 4;  // (a, b) = (-128, -128)
  const ErrorProfile p = error_profile(m);
  CHECK(p.mean_abs_error == doctest::Approx(4.0 / 65536.0).epsilon(1e-15));
  CHECK(p.max_abs_error == 4.0);
  CHECK(p.error_rate == doctest::Approx(1.0 / 65536.0).epsilon(1e-15));
}

TEST_CASE("table lookups follow the (a+128)*256+(b+128) convention") {
  // Two asymmetric deviations pin down the operand order.
  MultiplierModel m = make_exact();
  m.kind = MultKind::Table;
  m.table[(5 + 128) * 256 + (-3 + 128)] = 1111;
  m.table[(-3 + 128) * 256 + (5 + 128)] = -2222;
  CHECK(multiply(5, -3, m) == 1111);
  CHECK(multiply(-3, 5, m) == -2222);
  CHECK(multiply(5, 3, m) == 15);
  save_table(m, "mult_asym.axm8");
  const MultiplierModel loaded = load_table("mult_asym.axm8");
  CHECK(multiply(5, -3, loaded) == 1111);
  CHECK(multiply(-3, 5, loaded) == -2222);
}

TEST_CASE("LUT files round-trip bit-exactly") {
  const std::string path = "mult_roundtrip.axm8";
  std::mt19937_64 rng(42);
  MultiplierModel m = make_truncated(2);
  // Perturb some entries so the table is not reproducible from its kind.
  for (int i = 0; i < 100; ++i) {
    m.table[rng_below(rng, m.table.size())] = static_cast<int16_t>(rng_below(rng, 65536));
  }
  save_table(m, path);
  const MultiplierModel loaded = load_table(path);
  for (size_t i = 0; i < m.table.size(); ++i) REQUIRE(loaded.table[i] == m.table[i]);
}

TEST_CASE("a saved truncated(2) table agrees with make_truncated(2) on all pairs") {
  const std::string path = "mult_trunc2.axm8";
  save_table(make_truncated(2), path);
  const MultiplierModel loaded = load_table(path);
  const MultiplierModel reference = make_truncated(2);
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      REQUIRE(multiply(static_cast<int8_t>(a), static_cast<int8_t>(b), loaded) ==
              multiply(static_cast<int8_t>(a), static_cast<int8_t>(b), reference));
    }
  }
  const ErrorProfile p = error_profile(load_table(path));
  CHECK(p.error_rate > 0.9);  // trunc2 corrupts most pairs
}

TEST_CASE("LUT loader rejects malformed files") {
  const std::string path = "mult_bad.axm8";
  MultiplierModel m = make_exact();
  save_table(m, path);
  const std::vector<uint8_t> good = read_file_bytes(path);

  SUBCASE("short table") {
    std::vector<uint8_t> bad(good.begin(), good.end() - 2);  // 65,535 entries
    write_file_bytes(path, bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_table(path), doctest::Contains("truncated table"),
                         std::runtime_error);
  }
  SUBCASE("bad magic") {
    std::vector<uint8_t> bad = good;
    bad[0] = 'Z';
    write_file_bytes(path, bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_table(path), doctest::Contains("magic"), std::runtime_error);
  }
  SUBCASE("unsupported version") {
    std::vector<uint8_t> bad = good;
    bad[4] = 9;
    write_file_bytes(path, bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_table(path), doctest::Contains("version"), std::runtime_error);
  }
  SUBCASE("nonzero reserved bytes") {
    std::vector<uint8_t> bad = good;
    bad[13] = 1;
    write_file_bytes(path, bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_table(path), doctest::Contains("reserved"), std::runtime_error);
  }
  SUBCASE("trailing data") {
    std::vector<uint8_t> bad = good;
    bad.push_back(0);
    bad.push_back(0);
    write_file_bytes(path, bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_table(path), doctest::Contains("trailing"), std::runtime_error);
  }
}

TEST_CASE("multiplier id parsing") {
  CHECK(parse_multiplier("exact").kind == MultKind::Exact);
  CHECK(parse_multiplier("trunc3").masked_bits == 3);
  CHECK_THROWS(parse_multiplier("trunc9"));
  CHECK_THROWS(parse_multiplier("kv6"));
}
