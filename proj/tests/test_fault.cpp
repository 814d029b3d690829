#include <doctest.h>

#include <set>
#include <stdexcept>

#include "epsilon/fault.hpp"
#include "epsilon/model.hpp"
#include "epsilon/util.hpp"

using namespace epsilon;

TEST_CASE("plan size is round(FR/100 * N) with distinct indices") {
  const ModelGraph m = make_random_quant_mlp({10, 5}, 3, 1);  // layer 0 has 50 weights
  const FaultPlan plan = make_layer_plan(m, 0, 10.0, Polarity::SA1, BitDistribution::Uniform, 7,
                                         Persistence::OneShot);
  CHECK(plan.entries.size() == 5);
  std::set<uint32_t> seen;
  for (const FaultEntry& e : plan.entries) {
    CHECK(seen.insert(e.weight_index).second);
    CHECK(e.bit >= 0);
    CHECK(e.bit <= 7);
  }
  CHECK(fault_rate(plan, m) == doctest::Approx(10.0));

  SUBCASE("rounding is half-up") {
    // 3% of 50 = 1.5 -> 2 entries.
    const FaultPlan p2 = make_layer_plan(m, 0, 3.0, Polarity::SA1, BitDistribution::Uniform, 7,
                                         Persistence::OneShot);
    CHECK(p2.entries.size() == 2);
  }
  SUBCASE("full rate hits every weight") {
    const FaultPlan p3 = make_layer_plan(m, 0, 100.0, Polarity::SA0, BitDistribution::Uniform, 7,
                                         Persistence::OneShot);
    CHECK(p3.entries.size() == 50);
    CHECK(fault_rate(p3, m) == doctest::Approx(100.0));
  }
  SUBCASE("invalid rates are rejected") {
    CHECK_THROWS(make_layer_plan(m, 0, 0.0, Polarity::SA1, BitDistribution::Uniform, 7,
                                 Persistence::OneShot));
    CHECK_THROWS(make_layer_plan(m, 0, 100.5, Polarity::SA1, BitDistribution::Uniform, 7,
                                 Persistence::OneShot));
  }
}

TEST_CASE("plans are deterministic per seed") {
  const ModelGraph m = make_random_quant_mlp({10, 8, 6, 5}, 3, 2);
  const FaultPointMap map = make_fault_point_map(m);
  const FaultPlan a = make_plan(m, FaultPoint::FP2, 30.0, Polarity::SA1,
                                BitDistribution::LsbGeometric, 99, Persistence::OneShot);
  const FaultPlan b = make_plan(m, FaultPoint::FP2, 30.0, Polarity::SA1,
                                BitDistribution::LsbGeometric, 99, Persistence::OneShot);
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].weight_index == b.entries[i].weight_index);
    CHECK(a.entries[i].bit == b.entries[i].bit);
  }
  CHECK(a.layer_index == map.layer_for(FaultPoint::FP2));
  const FaultPlan c = make_plan(m, FaultPoint::FP2, 30.0, Polarity::SA1,
                                BitDistribution::LsbGeometric, 100, Persistence::OneShot);
  bool any_diff = c.entries.size() != a.entries.size();
  for (size_t i = 0; !any_diff && i < a.entries.size(); ++i) {
    any_diff = a.entries[i].weight_index != c.entries[i].weight_index;
  }
  CHECK(any_diff);
}

TEST_CASE("lsb-geometric bit draws match the closed-form normalization") {
  // P(bit 0) = 0.5^0 * (1 - 0.5) / (1 - 0.5^8) ~= 0.50196.
  CHECK(lsb_geometric_probability(0) == doctest::Approx(0.50196078).epsilon(1e-6));
  double total = 0.0;
  for (int b = 0; b < 8; ++b) total += lsb_geometric_probability(b);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  const ModelGraph m = make_random_quant_mlp({200, 50}, 3, 3);  // 10,000 weights in layer 0
  const FaultPlan plan = make_layer_plan(m, 0, 100.0, Polarity::SA1,
                                         BitDistribution::LsbGeometric, 5, Persistence::OneShot);
  REQUIRE(plan.entries.size() == 10000);
  size_t bit0 = 0;
  for (const FaultEntry& e : plan.entries) {
    if (e.bit == 0) ++bit0;
  }
  const double p0 = static_cast<double>(bit0) / 10000.0;
  CHECK(p0 > 0.502 - 0.02);
  CHECK(p0 < 0.502 + 0.02);
}

TEST_CASE("sign-bit plans only touch bit 7") {
  const ModelGraph m = make_random_quant_mlp({10, 5}, 3, 4);
  const FaultPlan plan = make_layer_plan(m, 0, 50.0, Polarity::SA1, BitDistribution::SignBit, 5,
                                         Persistence::OneShot);
  for (const FaultEntry& e : plan.entries) CHECK(e.bit == 7);
}

TEST_CASE("stuck-at forcing follows two's-complement bit arithmetic") {
  CHECK(force_bit(4, 7, Polarity::SA1) == -124);  // 0b0000_0100 -> 0b1000_0100
  CHECK(force_bit(4, 2, Polarity::SA0) == 0);
  CHECK(force_bit(0, 3, Polarity::SA0) == 0);
  CHECK(force_bit(-1, 0, Polarity::SA0) == -2);
  CHECK(force_bit(0, 7, Polarity::SA1) == -128);
}

TEST_CASE("applying a plan forces the planned bits and is idempotent") {
  ModelGraph m = make_random_quant_mlp({6, 4}, 2, 9);
  FaultPlan plan;
  plan.layer_index = 0;
  plan.entries = {{0, 7, Polarity::SA1}, {1, 2, Polarity::SA0}, {2, 0, Polarity::SA1}};
  plan.fault_rate_percent = 12.5;
  const std::vector<int8_t> before(get_layer_weights(m, 0).begin(),
                                   get_layer_weights(m, 0).end());
  apply_plan(m, plan);
  const std::vector<int8_t> once(get_layer_weights(m, 0).begin(), get_layer_weights(m, 0).end());
  CHECK(once[0] == force_bit(before[0], 7, Polarity::SA1));
  CHECK(once[1] == force_bit(before[1], 2, Polarity::SA0));
  CHECK(once[2] == force_bit(before[2], 0, Polarity::SA1));
  for (size_t i = 3; i < once.size(); ++i) CHECK(once[i] == before[i]);
  apply_plan(m, plan);
  const std::vector<int8_t> twice(get_layer_weights(m, 0).begin(), get_layer_weights(m, 0).end());
  CHECK(twice == once);

  SUBCASE("out-of-bounds index is rejected") {
    FaultPlan bad = plan;
    bad.entries.push_back({9999, 0, Polarity::SA1});
    CHECK_THROWS_AS(apply_plan(m, bad), std::out_of_range);
  }
}

TEST_CASE("hard-stuck bits re-assert after weight updates, one-shot bits do not") {
  ModelGraph m = make_random_quant_mlp({6, 4}, 2, 10);
  FaultPlan plan;
  plan.layer_index = 0;
  plan.entries = {{3, 7, Polarity::SA1}, {5, 1, Polarity::SA0}};

  SUBCASE("hard-stuck") {
    plan.mode = Persistence::HardStuck;
    apply_plan(m, plan);
    std::vector<int8_t> clean(get_layer_weights(m, 0).size(), 42);
    update_layer(m, 0, clean);
    const auto w = get_layer_weights(m, 0);
    CHECK(w[3] == force_bit(42, 7, Polarity::SA1));
    CHECK(w[5] == force_bit(42, 1, Polarity::SA0));
    CHECK(w[0] == 42);
  }
  SUBCASE("one-shot") {
    plan.mode = Persistence::OneShot;
    apply_plan(m, plan);
    std::vector<int8_t> clean(get_layer_weights(m, 0).size(), 42);
    update_layer(m, 0, clean);
    for (int8_t v : get_layer_weights(m, 0)) CHECK(v == 42);
  }
}

TEST_CASE("fault_rate reads back the plan density") {
  const ModelGraph m = make_random_quant_mlp({10, 5}, 3, 1);
  FaultPlan plan;
  plan.layer_index = 0;
  CHECK(fault_rate(plan, m) == 0.0);
  for (uint32_t i = 0; i < 5; ++i) plan.entries.push_back({i, 0, Polarity::SA1});
  CHECK(fault_rate(plan, m) == doctest::Approx(10.0));
}

TEST_CASE("plans serialize to JSON and back") {
  const ModelGraph m = make_random_quant_mlp({10, 8, 6, 5}, 3, 2);
  const FaultPlan plan = make_plan(m, FaultPoint::FP1, 25.0, Polarity::SA0,
                                   BitDistribution::LsbGeometric, 31, Persistence::HardStuck);
  const FaultPlan back = plan_from_json(plan_to_json(plan));
  CHECK(back.layer_index == plan.layer_index);
  CHECK(back.seed == plan.seed);
  CHECK(back.bits == plan.bits);
  CHECK(back.mode == plan.mode);
  REQUIRE(back.entries.size() == plan.entries.size());
  for (size_t i = 0; i < plan.entries.size(); ++i) {
    CHECK(back.entries[i].weight_index == plan.entries[i].weight_index);
    CHECK(back.entries[i].bit == plan.entries[i].bit);
    CHECK(back.entries[i].polarity == plan.entries[i].polarity);
  }
}
