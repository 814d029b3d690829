#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "epsilon/signature.hpp"
#include "epsilon/util.hpp"
#include "helpers.hpp"

using namespace epsilon;

namespace {

// Independent brute-force recomputation: naive two-pass mean/std, full sort
// with the interpolation formula spelled out, direct bin counting.
LayerSignature brute_force_signature(const std::vector<int8_t>& w, int bins) {
  LayerSignature sig;
  sig.bins = bins;
  double sum = 0.0;
  for (int8_t v : w) sum += v;
  sig.mu = sum / static_cast<double>(w.size());
  double ss = 0.0;
  for (int8_t v : w) ss += (v - sig.mu) * (v - sig.mu);
  sig.sigma = std::sqrt(ss / static_cast<double>(w.size()));
  std::vector<int8_t> sorted = w;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&sorted](double p) {
    const double h = p * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(h);
    const size_t hi = lo + 1 < sorted.size() ? lo + 1 : lo;
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  sig.q25 = quantile(0.25);
  sig.q50 = quantile(0.50);
  sig.q75 = quantile(0.75);
  std::vector<size_t> counts(static_cast<size_t>(bins) + 1, 0);
  for (int8_t v : w) {
    if (v == 0) {
      ++counts[0];
    } else {
      ++counts[1 + static_cast<size_t>((static_cast<int>(v) + 128) * bins / 256)];
    }
  }
  for (size_t c : counts) sig.rho.push_back(static_cast<double>(c) / static_cast<double>(w.size()));
  return sig;
}

}  // namespace

TEST_CASE("signature of a degenerate all-zero layer") {
  const std::vector<int8_t> w = {0, 0, 0, 0};
  const LayerSignature sig = compute_signature(w, 8);
  CHECK(sig.mu == 0.0);
  CHECK(sig.sigma == 0.0);
  CHECK(sig.q25 == 0.0);
  CHECK(sig.q50 == 0.0);
  CHECK(sig.q75 == 0.0);
  CHECK(sig.rho[0] == 1.0);
  for (size_t i = 1; i < sig.rho.size(); ++i) CHECK(sig.rho[i] == 0.0);
}

TEST_CASE("signature hand example: [-4,-2,0,2,4]") {
  const std::vector<int8_t> w = {-4, -2, 0, 2, 4};
  const LayerSignature sig = compute_signature(w, 4);
  CHECK(sig.mu == 0.0);
  CHECK(sig.sigma == doctest::Approx(std::sqrt(8.0)).epsilon(1e-15));
  CHECK(sig.q25 == -2.0);
  CHECK(sig.q50 == 0.0);
  CHECK(sig.q75 == 2.0);
  REQUIRE(sig.rho.size() == 5);
  CHECK(sig.rho[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(sig.rho[1] == 0.0);
  CHECK(sig.rho[2] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(sig.rho[3] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(sig.rho[4] == 0.0);
  CHECK_THROWS(compute_signature(std::vector<int8_t>{}, 4));
}

TEST_CASE("signatures match the brute-force oracle on random layers") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 1 + rng_below(rng, 400);
    const int bins = trial % 2 == 0 ? 16 : 8;
    std::vector<int8_t> w(n);
    for (auto& v : w) v = static_cast<int8_t>(static_cast<int>(rng_below(rng, 256)) - 128);
    const LayerSignature got = compute_signature(w, bins);
    const LayerSignature want = brute_force_signature(w, bins);
    REQUIRE(std::abs(got.mu - want.mu) <= 1e-9);
    REQUIRE(std::abs(got.sigma - want.sigma) <= 1e-9);
    REQUIRE(got.q25 == want.q25);
    REQUIRE(got.q50 == want.q50);
    REQUIRE(got.q75 == want.q75);
    REQUIRE(got.rho == want.rho);
    REQUIRE(got.q25 <= got.q50);
    REQUIRE(got.q50 <= got.q75);
    double total = 0.0;
    for (double r : got.rho) {
      REQUIRE(r >= 0.0);
      REQUIRE(r <= 1.0);
      total += r;
    }
    REQUIRE(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("importance factors follow the positional schedule") {
  const EpsilonConfig cfg;
  const ModelGraph m = make_random_quant_mlp({8, 7, 6, 5}, 3, 11);
  const auto weighted = m.weighted_layers();
  REQUIRE(weighted.size() == 4);
  const ImportanceFactors first = compute_importance(m, weighted.front(), cfg);
  CHECK(first.beta_p == doctest::Approx(1.0));
  const ImportanceFactors last = compute_importance(m, weighted.back(), cfg);
  CHECK(last.beta_p == doctest::Approx(0.2));
  CHECK(first.alpha == doctest::Approx(first.beta_p * first.gamma_s));
  CHECK_THROWS(compute_importance(m, 1, cfg));  // relu position

  SUBCASE("single weighted layer gets beta 1.0 and conv full type weight") {
    const ModelGraph toy = epsilon::testing::make_toy_conv_model();
    const ImportanceFactors f = compute_importance(toy, 0, cfg);
    CHECK(f.beta_p == 1.0);
    // conv with zero fraction 0.2: gamma_s = 1.0 * clamp(0.8) = 0.8.
    CHECK(f.gamma_s == doctest::Approx(0.8));
    CHECK(f.alpha == doctest::Approx(0.8));
  }
  SUBCASE("dense layer with no zeros reaches gamma_s = type weight") {
    ModelGraph dense_model = make_random_quant_mlp({4, 4}, 2, 1);
    auto w = std::vector<int8_t>(get_layer_weights(dense_model, 0).size(), 7);
    update_layer(dense_model, 0, w);
    const ImportanceFactors f =
        compute_importance(dense_model, dense_model.weighted_layers()[0], cfg);
    CHECK(f.gamma_s == doctest::Approx(cfg.type_weights.dense));
  }
}

TEST_CASE("detection threshold is (m + alpha) * sigma") {
  LayerSignature sig;
  sig.sigma = std::sqrt(8.0);
  CHECK(detection_threshold(sig, 0.0, 3.0) == doctest::Approx(8.4853).epsilon(1e-4));
  CHECK(detection_threshold(sig, 0.7, 3.0) == doctest::Approx(10.4651).epsilon(1e-4));
  CHECK(detection_threshold(sig, 0.7, 3.0) == 3.7 * sig.sigma);
  sig.sigma = 0.0;
  CHECK(detection_threshold(sig, 0.9, 3.0) == 0.0);
  CHECK_THROWS(detection_threshold(sig, 0.5, 0.0));

  SUBCASE("inverse direction behind the config flag") {
    EpsilonConfig cfg;
    cfg.inverse_threshold = true;
    sig.sigma = 2.0;
    CHECK(detection_threshold(sig, 0.5, cfg) == doctest::Approx((3.0 - 0.5) * 2.0));
  }
}

TEST_CASE("pattern deviation is the kappa-scaled L1 histogram distance") {
  const std::vector<int8_t> ref_w = {-4, -2, 0, 2, 4};
  const LayerSignature ref = compute_signature(ref_w, 4);
  CHECK(pattern_deviation(ref_w, ref, 4, 1.0) == 0.0);
  // One weight moves from [0,64) to [64,128): 2 -> 100.
  const std::vector<int8_t> moved = {-4, -2, 0, 100, 4};
  CHECK(pattern_deviation(moved, ref, 4, 1.0) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(pattern_deviation(moved, ref, 4, 2.0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS(pattern_deviation(moved, ref, 8, 1.0));
}

TEST_CASE("nearest valid value selection") {
  LayerSignature sig;
  sig.q25 = -2.0;
  sig.q50 = 0.0;
  sig.q75 = 2.0;
  const auto snap = NearestValidMode::SnapQuartile;
  const auto tie = TieBreak::SmallerMagnitude;
  CHECK(find_nearest_valid(0, sig, snap, tie) == 0);
  CHECK(find_nearest_valid(-100, sig, snap, tie) == -2);
  CHECK(find_nearest_valid(1, sig, snap, tie) == 0);  // tie between 0 and 2
  CHECK(find_nearest_valid(-1, sig, snap, tie) == 0);
  CHECK(find_nearest_valid(3, sig, snap, tie) == 2);

  SUBCASE("magnitude ties fall to the lower value") {
    LayerSignature sym;
    sym.q25 = -2.0;
    sym.q50 = 5.0;
    sym.q75 = 2.0;  // contrived: w=0 is equidistant from -2 and 2
    CHECK(find_nearest_valid(0, sym, snap, tie) == -2);
    CHECK(find_nearest_valid(0, sym, snap, TieBreak::LowerValue) == -2);
  }
  SUBCASE("clamp-iqr clamps into the whisker range") {
    // IQR = 4: range [-8, 8].
    CHECK(find_nearest_valid(-100, sig, NearestValidMode::ClampIqr, tie) == -8);
    CHECK(find_nearest_valid(100, sig, NearestValidMode::ClampIqr, tie) == 8);
    CHECK(find_nearest_valid(5, sig, NearestValidMode::ClampIqr, tie) == 5);
  }
  SUBCASE("fractional quartiles round half away from zero") {
    LayerSignature frac;
    frac.q25 = -2.5;
    frac.q50 = 0.0;
    frac.q75 = 2.5;
    CHECK(find_nearest_valid(-100, frac, snap, tie) == -3);
  }
}

TEST_CASE("mitigation corrects only weights beyond the threshold") {
  const std::vector<int8_t> ref_w = {-4, -2, 0, 2, 4};
  const LayerSignature sig = compute_signature(ref_w, 4);
  const EpsilonConfig cfg;

  SUBCASE("all within threshold: nothing changes") {
    std::vector<int8_t> w = ref_w;
    CHECK(mitigate_layer(w, sig, 10.47, cfg) == 0);
    CHECK(w == ref_w);
  }
  SUBCASE("a sign-flipped weight snaps to q25") {
    std::vector<int8_t> w = {-4, -2, 0, 2, -124};  // 4 with SA1 at bit 7
    CHECK(mitigate_layer(w, sig, 10.47, cfg) == 1);
    CHECK(w == std::vector<int8_t>{-4, -2, 0, 2, -2});
  }
  SUBCASE("threshold zero with w == mu stays untouched (strict inequality)") {
    std::vector<int8_t> w = {0, 0, 0};
    LayerSignature zero_sig;
    zero_sig.mu = 0.0;
    CHECK(mitigate_layer(w, zero_sig, 0.0, cfg) == 0);
    CHECK(w == std::vector<int8_t>{0, 0, 0});
  }
}

TEST_CASE("missed detection bound") {
  CHECK(missed_detection_bound(0.0, 0.5) == 1.0);
  CHECK(missed_detection_bound(0.7, 0.5) == doctest::Approx(std::exp(-0.49)).epsilon(1e-12));
  CHECK(missed_detection_bound(0.7, 0.5) == doctest::Approx(0.61263).epsilon(1e-5));
  CHECK_THROWS(missed_detection_bound(0.5, 0.0));
  CHECK_THROWS(missed_detection_bound(0.5, 1.5));
  CHECK_THROWS(missed_detection_bound(-0.1, 0.5));

  SUBCASE("monotone: decreasing in alpha, increasing in p") {
    double prev = 2.0;
    for (double alpha : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const double b = missed_detection_bound(alpha, 0.5);
      CHECK(b < prev);
      prev = b;
    }
    prev = -1.0;
    for (double p : {0.05, 0.1, 0.3, 0.5, 1.0}) {
      const double b = missed_detection_bound(1.0, p);
      CHECK(b > prev);
      prev = b;
    }
  }
}

TEST_CASE("error bound") {
  CHECK(error_bound(0.999999, 4, 0.0, 0.5) == 1.0);  // capped
  const double direct = std::pow(0.3, 4) + std::exp(-0.49);
  CHECK(error_bound(0.7, 4, 0.7, 0.5) == doctest::Approx(direct).epsilon(1e-12));
  CHECK(error_bound(0.7, 4, 0.7, 0.5) == doctest::Approx(0.62073).epsilon(1e-5));
  // Large N leaves only the missed-detection term.
  CHECK(error_bound(0.7, 500, 0.7, 0.5) ==
        doctest::Approx(missed_detection_bound(0.7, 0.5)).epsilon(1e-12));
  CHECK_THROWS(error_bound(0.0, 4, 0.5, 0.5));
  CHECK_THROWS(error_bound(1.0, 4, 0.5, 0.5));
  CHECK_THROWS(error_bound(0.5, 0, 0.5, 0.5));
}

TEST_CASE("signature stores round-trip through JSON and stay under 1KB per layer") {
  const ModelGraph m = make_random_quant_mlp({20, 16, 12, 10}, 4, 5);
  const SignatureStore store = build_signature_store(m, 16);
  REQUIRE(store.records.size() == 4);
  const std::string text = store_to_json(store);
  const SignatureStore back = store_from_json(text);
  REQUIRE(back.records.size() == store.records.size());
  for (size_t i = 0; i < store.records.size(); ++i) {
    CHECK(back.records[i].layer == store.records[i].layer);
    CHECK(back.records[i].sig.mu == store.records[i].sig.mu);
    CHECK(back.records[i].sig.sigma == store.records[i].sig.sigma);
    CHECK(back.records[i].sig.q25 == store.records[i].sig.q25);
    CHECK(back.records[i].sig.rho == store.records[i].sig.rho);
  }
  // Per-record serialized size, B = 16.
  SignatureStore single;
  single.records.push_back(store.records[0]);
  CHECK(store_to_json(single).size() < 1024);
  CHECK(store.find(store.records[2].layer) != nullptr);
  CHECK(store.find(999) == nullptr);
}

TEST_CASE("calibrated kappa pushes a single sign-bit flip over the threshold") {
  const ModelGraph m = make_random_quant_mlp({12, 10, 8, 6}, 3, 21);
  const EpsilonConfig cfg;
  const SignatureStore store = build_signature_store(m, cfg.bins);
  const double kappa = calibrate_kappa(m, store, cfg);
  for (const SignatureRecord& r : store.records) {
    const auto w = get_layer_weights(m, r.layer);
    // Flip the sign bit of the first weight that has it clear.
    std::vector<int8_t> flipped(w.begin(), w.end());
    size_t target = flipped.size();
    for (size_t i = 0; i < flipped.size(); ++i) {
      if ((static_cast<uint8_t>(flipped[i]) & 0x80u) == 0) {
        target = i;
        break;
      }
    }
    REQUIRE(target < flipped.size());
    flipped[target] = force_bit(flipped[target], 7, Polarity::SA1);
    const double score = pattern_deviation(flipped, r.sig, r.sig.bins, kappa);
    const double alpha = compute_importance(m, r.layer, cfg).alpha;
    CHECK(score > detection_threshold(r.sig, alpha, cfg));
  }
}
