#include <doctest.h>
#include <stdexcept>

#include <random>

#include "epsilon/model.hpp"
#include "epsilon/util.hpp"
#include "helpers.hpp"

using namespace epsilon;

namespace {

LayerSpec make_dense(int in_w, int out_w, int8_t fill, const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.name = name;
  l.in_width = in_w;
  l.out_width = out_w;
  l.weights.data.assign(static_cast<size_t>(in_w) * out_w, fill);
  l.weights.shape = {out_w, in_w};
  l.weights.scale = 0.02;
  l.bias.assign(static_cast<size_t>(out_w), 0);
  l.out_scale = 0.05;
  return l;
}

LayerSpec make_relu(const std::string& name) {
  LayerSpec l;
  l.kind = LayerKind::Relu;
  l.name = name;
  return l;
}

// Backbone [4->5, relu, 5->6, relu, 6->2] with heads after layers 0 and 2
// and an empty final head. Op counts: 20, 30, 12 backbone; 10, 12 heads.
ModelGraph make_three_exit_model() {
  ModelGraph m;
  m.name = "ops-fixture";
  m.class_count = 2;
  m.input_shape = {4};
  m.input_scale = 0.01;
  m.backbone.push_back(make_dense(4, 5, 2, "fc1"));
  m.backbone.push_back(make_relu("relu1"));
  m.backbone.push_back(make_dense(5, 6, 1, "fc2"));
  m.backbone.push_back(make_relu("relu2"));
  m.backbone.push_back(make_dense(6, 2, 3, "classifier"));
  ExitHead e1;
  e1.attach_after = 0;
  e1.layers.push_back(make_dense(5, 2, 1, "exit1_fc"));
  m.exits.push_back(e1);
  ExitHead e2;
  e2.attach_after = 2;
  e2.layers.push_back(make_dense(6, 2, -1, "exit2_fc"));
  m.exits.push_back(e2);
  ExitHead e3;
  e3.attach_after = 4;
  m.exits.push_back(e3);
  validate_model(m);
  return m;
}

QuantTensor input4() {
  QuantTensor x;
  x.shape = {4};
  x.scale = 0.01;
  x.data = {10, -20, 30, -40};
  return x;
}

}  // namespace

TEST_CASE("layer weight access and update") {
  ModelGraph m = make_three_exit_model();
  const auto w = get_layer_weights(m, 0);
  CHECK(w.size() == 20);
  CHECK(w[0] == 2);

  SUBCASE("relu layers have no weights") {
    CHECK_THROWS_WITH_AS(get_layer_weights(m, 1), doctest::Contains("has no weights"),
                         std::runtime_error);
    CHECK_THROWS_AS(get_layer_weights(m, 99), std::out_of_range);
  }
  SUBCASE("read-after-write returns the new weights") {
    std::vector<int8_t> w2(20, 9);
    update_layer(m, 0, w2);
    const auto r = get_layer_weights(m, 0);
    for (int8_t v : r) REQUIRE(v == 9);
    update_layer(m, 0, w2);  // idempotent
    for (int8_t v : get_layer_weights(m, 0)) REQUIRE(v == 9);
  }
  SUBCASE("length mismatch is rejected") {
    std::vector<int8_t> bad(7, 1);
    CHECK_THROWS_WITH_AS(update_layer(m, 0, bad), doctest::Contains("does not match"),
                         std::runtime_error);
  }
}

TEST_CASE("single-exit model logits equal a plain sequential forward") {
  ModelGraph m;
  m.class_count = 3;
  m.input_shape = {4};
  m.input_scale = 0.01;
  m.backbone.push_back(make_dense(4, 5, 2, "fc1"));
  m.backbone.push_back(make_relu("relu1"));
  m.backbone.push_back(make_dense(5, 3, -2, "classifier"));
  ExitHead final_exit;
  final_exit.attach_after = 2;
  m.exits.push_back(final_exit);
  validate_model(m);

  const MultiplierModel mult = make_exact();
  const QuantTensor x = input4();
  const ExitResult r = forward_exit(m, x, 1, mult);

  QuantTensor h = layer_forward(x, m.backbone[0], mult);
  h = layer_forward(h, m.backbone[1], mult);
  const AccumTensor logits = layer_forward_accum(h, m.backbone[2], mult);
  REQUIRE(r.logits.data == logits.data);
  CHECK(r.logits.scale == logits.scale);
}

TEST_CASE("exit cascade pays for each backbone prefix exactly once") {
  ModelGraph m = make_three_exit_model();
  const MultiplierModel exact = make_exact();
  InferenceSession session(m, input4(), exact);
  const ExitResult r1 = session.run_exit(1);
  CHECK(r1.ops_new == 20 + 10);  // fc1 + head1
  const ExitResult r2 = session.run_exit(2);
  CHECK(r2.ops_new == 30 + 12);  // fc2 (relu free) + head2
  CHECK(session.total_ops() == 72);
  const ExitResult r3 = session.run_exit(3);
  CHECK(r3.ops_new == 12);  // classifier in accumulator form
  CHECK(session.total_ops() == 84);

  SUBCASE("prefix reuse does not change logits") {
    const ExitResult fresh = forward_exit(m, input4(), 3, make_exact());
    CHECK(fresh.logits.data == r3.logits.data);
    const ExitResult fresh2 = forward_exit(m, input4(), 2, make_exact());
    CHECK(fresh2.logits.data == r2.logits.data);
  }
}

TEST_CASE("uniform-logit head gives confidence 1/class_count") {
  const ModelGraph m = epsilon::testing::make_toy_conv_model();
  const ExitResult r = forward_exit(m, epsilon::testing::unit_input(), 1, make_exact());
  CHECK(r.confidence == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fault point map orders FP4 before FP1") {
  SUBCASE("four weighted layers") {
    const ModelGraph m = make_random_quant_mlp({8, 7, 6, 5}, 3, 11);
    const auto weighted = m.weighted_layers();
    REQUIRE(weighted.size() == 4);
    const FaultPointMap map = make_fault_point_map(m);
    CHECK(map.layer_for(FaultPoint::FP4) == weighted[0]);
    CHECK(map.layer_for(FaultPoint::FP3) == weighted[1]);
    CHECK(map.layer_for(FaultPoint::FP2) == weighted[2]);
    CHECK(map.layer_for(FaultPoint::FP1) == weighted[3]);
  }
  SUBCASE("five weighted layers space the middle points with shallow ties") {
    const ModelGraph m = make_random_quant_mlp({8, 7, 6, 5, 4}, 3, 11);
    const auto weighted = m.weighted_layers();
    REQUIRE(weighted.size() == 5);
    const FaultPointMap map = make_fault_point_map(m);
    CHECK(map.layer_for(FaultPoint::FP4) == weighted[0]);
    CHECK(map.layer_for(FaultPoint::FP3) == weighted[1]);  // 1 + 4/3 rounds down to 2
    CHECK(map.layer_for(FaultPoint::FP2) == weighted[3]);  // 1 + 8/3 rounds up to 4
    CHECK(map.layer_for(FaultPoint::FP1) == weighted[4]);
  }
  SUBCASE("too shallow fails loudly") {
    const ModelGraph m = make_random_quant_mlp({8, 7}, 3, 11);
    CHECK_THROWS_WITH_AS(make_fault_point_map(m), doctest::Contains("need at least 4"),
                         std::runtime_error);
  }
}

TEST_CASE("model files round-trip byte-exactly") {
  const ModelGraph m = make_random_quant_mlp({6, 5, 4}, 3, 123);
  save_model(m, "model_a.json");
  const ModelGraph loaded = load_model("model_a.json");
  save_model(loaded, "model_b.json");
  CHECK(read_file_bytes("model_a.json") == read_file_bytes("model_b.json"));
  CHECK(read_file_bytes("model_a.w8") == read_file_bytes("model_b.w8"));

  QuantTensor x;
  x.shape = {6};
  x.scale = m.input_scale;
  x.data = {1, -2, 3, -4, 5, -6};
  const ExitResult before = forward_exit(m, x, m.exit_count(), make_exact());
  const ExitResult after = forward_exit(loaded, x, loaded.exit_count(), make_exact());
  CHECK(before.logits.data == after.logits.data);
}

TEST_CASE("model loader rejects corrupt files") {
  const ModelGraph m = make_random_quant_mlp({6, 5}, 3, 5);
  save_model(m, "model_c.json");

  SUBCASE("not json") {
    write_file_bytes("model_c.json", "garbage", 7);
    CHECK_THROWS_WITH_AS(load_model("model_c.json"), doctest::Contains("not a model file"),
                         std::runtime_error);
  }
  SUBCASE("wrong version") {
    std::vector<uint8_t> bytes = read_file_bytes("model_c.json");
    std::string text(bytes.begin(), bytes.end());
    const size_t pos = text.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 19, "\"format_version\": 9");
    write_file_bytes("model_c.json", text.data(), text.size());
    CHECK_THROWS_WITH_AS(load_model("model_c.json"), doctest::Contains("format_version"),
                         std::runtime_error);
  }
  SUBCASE("truncated weight blob") {
    const std::vector<uint8_t> blob = read_file_bytes("model_c.w8");
    write_file_bytes("model_c.w8", blob.data(), blob.size() / 2);
    CHECK_THROWS_WITH_AS(load_model("model_c.json"), doctest::Contains("offset"),
                         std::runtime_error);
  }
}

TEST_CASE("model validation catches malformed exit layouts") {
  ModelGraph m = make_three_exit_model();

  SUBCASE("non-final empty head") {
    m.exits[0].layers.clear();
    CHECK_THROWS_WITH_AS(validate_model(m), doctest::Contains("empty head"), std::runtime_error);
  }
  SUBCASE("attachments must increase") {
    m.exits[1].attach_after = 0;
    CHECK_THROWS_WITH_AS(validate_model(m), doctest::Contains("strictly increase"),
                         std::runtime_error);
  }
  SUBCASE("final exit must sit after the last backbone layer") {
    m.exits.pop_back();
    CHECK_THROWS_WITH_AS(validate_model(m), doctest::Contains("last backbone layer"),
                         std::runtime_error);
  }
}

TEST_CASE("input quantization clamps to the int8 grid") {
  const ModelGraph m = make_random_quant_mlp({3, 4}, 2, 1);
  const float vals[3] = {0.0f, 1.0f, -1.0f};
  const QuantTensor x = quantize_input(m, std::span<const float>(vals, 3));
  CHECK(x.data[0] == 0);
  CHECK(x.data[1] == 127);
  CHECK(x.data[2] == -127);
  const float bad[2] = {0.0f, 0.0f};
  CHECK_THROWS(quantize_input(m, std::span<const float>(bad, 2)));
}
