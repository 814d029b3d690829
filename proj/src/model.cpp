#include "epsilon/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epsilon/util.hpp"

namespace epsilon {

using nlohmann::json;

std::vector<int> ModelGraph::weighted_layers() const {
  std::vector<int> idx;
  for (size_t i = 0; i < backbone.size(); ++i) {
    if (backbone[i].has_weights()) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

void validate_model(const ModelGraph& model) {
  if (model.class_count < 2) throw std::runtime_error("validate_model: class_count must be >= 2");
  if (model.exits.empty()) throw std::runtime_error("validate_model: model needs at least one exit");
  int prev = -1;
  for (size_t i = 0; i < model.exits.size(); ++i) {
    const ExitHead& e = model.exits[i];
    if (e.attach_after <= prev) {
      throw std::runtime_error("validate_model: exit attachments must strictly increase");
    }
    if (e.attach_after >= static_cast<int>(model.backbone.size())) {
      throw std::runtime_error("validate_model: exit attached past the backbone end");
    }
    prev = e.attach_after;
    const bool is_final = i + 1 == model.exits.size();
    const LayerSpec* terminal = nullptr;
    if (e.layers.empty()) {
      if (!is_final) {
        throw std::runtime_error("validate_model: only the final exit may have an empty head");
      }
      terminal = &model.backbone[static_cast<size_t>(e.attach_after)];
    } else {
      terminal = &e.layers.back();
    }
    if (terminal->kind != LayerKind::Dense || terminal->out_width != model.class_count) {
      throw std::runtime_error(
          "validate_model: exit " + std::to_string(i + 1) +
          " must end in a dense layer with class_count outputs");
    }
  }
  if (model.exits.back().attach_after != static_cast<int>(model.backbone.size()) - 1) {
    throw std::runtime_error(
        "validate_model: final exit must be attached after the last backbone layer");
  }
}

std::span<const int8_t> get_layer_weights(const ModelGraph& model, int layer_index) {
  if (layer_index < 0 || layer_index >= static_cast<int>(model.backbone.size())) {
    throw std::out_of_range("get_layer_weights: layer index " + std::to_string(layer_index) +
                            " out of range");
  }
  const LayerSpec& layer = model.backbone[static_cast<size_t>(layer_index)];
  if (!layer.has_weights()) {
    throw std::runtime_error("get_layer_weights: layer " + std::to_string(layer_index) + " (" +
                             layer_kind_name(layer.kind) + ") has no weights");
  }
  return {layer.weights.data.data(), layer.weights.data.size()};
}

void update_layer(ModelGraph& model, int layer_index, std::span<const int8_t> weights) {
  if (layer_index < 0 || layer_index >= static_cast<int>(model.backbone.size())) {
    throw std::out_of_range("update_layer: layer index " + std::to_string(layer_index) +
                            " out of range");
  }
  LayerSpec& layer = model.backbone[static_cast<size_t>(layer_index)];
  if (!layer.has_weights()) {
    throw std::runtime_error("update_layer: layer " + std::to_string(layer_index) + " (" +
                             layer_kind_name(layer.kind) + ") has no weights");
  }
  if (weights.size() != layer.weights.data.size()) {
    throw std::runtime_error("update_layer: weight count " + std::to_string(weights.size()) +
                             " does not match layer's " +
                             std::to_string(layer.weights.data.size()));
  }
  std::copy(weights.begin(), weights.end(), layer.weights.data.begin());
  // Stuck bits win over any write.
  for (const FaultPlan& plan : model.stuck_plans) {
    if (plan.layer_index != layer_index) continue;
    for (const FaultEntry& e : plan.entries) {
      int8_t& w = layer.weights.data[e.weight_index];
      w = force_bit(w, e.bit, e.polarity);
    }
  }
}

const char* fault_point_name(FaultPoint fp) {
  switch (fp) {
    case FaultPoint::FP1: return "FP1";
    case FaultPoint::FP2: return "FP2";
    case FaultPoint::FP3: return "FP3";
    case FaultPoint::FP4: return "FP4";
  }
  return "?";
}

FaultPoint fault_point_from_name(const std::string& name) {
  if (name == "FP1" || name == "fp1") return FaultPoint::FP1;
  if (name == "FP2" || name == "fp2") return FaultPoint::FP2;
  if (name == "FP3" || name == "fp3") return FaultPoint::FP3;
  if (name == "FP4" || name == "fp4") return FaultPoint::FP4;
  throw std::runtime_error("fault_point_from_name: unknown fault point '" + name + "'");
}

FaultPointMap make_fault_point_map(const ModelGraph& model) {
  const std::vector<int> weighted = model.weighted_layers();
  const int L = static_cast<int>(weighted.size());
  if (L < 4) {
    throw std::runtime_error("make_fault_point_map: model has " + std::to_string(L) +
                             " weighted layers, need at least 4");
  }
  // Ordinal positions 1..L; nearest integer with .5 rounded toward the
  // shallower index.
  auto spaced = [&](double thirds) {
    const double pos = 1.0 + (static_cast<double>(L) - 1.0) * thirds;
    return static_cast<int>(std::ceil(pos - 0.5));
  };
  FaultPointMap map;
  map.fp_to_layer[static_cast<size_t>(FaultPoint::FP4)] = weighted.front();
  map.fp_to_layer[static_cast<size_t>(FaultPoint::FP3)] = weighted[static_cast<size_t>(spaced(1.0 / 3.0) - 1)];
  map.fp_to_layer[static_cast<size_t>(FaultPoint::FP2)] = weighted[static_cast<size_t>(spaced(2.0 / 3.0) - 1)];
  map.fp_to_layer[static_cast<size_t>(FaultPoint::FP1)] = weighted.back();
  const auto& m = map.fp_to_layer;
  if (!(m[3] < m[2] && m[2] < m[1] && m[1] < m[0])) {
    throw std::runtime_error("make_fault_point_map: fault points are not strictly ordered");
  }
  return map;
}

InferenceSession::InferenceSession(const ModelGraph& model, QuantTensor input,
                                   const MultiplierModel& mult)
    : model_(model), mult_(mult), input_(std::move(input)) {
  cache_.resize(model.backbone.size());
}

const QuantTensor& InferenceSession::backbone_activation(int position) {
  if (position < 0) return input_;
  if (!cache_[static_cast<size_t>(position)]) {
    const QuantTensor* prev = &input_;
    int first_missing = position;
    while (first_missing > 0 && !cache_[static_cast<size_t>(first_missing - 1)]) --first_missing;
    if (first_missing > 0) prev = &*cache_[static_cast<size_t>(first_missing - 1)];
    for (int p = first_missing; p <= position; ++p) {
      const LayerSpec& layer = model_.backbone[static_cast<size_t>(p)];
      total_ops_ += op_count(layer, prev->shape);
      cache_[static_cast<size_t>(p)] = layer_forward(*prev, layer, mult_);
      prev = &*cache_[static_cast<size_t>(p)];
    }
  }
  return *cache_[static_cast<size_t>(position)];
}

ExitResult InferenceSession::run_exit(int exit_index) {
  if (exit_index < 1 || exit_index > model_.exit_count()) {
    throw std::out_of_range("run_exit: exit index " + std::to_string(exit_index) +
                            " out of range 1.." + std::to_string(model_.exit_count()));
  }
  const ExitHead& head = model_.exits[static_cast<size_t>(exit_index - 1)];
  const uint64_t before = total_ops_;
  ExitResult r;
  if (head.layers.empty()) {
    // Final exit whose classifier is the last backbone layer: evaluate it in
    // accumulator form; its requantized value is never needed.
    const LayerSpec& terminal = model_.backbone[static_cast<size_t>(head.attach_after)];
    const QuantTensor& in = backbone_activation(head.attach_after - 1);
    total_ops_ += op_count(terminal, in.shape);
    r.logits = layer_forward_accum(in, terminal, mult_);
  } else {
    QuantTensor h = backbone_activation(head.attach_after);
    for (size_t i = 0; i + 1 < head.layers.size(); ++i) {
      total_ops_ += op_count(head.layers[i], h.shape);
      h = layer_forward(h, head.layers[i], mult_);
    }
    const LayerSpec& terminal = head.layers.back();
    total_ops_ += op_count(terminal, h.shape);
    r.logits = layer_forward_accum(h, terminal, mult_);
  }
  const SoftmaxResult sm = softmax_confidence(r.logits);
  r.probabilities = sm.probabilities;
  r.confidence = sm.confidence;
  r.prediction = argmax_class(sm.probabilities);
  r.ops_new = total_ops_ - before;
  return r;
}

ExitResult forward_exit(const ModelGraph& model, const QuantTensor& x, int exit_index,
                        const MultiplierModel& m) {
  InferenceSession session(model, x, m);
  return session.run_exit(exit_index);
}

QuantTensor quantize_input(const ModelGraph& model, std::span<const float> values) {
  QuantTensor t;
  t.shape = model.input_shape;
  t.scale = model.input_scale;
  if (values.size() != t.numel()) {
    throw std::runtime_error("quantize_input: got " + std::to_string(values.size()) +
                             " values for input shape " + shape_to_string(model.input_shape));
  }
  t.data.resize(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const long long q = std::llround(static_cast<double>(values[i]) / model.input_scale);
    t.data[i] = static_cast<int8_t>(std::clamp(q, -128LL, 127LL));
  }
  return t;
}

namespace {

constexpr int kModelFormatVersion = 1;

std::string w8_path_for(const std::string& json_path) {
  const size_t dot = json_path.rfind('.');
  if (dot == std::string::npos || json_path.substr(dot) != ".json") {
    throw std::runtime_error("model path must end in .json, got " + json_path);
  }
  return json_path.substr(0, dot) + ".w8";
}

json layer_to_json(const LayerSpec& layer, std::vector<uint8_t>& blob) {
  json j;
  j["kind"] = layer_kind_name(layer.kind);
  if (!layer.name.empty()) j["name"] = layer.name;
  switch (layer.kind) {
    case LayerKind::Dense:
      j["in_width"] = layer.in_width;
      j["out_width"] = layer.out_width;
      break;
    case LayerKind::Conv2d:
      j["in_channels"] = layer.in_channels;
      j["out_channels"] = layer.out_channels;
      j["kernel"] = layer.kernel;
      j["stride"] = layer.stride;
      j["padding"] = layer.padding;
      break;
    case LayerKind::MaxPool2d:
      j["pool"] = layer.pool;
      if (layer.pool_stride > 0) j["pool_stride"] = layer.pool_stride;
      break;
    default:
      break;
  }
  if (layer.has_weights()) {
    j["weight_scale"] = format_double(layer.weights.scale);
    j["out_scale"] = format_double(layer.out_scale);
    j["weights"] = {{"offset", blob.size()}, {"length", layer.weights.data.size()}};
    blob.insert(blob.end(), reinterpret_cast<const uint8_t*>(layer.weights.data.data()),
                reinterpret_cast<const uint8_t*>(layer.weights.data.data()) +
                    layer.weights.data.size());
    j["bias"] = {{"offset", blob.size()}, {"length", layer.bias.size() * 4}};
    for (int32_t b : layer.bias) {
      const auto u = static_cast<uint32_t>(b);
      blob.push_back(static_cast<uint8_t>(u & 0xFF));
      blob.push_back(static_cast<uint8_t>((u >> 8) & 0xFF));
      blob.push_back(static_cast<uint8_t>((u >> 16) & 0xFF));
      blob.push_back(static_cast<uint8_t>((u >> 24) & 0xFF));
    }
  }
  return j;
}

double parse_scale(const json& j, const char* field) {
  const std::string s = j.at(field).get<std::string>();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || v <= 0.0) {
    throw std::runtime_error(std::string("load_model: bad scale string in field ") + field);
  }
  return v;
}

LayerSpec layer_from_json(const json& j, const std::vector<uint8_t>& blob) {
  LayerSpec layer;
  layer.kind = layer_kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("name")) layer.name = j["name"].get<std::string>();
  switch (layer.kind) {
    case LayerKind::Dense:
      layer.in_width = j.at("in_width").get<int>();
      layer.out_width = j.at("out_width").get<int>();
      break;
    case LayerKind::Conv2d:
      layer.in_channels = j.at("in_channels").get<int>();
      layer.out_channels = j.at("out_channels").get<int>();
      layer.kernel = j.at("kernel").get<int>();
      layer.stride = j.at("stride").get<int>();
      layer.padding = j.at("padding").get<int>();
      break;
    case LayerKind::MaxPool2d:
      layer.pool = j.at("pool").get<int>();
      layer.pool_stride = j.value("pool_stride", 0);
      break;
    default:
      break;
  }
  if (layer.has_weights()) {
    layer.weights.scale = parse_scale(j, "weight_scale");
    layer.out_scale = parse_scale(j, "out_scale");
    const size_t w_off = j.at("weights").at("offset").get<size_t>();
    const size_t w_len = j.at("weights").at("length").get<size_t>();
    const size_t b_off = j.at("bias").at("offset").get<size_t>();
    const size_t b_len = j.at("bias").at("length").get<size_t>();
    if (w_off + w_len > blob.size() || b_off + b_len > blob.size()) {
      throw std::runtime_error("load_model: weight block at offset " + std::to_string(w_off) +
                               " exceeds .w8 size " + std::to_string(blob.size()));
    }
    if (b_len % 4 != 0) throw std::runtime_error("load_model: bias block length not 32-bit aligned");
    const size_t expected =
        layer.kind == LayerKind::Dense
            ? static_cast<size_t>(layer.in_width) * layer.out_width
            : static_cast<size_t>(layer.out_channels) * layer.in_channels * layer.kernel *
                  layer.kernel;
    if (w_len != expected) {
      throw std::runtime_error("load_model: weight block length " + std::to_string(w_len) +
                               " does not match layer shape (expected " +
                               std::to_string(expected) + ")");
    }
    layer.weights.data.resize(w_len);
    std::copy(blob.begin() + static_cast<long>(w_off),
              blob.begin() + static_cast<long>(w_off + w_len),
              reinterpret_cast<uint8_t*>(layer.weights.data.data()));
    layer.weights.shape = layer.kind == LayerKind::Dense
                              ? std::vector<int>{layer.out_width, layer.in_width}
                              : std::vector<int>{layer.out_channels, layer.in_channels,
                                                 layer.kernel, layer.kernel};
    layer.bias.resize(b_len / 4);
    for (size_t i = 0; i < layer.bias.size(); ++i) {
      const size_t o = b_off + 4 * i;
      layer.bias[i] = static_cast<int32_t>(
          static_cast<uint32_t>(blob[o]) | static_cast<uint32_t>(blob[o + 1]) << 8 |
          static_cast<uint32_t>(blob[o + 2]) << 16 | static_cast<uint32_t>(blob[o + 3]) << 24);
    }
  }
  return layer;
}

}  // namespace

void save_model(const ModelGraph& model, const std::string& json_path) {
  std::vector<uint8_t> blob;
  json doc;
  doc["format_version"] = kModelFormatVersion;
  doc["name"] = model.name;
  doc["seed"] = model.seed;
  doc["class_count"] = model.class_count;
  doc["input_shape"] = model.input_shape;
  doc["input_scale"] = format_double(model.input_scale);
  json layers = json::array();
  for (const LayerSpec& l : model.backbone) layers.push_back(layer_to_json(l, blob));
  doc["layers"] = std::move(layers);
  json exits = json::array();
  for (const ExitHead& e : model.exits) {
    json je;
    je["attach_after"] = e.attach_after;
    json hl = json::array();
    for (const LayerSpec& l : e.layers) hl.push_back(layer_to_json(l, blob));
    je["layers"] = std::move(hl);
    exits.push_back(std::move(je));
  }
  doc["exits"] = std::move(exits);
  const std::string text = doc.dump(2) + "\n";
  write_file_bytes(json_path, text.data(), text.size());
  write_file_bytes(w8_path_for(json_path), blob.data(), blob.size());
}

ModelGraph load_model(const std::string& json_path) {
  const std::vector<uint8_t> json_bytes = read_file_bytes(json_path);
  json doc;
  try {
    doc = json::parse(json_bytes.begin(), json_bytes.end());
  } catch (const json::parse_error& e) {
    throw std::runtime_error("load_model: " + json_path + ": not a model file (" + e.what() + ")");
  }
  if (!doc.contains("format_version") || !doc["format_version"].is_number_integer()) {
    throw std::runtime_error("load_model: " + json_path + ": missing format_version");
  }
  if (doc["format_version"].get<int>() != kModelFormatVersion) {
    throw std::runtime_error("load_model: " + json_path + ": unsupported format_version " +
                             doc["format_version"].dump());
  }
  const std::vector<uint8_t> blob = read_file_bytes(w8_path_for(json_path));
  ModelGraph model;
  model.name = doc.value("name", "");
  model.seed = doc.value("seed", 0ULL);
  model.class_count = doc.at("class_count").get<int>();
  model.input_shape = doc.at("input_shape").get<std::vector<int>>();
  model.input_scale = parse_scale(doc, "input_scale");
  for (const json& j : doc.at("layers")) model.backbone.push_back(layer_from_json(j, blob));
  for (const json& je : doc.at("exits")) {
    ExitHead e;
    e.attach_after = je.at("attach_after").get<int>();
    for (const json& j : je.at("layers")) e.layers.push_back(layer_from_json(j, blob));
    model.exits.push_back(std::move(e));
  }
  validate_model(model);
  return model;
}

ModelGraph make_random_quant_mlp(const std::vector<int>& widths, int class_count, uint64_t seed) {
  if (widths.size() < 2) {
    throw std::invalid_argument("make_random_quant_mlp: need input plus at least one hidden width");
  }
  std::mt19937_64 rng(mix64(seed, 0x6d6c70ULL));
  auto rand_i8 = [&rng]() {
    return static_cast<int8_t>(static_cast<int>(rng_below(rng, 201)) - 100);
  };
  auto make_dense = [&](int in_w, int out_w, const std::string& name) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.name = name;
    l.in_width = in_w;
    l.out_width = out_w;
    l.weights.shape = {out_w, in_w};
    l.weights.scale = 0.02;
    l.weights.data.resize(static_cast<size_t>(in_w) * out_w);
    for (auto& w : l.weights.data) w = rand_i8();
    l.bias.assign(static_cast<size_t>(out_w), 0);
    l.out_scale = 0.05;
    return l;
  };
  ModelGraph model;
  model.name = "random-mlp";
  model.seed = seed;
  model.class_count = class_count;
  model.input_shape = {widths[0]};
  model.input_scale = 1.0 / 127.0;
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    model.backbone.push_back(
        make_dense(widths[i], widths[i + 1], "fc" + std::to_string(i + 1)));
    const int pos = static_cast<int>(model.backbone.size()) - 1;
    ExitHead head;
    head.attach_after = pos;
    head.layers.push_back(make_dense(widths[i + 1], class_count,
                                     "exit" + std::to_string(i + 1) + "_fc"));
    model.exits.push_back(std::move(head));
    LayerSpec relu;
    relu.kind = LayerKind::Relu;
    relu.name = "relu" + std::to_string(i + 1);
    model.backbone.push_back(relu);
  }
  // Final classifier as the last backbone layer with an empty final head.
  model.backbone.push_back(make_dense(widths.back(), class_count, "classifier"));
  ExitHead final_head;
  final_head.attach_after = static_cast<int>(model.backbone.size()) - 1;
  model.exits.push_back(final_head);
  validate_model(model);
  return model;
}

}  // namespace epsilon
