#include "epsilon/fault.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epsilon/model.hpp"
#include "epsilon/util.hpp"

namespace epsilon {

using nlohmann::json;

const char* polarity_name(Polarity p) { return p == Polarity::SA0 ? "SA0" : "SA1"; }

Polarity polarity_from_name(const std::string& name) {
  if (name == "SA0" || name == "sa0") return Polarity::SA0;
  if (name == "SA1" || name == "sa1") return Polarity::SA1;
  throw std::runtime_error("polarity_from_name: unknown polarity '" + name + "'");
}

const char* bit_distribution_name(BitDistribution d) {
  switch (d) {
    case BitDistribution::Uniform: return "uniform";
    case BitDistribution::LsbGeometric: return "lsb-geometric";
    case BitDistribution::SignBit: return "sign-bit";
  }
  return "?";
}

BitDistribution bit_distribution_from_name(const std::string& name) {
  if (name == "uniform") return BitDistribution::Uniform;
  if (name == "lsb-geometric") return BitDistribution::LsbGeometric;
  if (name == "sign-bit") return BitDistribution::SignBit;
  throw std::runtime_error("bit_distribution_from_name: unknown distribution '" + name + "'");
}

const char* persistence_name(Persistence p) {
  return p == Persistence::OneShot ? "one-shot" : "hard-stuck";
}

Persistence persistence_from_name(const std::string& name) {
  if (name == "one-shot") return Persistence::OneShot;
  if (name == "hard-stuck") return Persistence::HardStuck;
  throw std::runtime_error("persistence_from_name: unknown mode '" + name + "'");
}

int8_t force_bit(int8_t value, int bit, Polarity polarity) {
  auto u = static_cast<uint8_t>(value);
  if (polarity == Polarity::SA0) {
    u = static_cast<uint8_t>(u & ~(1u << bit));
  } else {
    u = static_cast<uint8_t>(u | (1u << bit));
  }
  return static_cast<int8_t>(u);
}

double lsb_geometric_probability(int bit) {
  // P(b) proportional to 0.5^b over b = 0..7.
  const double z = 2.0 * (1.0 - std::pow(2.0, -8.0));
  return std::pow(0.5, bit) / z;
}

namespace {

int draw_bit(std::mt19937_64& rng, BitDistribution dist) {
  switch (dist) {
    case BitDistribution::Uniform:
      return static_cast<int>(rng_below(rng, 8));
    case BitDistribution::LsbGeometric: {
      const double u = rng_unit(rng);
      double cum = 0.0;
      for (int b = 0; b < 8; ++b) {
        cum += lsb_geometric_probability(b);
        if (u < cum) return b;
      }
      return 7;
    }
    case BitDistribution::SignBit:
      return 7;
  }
  return 0;
}

}  // namespace

FaultPlan make_layer_plan(const ModelGraph& model, int layer_index, double fr_percent,
                          Polarity polarity, BitDistribution bits, uint64_t seed,
                          Persistence mode) {
  if (fr_percent <= 0.0 || fr_percent > 100.0) {
    throw std::invalid_argument("make_plan: fault rate " + std::to_string(fr_percent) +
                                " must be in (0, 100]");
  }
  const size_t total = get_layer_weights(model, layer_index).size();
  const auto count = static_cast<size_t>(std::floor(fr_percent / 100.0 *
                                                    static_cast<double>(total) + 0.5));
  FaultPlan plan;
  plan.layer_index = layer_index;
  plan.fault_rate_percent = fr_percent;
  plan.seed = seed;
  plan.bits = bits;
  plan.mode = mode;
  std::mt19937_64 rng(mix64(seed, 0xfa17ULL));
  // Partial Fisher-Yates: first `count` slots are a uniform distinct sample.
  std::vector<uint32_t> indices(total);
  for (size_t i = 0; i < total; ++i) indices[i] = static_cast<uint32_t>(i);
  for (size_t i = 0; i < count; ++i) {
    const size_t j = i + static_cast<size_t>(rng_below(rng, total - i));
    std::swap(indices[i], indices[j]);
  }
  plan.entries.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    FaultEntry e;
    e.weight_index = indices[i];
    e.bit = draw_bit(rng, bits);
    e.polarity = polarity;
    plan.entries.push_back(e);
  }
  return plan;
}

FaultPlan make_plan(const ModelGraph& model, FaultPoint fp, double fr_percent, Polarity polarity,
                    BitDistribution bits, uint64_t seed, Persistence mode) {
  const FaultPointMap map = make_fault_point_map(model);
  return make_layer_plan(model, map.layer_for(fp), fr_percent, polarity, bits, seed, mode);
}

void apply_plan(ModelGraph& model, const FaultPlan& plan) {
  LayerSpec& layer = model.backbone.at(static_cast<size_t>(plan.layer_index));
  if (!layer.has_weights()) {
    throw std::runtime_error("apply_plan: layer " + std::to_string(plan.layer_index) +
                             " has no weights");
  }
  for (const FaultEntry& e : plan.entries) {
    if (e.weight_index >= layer.weights.data.size()) {
      throw std::out_of_range("apply_plan: weight index " + std::to_string(e.weight_index) +
                              " out of bounds for layer with " +
                              std::to_string(layer.weights.data.size()) + " weights");
    }
    if (e.bit < 0 || e.bit > 7) {
      throw std::out_of_range("apply_plan: bit position " + std::to_string(e.bit));
    }
    int8_t& w = layer.weights.data[e.weight_index];
    w = force_bit(w, e.bit, e.polarity);
  }
  if (plan.mode == Persistence::HardStuck) model.stuck_plans.push_back(plan);
}

double fault_rate(const FaultPlan& plan, const ModelGraph& model) {
  const size_t total = get_layer_weights(model, plan.layer_index).size();
  return static_cast<double>(plan.entries.size()) / static_cast<double>(total) * 100.0;
}

std::string plan_to_json(const FaultPlan& plan) {
  json doc;
  doc["format_version"] = 1;
  doc["layer"] = plan.layer_index;
  doc["fault_rate_percent"] = plan.fault_rate_percent;
  doc["seed"] = plan.seed;
  doc["bit_distribution"] = bit_distribution_name(plan.bits);
  doc["mode"] = persistence_name(plan.mode);
  json entries = json::array();
  for (const FaultEntry& e : plan.entries) {
    entries.push_back(json::array({e.weight_index, e.bit, polarity_name(e.polarity)}));
  }
  doc["entries"] = std::move(entries);
  return doc.dump(2) + "\n";
}

FaultPlan plan_from_json(const std::string& text) {
  const json doc = json::parse(text);
  FaultPlan plan;
  plan.layer_index = doc.at("layer").get<int>();
  plan.fault_rate_percent = doc.at("fault_rate_percent").get<double>();
  plan.seed = doc.at("seed").get<uint64_t>();
  plan.bits = bit_distribution_from_name(doc.at("bit_distribution").get<std::string>());
  plan.mode = persistence_from_name(doc.at("mode").get<std::string>());
  for (const json& je : doc.at("entries")) {
    FaultEntry e;
    e.weight_index = je.at(0).get<uint32_t>();
    e.bit = je.at(1).get<int>();
    e.polarity = polarity_from_name(je.at(2).get<std::string>());
    plan.entries.push_back(e);
  }
  return plan;
}

void save_plan(const FaultPlan& plan, const std::string& path) {
  const std::string text = plan_to_json(plan);
  write_file_bytes(path, text.data(), text.size());
}

FaultPlan load_plan(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return plan_from_json(std::string(bytes.begin(), bytes.end()));
}

}  // namespace epsilon
