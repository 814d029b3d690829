#include "epsilon/signature.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epsilon/util.hpp"

namespace epsilon {

using nlohmann::json;

void EpsilonConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("EpsilonConfig: gamma must be in (0, 1)");
  }
  if (!(m_offset > 0.0)) throw std::invalid_argument("EpsilonConfig: m must be > 0");
  if (bins < 2) throw std::invalid_argument("EpsilonConfig: bins must be >= 2");
  if (!(kappa > 0.0)) throw std::invalid_argument("EpsilonConfig: kappa must be > 0");
}

namespace {

double interpolated_quantile(const std::vector<int8_t>& sorted, double p) {
  const size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = static_cast<double>(n - 1) * p;
  const auto lo = static_cast<size_t>(std::floor(h));
  const auto hi = static_cast<size_t>(std::ceil(h));
  const double frac = h - std::floor(h);
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

std::vector<double> sparsity_pattern(std::span<const int8_t> weights, int bins) {
  std::vector<size_t> counts(static_cast<size_t>(bins) + 1, 0);
  for (int8_t w : weights) {
    if (w == 0) {
      ++counts[0];
    } else {
      const int idx = (static_cast<int>(w) + 128) * bins / 256;  // 0..bins-1
      ++counts[static_cast<size_t>(idx) + 1];
    }
  }
  std::vector<double> rho(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) {
    rho[i] = static_cast<double>(counts[i]) / static_cast<double>(weights.size());
  }
  return rho;
}

int8_t round_to_i8(double v) {
  return static_cast<int8_t>(std::clamp(std::llround(v), -128LL, 127LL));
}

}  // namespace

LayerSignature compute_signature(std::span<const int8_t> weights, int bins) {
  if (weights.empty()) throw std::invalid_argument("compute_signature: empty weight array");
  if (bins < 2) throw std::invalid_argument("compute_signature: bins must be >= 2");
  LayerSignature sig;
  sig.bins = bins;
  const double n = static_cast<double>(weights.size());
  double sum = 0.0;
  for (int8_t w : weights) sum += w;
  sig.mu = sum / n;
  double ss = 0.0;
  for (int8_t w : weights) {
    const double d = static_cast<double>(w) - sig.mu;
    ss += d * d;
  }
  sig.sigma = std::sqrt(ss / n);
  std::vector<int8_t> sorted(weights.begin(), weights.end());
  std::sort(sorted.begin(), sorted.end());
  sig.q25 = interpolated_quantile(sorted, 0.25);
  sig.q50 = interpolated_quantile(sorted, 0.50);
  sig.q75 = interpolated_quantile(sorted, 0.75);
  sig.rho = sparsity_pattern(weights, bins);
  return sig;
}

ImportanceFactors compute_importance(const ModelGraph& model, int layer_index,
                                     const EpsilonConfig& config) {
  const std::vector<int> weighted = model.weighted_layers();
  const auto it = std::find(weighted.begin(), weighted.end(), layer_index);
  if (it == weighted.end()) {
    throw std::runtime_error("compute_importance: layer " + std::to_string(layer_index) +
                             " is not a weighted backbone layer");
  }
  const int ordinal = static_cast<int>(it - weighted.begin()) + 1;  // 1..L
  const int L = static_cast<int>(weighted.size());
  ImportanceFactors f;
  f.beta_p = L == 1 ? 1.0
                    : 1.0 - 0.8 * (static_cast<double>(ordinal) - 1.0) /
                                (static_cast<double>(L) - 1.0);
  const LayerSpec& layer = model.backbone[static_cast<size_t>(layer_index)];
  double type_weight = config.type_weights.dense;
  if (layer.kind == LayerKind::Conv2d) {
    type_weight = config.type_weights.conv2d;
  } else {
    // The classifier dense that terminates an empty-head exit is the
    // exit-head case.
    for (const ExitHead& e : model.exits) {
      if (e.layers.empty() && e.attach_after == layer_index) {
        type_weight = config.type_weights.exit_head_dense;
        break;
      }
    }
  }
  size_t zeros = 0;
  for (int8_t w : layer.weights.data) {
    if (w == 0) ++zeros;
  }
  const double zero_fraction =
      static_cast<double>(zeros) / static_cast<double>(layer.weights.data.size());
  f.gamma_s = type_weight * std::clamp(1.0 - zero_fraction, 0.1, 1.0);
  f.alpha = f.beta_p * f.gamma_s;
  return f;
}

std::vector<double> compute_alphas(const ModelGraph& model, const EpsilonConfig& config) {
  std::vector<double> alphas;
  for (int l : model.weighted_layers()) {
    alphas.push_back(compute_importance(model, l, config).alpha);
  }
  return alphas;
}

double detection_threshold(const LayerSignature& sig, double alpha, double m) {
  if (!(m > 0.0)) throw std::invalid_argument("detection_threshold: m must be > 0");
  return (m + alpha) * sig.sigma;
}

double detection_threshold(const LayerSignature& sig, double alpha, const EpsilonConfig& config) {
  if (config.inverse_threshold) return (config.m_offset - alpha) * sig.sigma;
  return detection_threshold(sig, alpha, config.m_offset);
}

double pattern_deviation(std::span<const int8_t> current, const LayerSignature& reference,
                         int bins, double kappa) {
  if (bins != reference.bins) {
    throw std::invalid_argument("pattern_deviation: bin count " + std::to_string(bins) +
                                " does not match reference's " + std::to_string(reference.bins));
  }
  const std::vector<double> cur = sparsity_pattern(current, bins);
  double l1 = 0.0;
  for (size_t i = 0; i < cur.size(); ++i) l1 += std::abs(reference.rho[i] - cur[i]);
  return kappa * l1;
}

int8_t find_nearest_valid(int8_t w, const LayerSignature& sig, NearestValidMode mode,
                          TieBreak tie_break) {
  if (mode == NearestValidMode::ClampIqr) {
    const double iqr = sig.q75 - sig.q25;
    const double lo = sig.q25 - 1.5 * iqr;
    const double hi = sig.q75 + 1.5 * iqr;
    return round_to_i8(std::clamp(static_cast<double>(w), lo, hi));
  }
  const int8_t candidates[3] = {round_to_i8(sig.q25), round_to_i8(sig.q50), round_to_i8(sig.q75)};
  int8_t best = candidates[0];
  for (int i = 1; i < 3; ++i) {
    const int8_t v = candidates[i];
    const int dv = std::abs(static_cast<int>(w) - v);
    const int db = std::abs(static_cast<int>(w) - best);
    if (dv < db) {
      best = v;
    } else if (dv == db) {
      if (tie_break == TieBreak::LowerValue) {
        best = std::min(best, v);
      } else if (std::abs(static_cast<int>(v)) < std::abs(static_cast<int>(best)) ||
                 (std::abs(static_cast<int>(v)) == std::abs(static_cast<int>(best)) && v < best)) {
        best = v;
      }
    }
  }
  return best;
}

int mitigate_layer(std::span<int8_t> weights, const LayerSignature& sig, double threshold,
                   const EpsilonConfig& config) {
  if (threshold < 0.0) throw std::invalid_argument("mitigate_layer: threshold must be >= 0");
  int corrected = 0;
  for (int8_t& w : weights) {
    if (std::abs(static_cast<double>(w) - sig.mu) > threshold) {
      w = find_nearest_valid(w, sig, config.nearest_valid, config.tie_break);
      ++corrected;
    }
  }
  return corrected;
}

double missed_detection_bound(double alpha, double p) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw std::invalid_argument("missed_detection_bound: p must be in (0, 1]");
  }
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::invalid_argument("missed_detection_bound: alpha must be in [0, 1]");
  }
  return std::exp(-(alpha * alpha) / (2.0 * p));
}

double error_bound(double gamma, int n_exits, double alpha, double p) {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("error_bound: gamma must be in (0, 1)");
  }
  if (n_exits < 1) throw std::invalid_argument("error_bound: N must be >= 1");
  const double bound = std::pow(1.0 - gamma, n_exits) + missed_detection_bound(alpha, p);
  return std::min(bound, 1.0);
}

const LayerSignature* SignatureStore::find(int layer) const {
  for (const SignatureRecord& r : records) {
    if (r.layer == layer) return &r.sig;
  }
  return nullptr;
}

SignatureStore build_signature_store(const ModelGraph& model, int bins) {
  SignatureStore store;
  for (int l : model.weighted_layers()) {
    store.records.push_back({l, compute_signature(get_layer_weights(model, l), bins)});
  }
  return store;
}

std::string store_to_json(const SignatureStore& store) {
  json doc = json::array();
  for (const SignatureRecord& r : store.records) {
    json j;
    j["layer"] = r.layer;
    j["mu"] = r.sig.mu;
    j["sigma"] = r.sig.sigma;
    j["q25"] = r.sig.q25;
    j["q50"] = r.sig.q50;
    j["q75"] = r.sig.q75;
    j["bins"] = r.sig.bins;
    j["rho"] = r.sig.rho;
    doc.push_back(std::move(j));
  }
  return doc.dump(2) + "\n";
}

SignatureStore store_from_json(const std::string& text) {
  const json doc = json::parse(text);
  SignatureStore store;
  for (const json& j : doc) {
    SignatureRecord r;
    r.layer = j.at("layer").get<int>();
    r.sig.mu = j.at("mu").get<double>();
    r.sig.sigma = j.at("sigma").get<double>();
    r.sig.q25 = j.at("q25").get<double>();
    r.sig.q50 = j.at("q50").get<double>();
    r.sig.q75 = j.at("q75").get<double>();
    r.sig.bins = j.at("bins").get<int>();
    r.sig.rho = j.at("rho").get<std::vector<double>>();
    store.records.push_back(std::move(r));
  }
  return store;
}

void save_signature_store(const SignatureStore& store, const std::string& path) {
  const std::string text = store_to_json(store);
  write_file_bytes(path, text.data(), text.size());
}

SignatureStore load_signature_store(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return store_from_json(std::string(bytes.begin(), bytes.end()));
}

double calibrate_kappa(const ModelGraph& model, const SignatureStore& store,
                       const EpsilonConfig& config, double margin) {
  double needed = 0.0;
  for (const SignatureRecord& r : store.records) {
    const double alpha = compute_importance(model, r.layer, config).alpha;
    const double t = detection_threshold(r.sig, alpha, config);
    const double n = static_cast<double>(get_layer_weights(model, r.layer).size());
    needed = std::max(needed, t * n / 2.0);
  }
  return std::max(needed * margin, 1.0);
}

}  // namespace epsilon
