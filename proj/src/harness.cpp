#include "epsilon/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epsilon/train.hpp"
#include "epsilon/util.hpp"

namespace epsilon {

using nlohmann::json;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string histogram_cell(const std::vector<uint64_t>& hist) {
  std::string s;
  for (size_t i = 0; i < hist.size(); ++i) {
    if (i) s += '|';
    s += std::to_string(hist[i]);
  }
  return s;
}

struct CellOutcome {
  double accuracy = 0.0;
  double mean_ops = 0.0;
  uint64_t detections = 0;
  std::vector<uint64_t> exit_histogram;
  uint64_t corrections = 0;
  double wall_seconds = 0.0;
};

struct CellContext {
  const ExperimentConfig& cfg;
  const ModelGraph& golden;
  const Dataset& test;  // already prepared for the model input shape
  const SignatureStore& store;
  const std::vector<double>& alphas;
  EpsilonConfig eps;  // kappa resolved
};

uint64_t plan_seed(uint64_t trial_seed, FaultPoint fp, double fr) {
  return mix64(trial_seed, mix64(static_cast<uint64_t>(fp) + 1,
                                 static_cast<uint64_t>(std::llround(fr * 1000.0))));
}

CellOutcome eval_cell(const CellContext& ctx, const std::string& policy,
                      const MultiplierModel& mult, FaultPoint fp, double fr, uint64_t seed) {
  ModelGraph model = ctx.golden;
  if (fr > 0.0) {
    const FaultPlan plan =
        make_plan(model, fp, fr, ctx.cfg.polarity, ctx.cfg.bits, plan_seed(seed, fp, fr),
                  ctx.cfg.mode);
    apply_plan(model, plan);
  }
  const size_t n = ctx.cfg.eval_limit == 0 ? ctx.test.size()
                                           : std::min(ctx.cfg.eval_limit, ctx.test.size());
  CellOutcome out;
  out.exit_histogram.assign(static_cast<size_t>(model.exit_count()), 0);
  uint64_t total_ops = 0;
  size_t correct = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (size_t i = 0; i < n; ++i) {
    const QuantTensor x = quantize_input(model, ctx.test.item(i));
    int prediction = 0;
    if (policy == "epsilon") {
      const EpsilonResult r = epsilon_infer(model, ctx.store, ctx.alphas, ctx.eps, x, mult);
      prediction = r.prediction;
      total_ops += r.trace.total_ops;
      if (r.fault_detected) ++out.detections;
      for (const LayerCheck& c : r.trace.checks) {
        out.corrections += static_cast<uint64_t>(c.corrected);
      }
      ++out.exit_histogram[static_cast<size_t>(r.trace.exit_taken - 1)];
    } else if (policy == "vanilla") {
      const VanillaResult r = vanilla_infer(model, x, mult);
      prediction = r.prediction;
      total_ops += r.op_count;
      ++out.exit_histogram.back();
    } else if (policy == "mend") {
      const MendResult r = mend_like_infer(model, ctx.cfg.mend, x, mult);
      prediction = r.prediction;
      total_ops += r.op_count;
      if (r.flagged) ++out.detections;
      ++out.exit_histogram[static_cast<size_t>(r.exit_taken - 1)];
    } else {
      throw std::runtime_error("run_grid: unknown policy '" + policy + "'");
    }
    if (prediction == ctx.test.labels[i]) ++correct;
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
  out.mean_ops = static_cast<double>(total_ops) / static_cast<double>(n);
  return out;
}

EpsilonConfig resolve_epsilon_config(const ExperimentConfig& cfg, const ModelGraph& golden,
                                     const SignatureStore& store) {
  EpsilonConfig eps = cfg.eps;
  eps.kappa = cfg.kappa_override > 0.0 ? cfg.kappa_override
                                       : calibrate_kappa(golden, store, eps);
  return eps;
}

}  // namespace

std::string rows_to_csv(const std::vector<MetricsRow>& rows) {
  std::string csv =
      "policy,multiplier,fault_point,fault_rate,seed,accuracy,mean_ops,energy_pj,"
      "detections,exit_histogram,corrections\n";
  for (const MetricsRow& r : rows) {
    csv += r.policy + ',' + r.multiplier + ',' + r.fault_point + ',';
    csv += r.is_average ? "" : fmt("%g", r.fault_rate);
    csv += ',';
    csv += r.is_average ? "" : std::to_string(r.seed);
    csv += ',' + fmt("%.4f", r.accuracy) + ',' + fmt("%.3f", r.mean_ops) + ',' +
           fmt("%.3f", r.energy_pj) + ',' + std::to_string(r.detections) + ',' +
           histogram_cell(r.exit_histogram) + ',' + std::to_string(r.corrections) + '\n';
  }
  return csv;
}

GridResult run_grid(const ExperimentConfig& cfg, const ModelGraph& golden, const Dataset& test) {
  if (cfg.policies.empty() || cfg.multipliers.empty() || cfg.fault_points.empty() ||
      cfg.fault_rates.empty() || cfg.seeds.empty()) {
    throw std::invalid_argument("run_grid: every grid axis must be nonempty");
  }
  const Dataset prepared = prepare_for_input(test, golden.input_shape);
  const SignatureStore store = build_signature_store(golden, cfg.eps.bins);
  const std::vector<double> alphas = compute_alphas(golden, cfg.eps);
  CellContext ctx{cfg, golden, prepared, store, alphas,
                  resolve_epsilon_config(cfg, golden, store)};

  GridResult result;
  std::map<std::string, double> wall_by_policy;
  for (const std::string& policy : cfg.policies) {
    for (const std::string& mult_id : cfg.multipliers) {
      const MultiplierModel mult = parse_multiplier(mult_id);
      double acc_sum = 0.0, ops_sum = 0.0, energy_sum = 0.0;
      size_t cells = 0;
      for (FaultPoint fp : cfg.fault_points) {
        for (double fr : cfg.fault_rates) {
          for (uint64_t seed : cfg.seeds) {
            const CellOutcome o = eval_cell(ctx, policy, mult, fp, fr, seed);
            MetricsRow row;
            row.policy = policy;
            row.multiplier = mult_id;
            row.fault_point = fr > 0.0 ? fault_point_name(fp) : "none";
            row.fault_rate = fr;
            row.seed = seed;
            row.accuracy = o.accuracy;
            row.mean_ops = o.mean_ops;
            row.energy_pj = o.mean_ops * mult.energy_per_op;
            row.detections = o.detections;
            row.exit_histogram = o.exit_histogram;
            row.corrections = o.corrections;
            result.rows.push_back(row);
            acc_sum += o.accuracy;
            ops_sum += o.mean_ops;
            energy_sum += row.energy_pj;
            wall_by_policy[policy] += o.wall_seconds;
            ++cells;
          }
        }
      }
      MetricsRow avg;
      avg.policy = policy;
      avg.multiplier = mult_id;
      avg.fault_point = "avg";
      avg.is_average = true;
      avg.accuracy = acc_sum / static_cast<double>(cells);
      avg.mean_ops = ops_sum / static_cast<double>(cells);
      avg.energy_pj = energy_sum / static_cast<double>(cells);
      avg.exit_histogram.assign(static_cast<size_t>(golden.exit_count()), 0);
      result.rows.push_back(std::move(avg));
    }
  }
  // Averages after the data rows, in policy x multiplier order.
  std::stable_partition(result.rows.begin(), result.rows.end(),
                        [](const MetricsRow& r) { return !r.is_average; });
  result.csv = rows_to_csv(result.rows);
  result.summary = "grid: " + std::to_string(result.rows.size()) + " rows (pattern scale kappa = " +
                   format_double(ctx.eps.kappa) + ")\n";
  for (const MetricsRow& r : result.rows) {
    if (!r.is_average) continue;
    result.summary += "  " + r.policy + " / " + r.multiplier +
                      ": avg accuracy " + fmt("%.2f", r.accuracy) + "%, mean ops " +
                      fmt("%.0f", r.mean_ops) + ", wall " +
                      fmt("%.2f", wall_by_policy[r.policy]) + "s (informational)\n";
  }
  if (!cfg.out_path.empty()) write_file_bytes(cfg.out_path, result.csv.data(), result.csv.size());
  return result;
}

GridResult run_grid(const ExperimentConfig& cfg) {
  const ModelGraph golden = load_model(cfg.model_path);
  const Dataset test = load_data_spec(cfg.data_spec);
  return run_grid(cfg, golden, test);
}

namespace {

SweepResult run_sweep(const ExperimentConfig& cfg, const ModelGraph& golden, const Dataset& test,
                      std::vector<double> values, bool is_gamma) {
  if (values.empty()) throw std::invalid_argument("sweep: no values given");
  std::sort(values.begin(), values.end());
  const Dataset prepared = prepare_for_input(test, golden.input_shape);
  const SignatureStore store = build_signature_store(golden, cfg.eps.bins);
  const std::vector<double> base_alphas = compute_alphas(golden, cfg.eps);
  const EpsilonConfig eps0 = resolve_epsilon_config(cfg, golden, store);
  const MultiplierModel mult = parse_multiplier(cfg.multipliers.at(0));
  const FaultPoint fp = cfg.fault_points.at(0);
  const double fr = cfg.fault_rates.at(0);
  const uint64_t seed = cfg.seeds.at(0);

  SweepResult result;
  result.csv = std::string(is_gamma ? "gamma" : "alpha_scale") +
               ",accuracy,mean_ops,energy_pj,detections,exit_histogram,corrections\n";
  for (double v : values) {
    ExperimentConfig cell_cfg = cfg;
    EpsilonConfig eps = eps0;
    std::vector<double> alphas = base_alphas;
    if (is_gamma) {
      eps.gamma = v;
    } else {
      for (double& a : alphas) a = std::clamp(a * v, 0.0, 1.0);
    }
    CellContext ctx{cell_cfg, golden, prepared, store, alphas, eps};
    const CellOutcome o = eval_cell(ctx, "epsilon", mult, fp, fr, seed);
    SweepPoint p;
    p.value = v;
    p.accuracy = o.accuracy;
    p.mean_ops = o.mean_ops;
    p.detections = o.detections;
    p.exit_histogram = o.exit_histogram;
    p.corrections = o.corrections;
    result.points.push_back(p);
    result.csv += fmt("%g", v) + ',' + fmt("%.4f", o.accuracy) + ',' + fmt("%.3f", o.mean_ops) +
                  ',' + fmt("%.3f", o.mean_ops * mult.energy_per_op) + ',' +
                  std::to_string(o.detections) + ',' + histogram_cell(o.exit_histogram) + ',' +
                  std::to_string(o.corrections) + '\n';
  }
  if (!cfg.out_path.empty()) write_file_bytes(cfg.out_path, result.csv.data(), result.csv.size());
  return result;
}

}  // namespace

SweepResult sweep_gamma(const ExperimentConfig& cfg, const ModelGraph& golden,
                        const Dataset& test, std::vector<double> gammas) {
  return run_sweep(cfg, golden, test, std::move(gammas), true);
}

SweepResult sweep_alpha(const ExperimentConfig& cfg, const ModelGraph& golden,
                        const Dataset& test, std::vector<double> scales) {
  return run_sweep(cfg, golden, test, std::move(scales), false);
}

std::vector<EnergyRow> energy_proxy(const std::vector<MetricsRow>& rows) {
  std::vector<EnergyRow> out;
  std::vector<std::string> order;
  std::map<std::string, std::pair<double, size_t>> sums;
  for (const MetricsRow& r : rows) {
    if (r.is_average) continue;
    if (sums.find(r.policy) == sums.end()) order.push_back(r.policy);
    auto& s = sums[r.policy];
    s.first += r.energy_pj;
    s.second += 1;
  }
  if (order.empty()) throw std::invalid_argument("energy_proxy: no data rows");
  double peak = 0.0;
  for (const std::string& p : order) {
    const auto& s = sums[p];
    peak = std::max(peak, s.first / static_cast<double>(s.second));
  }
  for (const std::string& p : order) {
    const auto& s = sums[p];
    EnergyRow row;
    row.policy = p;
    row.mean_energy_pj = s.first / static_cast<double>(s.second);
    row.relative_percent = peak > 0.0 ? 100.0 * row.mean_energy_pj / peak : 100.0;
    out.push_back(row);
  }
  return out;
}

std::string energy_rows_to_csv(const std::vector<EnergyRow>& rows) {
  std::string csv = "policy,mean_energy_pj,relative_percent\n";
  for (const EnergyRow& r : rows) {
    csv += r.policy + ',' + fmt("%.3f", r.mean_energy_pj) + ',' +
           fmt("%.2f", r.relative_percent) + '\n';
  }
  return csv;
}

std::vector<std::vector<double>> collect_exit_confidences(const ModelGraph& model,
                                                          const Dataset& data,
                                                          const MultiplierModel& m, size_t limit) {
  const Dataset prepared = prepare_for_input(data, model.input_shape);
  const size_t n = limit == 0 ? prepared.size() : std::min(limit, prepared.size());
  std::vector<std::vector<double>> confidences(n);
  for (size_t i = 0; i < n; ++i) {
    const QuantTensor x = quantize_input(model, prepared.item(i));
    InferenceSession session(model, x, m);
    for (int e = 1; e <= model.exit_count(); ++e) {
      confidences[i].push_back(session.run_exit(e).confidence);
    }
  }
  return confidences;
}

double calibrate_gamma(const ModelGraph& model, const Dataset& data, const MultiplierModel& m,
                       double target_fraction, const std::vector<double>& candidates,
                       size_t limit) {
  if (candidates.empty()) throw std::invalid_argument("calibrate_gamma: no candidates");
  const auto confidences = collect_exit_confidences(model, data, m, limit);
  std::vector<double> sorted = candidates;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  for (double gamma : sorted) {
    size_t early = 0;
    for (const auto& conf : confidences) {
      for (size_t e = 0; e + 1 < conf.size(); ++e) {
        if (conf[e] > gamma) {
          ++early;
          break;
        }
      }
    }
    if (static_cast<double>(early) >= target_fraction * static_cast<double>(confidences.size())) {
      return gamma;
    }
  }
  return sorted.back();
}

ExperimentConfig config_from_json(const std::string& text) {
  const json doc = json::parse(text);
  ExperimentConfig cfg;
  cfg.model_path = doc.value("model", "");
  cfg.data_spec = doc.value("data", "");
  if (doc.contains("multipliers")) cfg.multipliers = doc["multipliers"].get<std::vector<std::string>>();
  if (doc.contains("policies")) cfg.policies = doc["policies"].get<std::vector<std::string>>();
  if (doc.contains("polarity")) cfg.polarity = polarity_from_name(doc["polarity"].get<std::string>());
  if (doc.contains("fault_points")) {
    cfg.fault_points.clear();
    for (const json& j : doc["fault_points"]) {
      cfg.fault_points.push_back(fault_point_from_name(j.get<std::string>()));
    }
  }
  if (doc.contains("fault_rates")) cfg.fault_rates = doc["fault_rates"].get<std::vector<double>>();
  if (doc.contains("seeds")) cfg.seeds = doc["seeds"].get<std::vector<uint64_t>>();
  if (doc.contains("bit_distribution")) {
    cfg.bits = bit_distribution_from_name(doc["bit_distribution"].get<std::string>());
  }
  if (doc.contains("mode")) cfg.mode = persistence_from_name(doc["mode"].get<std::string>());
  if (doc.contains("gamma")) cfg.eps.gamma = doc["gamma"].get<double>();
  if (doc.contains("m_offset")) cfg.eps.m_offset = doc["m_offset"].get<double>();
  if (doc.contains("bins")) cfg.eps.bins = doc["bins"].get<int>();
  if (doc.contains("kappa")) cfg.kappa_override = doc["kappa"].get<double>();
  if (doc.contains("inverse_threshold")) {
    cfg.eps.inverse_threshold = doc["inverse_threshold"].get<bool>();
  }
  if (doc.contains("nearest_valid")) {
    const std::string mode = doc["nearest_valid"].get<std::string>();
    if (mode == "snap-quartile") {
      cfg.eps.nearest_valid = NearestValidMode::SnapQuartile;
    } else if (mode == "clamp-iqr") {
      cfg.eps.nearest_valid = NearestValidMode::ClampIqr;
    } else {
      throw std::runtime_error("config: unknown nearest_valid mode '" + mode + "'");
    }
  }
  if (doc.contains("mend_gamma")) cfg.mend.gamma = doc["mend_gamma"].get<double>();
  if (doc.contains("mend_tau")) cfg.mend.tau = doc["mend_tau"].get<double>();
  if (doc.contains("out")) cfg.out_path = doc["out"].get<std::string>();
  if (doc.contains("limit")) cfg.eval_limit = doc["limit"].get<size_t>();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return config_from_json(std::string(bytes.begin(), bytes.end()));
}

}  // namespace epsilon
