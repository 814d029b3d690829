// epsilon-lab: train/quantize/sign/inject and run fault-resilience
// experiment grids over approximate multi-exit quantized models.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epsilon/baselines.hpp"
#include "epsilon/dataset.hpp"
#include "epsilon/detector.hpp"
#include "epsilon/fault.hpp"
#include "epsilon/harness.hpp"
#include "epsilon/model.hpp"
#include "epsilon/multiplier.hpp"
#include "epsilon/signature.hpp"
#include "epsilon/train.hpp"
#include "epsilon/util.hpp"

namespace {

using namespace epsilon;

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  size_t start = 0;
  while (start <= s.size()) {
    const size_t pos = s.find(',', start);
    const std::string tok = s.substr(start, pos - start);
    if (!tok.empty()) out.push_back(std::stod(tok));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

struct CommonFlags {
  std::string config_path;
  std::string model;
  std::string data;
  std::string mult;
  std::string policy;
  std::string fp;
  std::string fr;
  std::string polarity;
  std::string seed;
  std::string mode;
  std::string bits;
  double gamma = -1.0;
  double m_offset = -1.0;
  int bins = -1;
  double kappa = -1.0;
  std::string out;
  size_t limit = 0;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON experiment config; flags override it");
  cmd->add_option("--model", f.model, "quantized model .json path");
  cmd->add_option("--data", f.data,
                  "data spec: idx:<imgs>,<lbls> | digits:<n>[:seed] | "
                  "blobs:<n>:<c>[:seed] | spiral:<n>:<c>[:seed]");
  cmd->add_option("--mult", f.mult, "multiplier list, e.g. exact,trunc2,trunc4");
  cmd->add_option("--policy", f.policy, "policy list from {epsilon,vanilla,mend}");
  cmd->add_option("--fp", f.fp, "fault point list, e.g. FP1,FP4");
  cmd->add_option("--fr", f.fr, "fault rate percent list, e.g. 10,30,50");
  cmd->add_option("--polarity", f.polarity, "SA0 or SA1");
  cmd->add_option("--seed", f.seed, "trial seed list");
  cmd->add_option("--mode", f.mode, "fault persistence: one-shot or hard-stuck");
  cmd->add_option("--bits", f.bits, "bit distribution: uniform, lsb-geometric or sign-bit");
  cmd->add_option("--gamma", f.gamma, "exit confidence threshold");
  cmd->add_option("--m-offset", f.m_offset, "threshold offset factor m");
  cmd->add_option("--bins", f.bins, "sparsity histogram bins");
  cmd->add_option("--kappa", f.kappa, "pattern-score scale (omit for auto-calibration)");
  cmd->add_option("--out", f.out, "output CSV path");
  cmd->add_option("--limit", f.limit, "cap evaluated items per cell");
}

ExperimentConfig build_config(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) cfg = load_config(f.config_path);
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    size_t start = 0;
    while (start <= s.size()) {
      const size_t pos = s.find(',', start);
      const std::string tok = s.substr(start, pos - start);
      if (!tok.empty()) parts.push_back(tok);
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return parts;
  };
  if (!f.model.empty()) cfg.model_path = f.model;
  if (!f.data.empty()) cfg.data_spec = f.data;
  if (!f.mult.empty()) cfg.multipliers = split(f.mult);
  if (!f.policy.empty()) cfg.policies = split(f.policy);
  if (!f.fp.empty()) {
    cfg.fault_points.clear();
    for (const auto& name : split(f.fp)) cfg.fault_points.push_back(fault_point_from_name(name));
  }
  if (!f.fr.empty()) cfg.fault_rates = parse_double_list(f.fr);
  if (!f.polarity.empty()) cfg.polarity = polarity_from_name(f.polarity);
  if (!f.seed.empty()) {
    cfg.seeds.clear();
    for (const auto& s : split(f.seed)) cfg.seeds.push_back(std::stoull(s));
  }
  if (!f.mode.empty()) cfg.mode = persistence_from_name(f.mode);
  if (!f.bits.empty()) cfg.bits = bit_distribution_from_name(f.bits);
  if (f.gamma >= 0.0) cfg.eps.gamma = f.gamma;
  if (f.m_offset >= 0.0) cfg.eps.m_offset = f.m_offset;
  if (f.bins >= 0) cfg.eps.bins = f.bins;
  if (f.kappa >= 0.0) cfg.kappa_override = f.kappa;
  if (!f.out.empty()) cfg.out_path = f.out;
  if (f.limit > 0) cfg.eval_limit = f.limit;
  return cfg;
}

int cmd_train(const std::string& data_spec, const std::string& arch, int epochs, double lr,
              uint64_t seed, int classes, const std::string& out) {
  Dataset train = load_data_spec(data_spec);
  if (classes > 0) train.class_count = classes;
  FloatModel model;
  if (arch == "cnn") {
    model = make_float_cnn(train.class_count, seed);
  } else if (arch.rfind("mlp", 0) == 0) {
    // mlp or mlp:<w1>-<w2>-...
    std::vector<int> widths = {train.item_size()};
    if (arch.size() > 4) {
      size_t start = 4;
      while (start <= arch.size()) {
        const size_t pos = arch.find('-', start);
        widths.push_back(std::stoi(arch.substr(start, pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
      }
    } else {
      widths.push_back(32);
      widths.push_back(16);
    }
    model = make_float_mlp(widths, train.class_count, seed);
  } else {
    std::cerr << "unknown arch '" << arch << "' (use cnn, mlp or mlp:<w1>-<w2>)\n";
    return 1;
  }
  const TrainReport report = train_multiexit(model, train, epochs, lr, seed);
  printf("trained %s on %zu items, %d epochs\n", model.name.c_str(), train.size(), epochs);
  for (size_t e = 0; e < report.exit_train_accuracy.size(); ++e) {
    printf("  exit %zu train accuracy: %.2f%%\n", e + 1, 100.0 * report.exit_train_accuracy[e]);
  }
  save_float_model(model, out);
  printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_quantize(const std::string& model_path, const std::string& data_spec, size_t calib_limit,
                 const std::string& out) {
  const FloatModel fm = load_float_model(model_path);
  Dataset calib = load_data_spec(data_spec);
  if (calib_limit > 0 && calib.size() > calib_limit) calib = calib.take(calib_limit, "calib");
  const QuantizeResult qr = quantize(fm, calib);
  for (const std::string& w : qr.warnings) std::cerr << "warning: " << w << "\n";
  const double agreement = quantized_agreement(fm, qr.model, calib, 500);
  printf("quantized %s; float/int8 top-1 agreement on calibration: %.1f%%\n",
         fm.name.c_str(), 100.0 * agreement);
  save_model(qr.model, out);
  printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_sign(const std::string& model_path, int bins, const std::string& out) {
  const ModelGraph model = load_model(model_path);
  const SignatureStore store = build_signature_store(model, bins);
  save_signature_store(store, out);
  printf("wrote %zu layer signatures (B=%d) to %s\n", store.records.size(), bins, out.c_str());
  return 0;
}

int cmd_inject(const CommonFlags& f, const std::string& out_model, const std::string& out_plan) {
  ModelGraph model = load_model(f.model);
  const FaultPoint fp = fault_point_from_name(f.fp.empty() ? "FP1" : f.fp);
  const double fr = f.fr.empty() ? 10.0 : std::stod(f.fr);
  const Polarity pol = polarity_from_name(f.polarity.empty() ? "SA1" : f.polarity);
  const BitDistribution bits = bit_distribution_from_name(f.bits.empty() ? "uniform" : f.bits);
  const uint64_t seed = f.seed.empty() ? 1 : std::stoull(f.seed);
  const Persistence mode = persistence_from_name(f.mode.empty() ? "one-shot" : f.mode);
  const FaultPlan plan = make_plan(model, fp, fr, pol, bits, seed, mode);
  apply_plan(model, plan);
  if (!out_plan.empty()) {
    save_plan(plan, out_plan);
    printf("wrote plan (%zu faults) to %s\n", plan.entries.size(), out_plan.c_str());
  }
  if (!out_model.empty()) {
    save_model(model, out_model);
    printf("wrote faulted model to %s\n", out_model.c_str());
  }
  return 0;
}

int cmd_profile_mult(const std::string& mult_list, const std::string& save_path) {
  printf("%-10s %-10s %12s %14s %12s %12s\n", "id", "kind", "energy_pJ", "mean_abs_err",
         "max_abs_err", "error_rate");
  size_t start = 0;
  while (start <= mult_list.size()) {
    const size_t pos = mult_list.find(',', start);
    const std::string id = mult_list.substr(start, pos - start);
    if (!id.empty()) {
      const MultiplierModel m = parse_multiplier(id);
      const ErrorProfile p = error_profile(m);
      const char* kind = m.kind == MultKind::Exact ? "exact"
                         : m.kind == MultKind::Truncated ? "truncated"
                                                         : "table";
      printf("%-10s %-10s %12.3f %14.5f %12.0f %12.5f\n", m.id.c_str(), kind, m.energy_per_op,
             p.mean_abs_error, p.max_abs_error, p.error_rate);
      if (!save_path.empty()) save_table(m, save_path);
    }
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fault-resilience lab for approximate multi-exit quantized networks"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a float multi-exit model");
  std::string train_data, train_arch = "cnn", train_out = "model_float.json";
  int train_epochs = 8, train_classes = 0;
  double train_lr = 0.05;
  uint64_t train_seed = 1;
  train_cmd->add_option("--data", train_data, "training data spec")->required();
  train_cmd->add_option("--arch", train_arch, "cnn | mlp | mlp:<w1>-<w2>");
  train_cmd->add_option("--epochs", train_epochs);
  train_cmd->add_option("--lr", train_lr);
  train_cmd->add_option("--seed", train_seed);
  train_cmd->add_option("--classes", train_classes, "override class count");
  train_cmd->add_option("--out", train_out);

  // quantize
  auto* quant_cmd = app.add_subcommand("quantize", "post-training quantization to int8");
  std::string quant_model, quant_data, quant_out = "model_q.json";
  size_t quant_limit = 512;
  quant_cmd->add_option("--model", quant_model, "float model .json")->required();
  quant_cmd->add_option("--data", quant_data, "calibration data spec")->required();
  quant_cmd->add_option("--calib-limit", quant_limit, "max calibration items");
  quant_cmd->add_option("--out", quant_out);

  // sign
  auto* sign_cmd = app.add_subcommand("sign", "generate the signature store");
  std::string sign_model, sign_out = "signatures.json";
  int sign_bins = 16;
  sign_cmd->add_option("--model", sign_model, "quantized model .json")->required();
  sign_cmd->add_option("--bins", sign_bins);
  sign_cmd->add_option("--out", sign_out);

  // inject
  auto* inject_cmd = app.add_subcommand("inject", "inject a stuck-at fault plan");
  CommonFlags inject_flags;
  std::string inject_out_model, inject_out_plan = "plan.json";
  add_common_flags(inject_cmd, inject_flags);
  inject_cmd->add_option("--out-model", inject_out_model, "write the faulted model here");
  inject_cmd->add_option("--out-plan", inject_out_plan, "write the plan JSON here");

  // run
  auto* run_cmd = app.add_subcommand("run", "run the experiment grid");
  CommonFlags run_flags;
  add_common_flags(run_cmd, run_flags);

  // sweep-gamma
  auto* sg_cmd = app.add_subcommand("sweep-gamma", "accuracy vs confidence threshold");
  CommonFlags sg_flags;
  std::string sg_gammas = "0.3,0.5,0.7,0.9";
  add_common_flags(sg_cmd, sg_flags);
  sg_cmd->add_option("--gammas", sg_gammas, "comma-separated gamma values");

  // sweep-alpha
  auto* sa_cmd = app.add_subcommand("sweep-alpha", "accuracy vs importance scaling");
  CommonFlags sa_flags;
  std::string sa_scales = "0,0.5,1";
  add_common_flags(sa_cmd, sa_flags);
  sa_cmd->add_option("--scales", sa_scales, "comma-separated alpha scale factors");

  // profile-mult
  auto* pm_cmd = app.add_subcommand("profile-mult", "exhaustive multiplier error profiles");
  std::string pm_mults = "exact,trunc2,trunc4", pm_save;
  pm_cmd->add_option("--mult", pm_mults);
  pm_cmd->add_option("--save", pm_save, "also save the (last) multiplier as a LUT file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      return cmd_train(train_data, train_arch, train_epochs, train_lr, train_seed, train_classes,
                       train_out);
    }
    if (quant_cmd->parsed()) return cmd_quantize(quant_model, quant_data, quant_limit, quant_out);
    if (sign_cmd->parsed()) return cmd_sign(sign_model, sign_bins, sign_out);
    if (inject_cmd->parsed()) return cmd_inject(inject_flags, inject_out_model, inject_out_plan);
    if (run_cmd->parsed()) {
      const GridResult r = run_grid(build_config(run_flags));
      std::cout << r.summary;
      if (build_config(run_flags).out_path.empty()) std::cout << r.csv;
      return 0;
    }
    if (sg_cmd->parsed()) {
      const ExperimentConfig cfg = build_config(sg_flags);
      const ModelGraph golden = load_model(cfg.model_path);
      const Dataset test = load_data_spec(cfg.data_spec);
      const SweepResult r = sweep_gamma(cfg, golden, test, parse_double_list(sg_gammas));
      if (cfg.out_path.empty()) std::cout << r.csv;
      return 0;
    }
    if (sa_cmd->parsed()) {
      const ExperimentConfig cfg = build_config(sa_flags);
      const ModelGraph golden = load_model(cfg.model_path);
      const Dataset test = load_data_spec(cfg.data_spec);
      const SweepResult r = sweep_alpha(cfg, golden, test, parse_double_list(sa_scales));
      if (cfg.out_path.empty()) std::cout << r.csv;
      return 0;
    }
    if (pm_cmd->parsed()) return cmd_profile_mult(pm_mults, pm_save);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
