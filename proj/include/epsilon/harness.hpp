#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epsilon/baselines.hpp"
#include "epsilon/dataset.hpp"
#include "epsilon/detector.hpp"
#include "epsilon/fault.hpp"
#include "epsilon/model.hpp"
#include "epsilon/signature.hpp"

namespace epsilon {

struct ExperimentConfig {
  std::string model_path;
  std::string data_spec;
  std::vector<std::string> multipliers = {"trunc2"};
  std::vector<std::string> policies = {"epsilon", "vanilla", "mend"};
  Polarity polarity = Polarity::SA1;
  std::vector<FaultPoint> fault_points = {FaultPoint::FP1, FaultPoint::FP2, FaultPoint::FP3,
                                          FaultPoint::FP4};
  std::vector<double> fault_rates = {10.0, 30.0, 50.0};  // percent; 0 = faultless control
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  BitDistribution bits = BitDistribution::Uniform;
  Persistence mode = Persistence::OneShot;
  EpsilonConfig eps;
  // kappa <= 0 selects the calibration recipe (single sign-bit flip in any
  // layer scores above that layer's threshold).
  double kappa_override = 0.0;
  MendConfig mend{0.5, 1.5};
  std::string out_path;
  size_t eval_limit = 0;  // 0 = whole test split
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);

struct MetricsRow {
  std::string policy;
  std::string multiplier;
  std::string fault_point;  // "FP1".."FP4", "none" for FR 0, or "avg"
  double fault_rate = 0.0;
  uint64_t seed = 0;
  double accuracy = 0.0;  // percent
  double mean_ops = 0.0;  // multiplier ops per inference
  double energy_pj = 0.0; // mean_ops * energy_per_op
  uint64_t detections = 0;
  std::vector<uint64_t> exit_histogram;  // prediction source, one slot per exit
  uint64_t corrections = 0;
  bool is_average = false;
};

std::string rows_to_csv(const std::vector<MetricsRow>& rows);

struct GridResult {
  std::vector<MetricsRow> rows;
  std::string csv;
  std::string summary;  // human-readable; carries wall-clock, never asserted on
};

/// Full experiment grid: policy x multiplier x fault point x fault rate x
/// seed, one model copy per cell, identical fault plans across policies and
/// multipliers, plus a per-(policy, multiplier) average row. Byte-identical
/// CSV for identical configs. Writes cfg.out_path when set.
GridResult run_grid(const ExperimentConfig& cfg, const ModelGraph& golden, const Dataset& test);

/// Loads the model and data named by the config, then runs the grid.
GridResult run_grid(const ExperimentConfig& cfg);

struct SweepPoint {
  double value = 0.0;  // gamma or alpha scale
  double accuracy = 0.0;
  double mean_ops = 0.0;
  uint64_t detections = 0;
  std::vector<uint64_t> exit_histogram;
  uint64_t corrections = 0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::string csv;
};

/// Varies the confidence threshold on a fixed faulted cell (first configured
/// fault point and rate, first seed). Values are sorted ascending.
SweepResult sweep_gamma(const ExperimentConfig& cfg, const ModelGraph& golden,
                        const Dataset& test, std::vector<double> gammas);

/// Scales every layer importance factor by each factor (clamped to [0, 1]).
SweepResult sweep_alpha(const ExperimentConfig& cfg, const ModelGraph& golden,
                        const Dataset& test, std::vector<double> scales);

struct EnergyRow {
  std::string policy;
  double mean_energy_pj = 0.0;
  double relative_percent = 0.0;  // vs. the peak policy mean
};

/// Normalizes per-policy mean energy against the maximum cell.
std::vector<EnergyRow> energy_proxy(const std::vector<MetricsRow>& rows);
std::string energy_rows_to_csv(const std::vector<EnergyRow>& rows);

/// Read-only confidence of every exit for each item; the model is never
/// mutated. Basis for exit-depth-vs-gamma analysis on a fixed model.
std::vector<std::vector<double>> collect_exit_confidences(const ModelGraph& model,
                                                          const Dataset& data,
                                                          const MultiplierModel& m,
                                                          size_t limit = 0);

/// Largest gamma from `candidates` for which at least `target_fraction` of
/// items exit before the deepest exit; falls back to the smallest candidate.
double calibrate_gamma(const ModelGraph& model, const Dataset& data, const MultiplierModel& m,
                       double target_fraction, const std::vector<double>& candidates,
                       size_t limit = 0);

}  // namespace epsilon
