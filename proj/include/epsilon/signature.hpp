#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "epsilon/model.hpp"

namespace epsilon {

/// Reference statistics of one layer's stored 8-bit weights. Signatures live
/// in the integer weight domain, where stuck-at faults manifest; a layer's
/// own unmodified weights always score exactly zero against its signature.
struct LayerSignature {
  double mu = 0.0;     // mean
  double sigma = 0.0;  // population standard deviation
  double q25 = 0.0;
  double q50 = 0.0;
  double q75 = 0.0;
  int bins = 16;
  // rho[0] = fraction of exactly-zero weights; rho[1..B] = fraction of all
  // weights falling in each equal-width bin over [-128, 128), zeros excluded.
  // Entries sum to 1 for nonempty layers.
  std::vector<double> rho;
};

/// Two-pass mean/std, linearly interpolated quartiles (h = (n-1)p on the
/// sorted array), and the zero-plus-binned sparsity pattern.
LayerSignature compute_signature(std::span<const int8_t> weights, int bins);

struct ImportanceFactors {
  double beta_p = 1.0;   // positional importance, 1.0 at the first weighted layer
  double gamma_s = 1.0;  // structural importance
  double alpha = 1.0;    // beta_p * gamma_s
};

struct TypeWeights {
  double conv2d = 1.0;
  double dense = 0.8;
  double exit_head_dense = 0.6;  // dense layers that terminate an exit
};

enum class NearestValidMode { SnapQuartile, ClampIqr };
enum class TieBreak { SmallerMagnitude, LowerValue };

struct EpsilonConfig {
  double gamma = 0.5;    // exit confidence threshold
  double m_offset = 3.0; // threshold offset factor
  int bins = 16;
  double kappa = 1.0;    // pattern-score scale
  TieBreak tie_break = TieBreak::SmallerMagnitude;
  NearestValidMode nearest_valid = NearestValidMode::SnapQuartile;
  // Off by default: score important layers with a tighter threshold
  // (m - alpha) * sigma instead of (m + alpha) * sigma.
  bool inverse_threshold = false;
  TypeWeights type_weights;

  void validate() const;
};

/// beta_p falls linearly from 1.0 at the first weighted layer to 0.2 at the
/// last (1.0 when L == 1); gamma_s = type_weight(kind) * clamp(1 -
/// zero_fraction, 0.1, 1.0). A dense layer that terminates an exit takes the
/// exit-head type weight.
ImportanceFactors compute_importance(const ModelGraph& model, int layer_index,
                                     const EpsilonConfig& config);

/// Importance factors for every weighted backbone layer, in depth order.
std::vector<double> compute_alphas(const ModelGraph& model, const EpsilonConfig& config);

/// T = (m + alpha) * sigma.
double detection_threshold(const LayerSignature& sig, double alpha, double m);

/// Threshold under the config's direction flag.
double detection_threshold(const LayerSignature& sig, double alpha, const EpsilonConfig& config);

/// kappa * L1 distance between the reference sparsity pattern and the one
/// recomputed from the current weights. Zero iff the histograms coincide.
double pattern_deviation(std::span<const int8_t> current, const LayerSignature& reference,
                         int bins, double kappa);

/// Nearest valid value per the configured mode. Snap-quartile returns the
/// rounded quartile minimizing |w - v| (distance ties go to the smaller |v|,
/// magnitude ties to the lower value); clamp-iqr clamps w into
/// [q25 - 1.5*IQR, q75 + 1.5*IQR]. Results land in [-128, 127].
int8_t find_nearest_valid(int8_t w, const LayerSignature& sig, NearestValidMode mode,
                          TieBreak tie_break);

/// Replaces every weight with |w - mu| > T (strict) via find_nearest_valid.
/// Returns the number of corrections.
int mitigate_layer(std::span<int8_t> weights, const LayerSignature& sig, double threshold,
                   const EpsilonConfig& config);

/// exp(-alpha^2 / (2p)). Requires alpha in [0, 1], p in (0, 1].
double missed_detection_bound(double alpha, double p);

/// min(1, (1 - gamma)^N + exp(-alpha^2 / (2p))).
///
/// Note: for gamma = 0.7, N = 4, alpha = 0.7, p = 0.5 this evaluates to
/// 0.0081 + e^-0.49 ~= 0.62073. A figure of ~0.1855 is sometimes quoted for
/// the same inputs; it is inconsistent with the formula as written, and this
/// implementation returns the direct evaluation.
double error_bound(double gamma, int n_exits, double alpha, double p);

struct SignatureRecord {
  int layer = 0;  // backbone index
  LayerSignature sig;
};

/// Per-layer signature records for the weighted backbone layers, depth order.
struct SignatureStore {
  std::vector<SignatureRecord> records;

  const LayerSignature* find(int layer) const;
};

SignatureStore build_signature_store(const ModelGraph& model, int bins);

/// JSON list of {layer, mu, sigma, q25, q50, q75, bins, rho}; numeric fields
/// round-trip exactly.
std::string store_to_json(const SignatureStore& store);
SignatureStore store_from_json(const std::string& text);
void save_signature_store(const SignatureStore& store, const std::string& path);
SignatureStore load_signature_store(const std::string& path);

/// Smallest kappa (times a safety margin) for which a single sign-bit flip
/// in any signed layer scores above that layer's threshold. A sign-bit flip
/// moves one weight across bins, shifting the pattern by 2/n in L1, so a
/// layer of n weights needs kappa > T * n / 2.
double calibrate_kappa(const ModelGraph& model, const SignatureStore& store,
                       const EpsilonConfig& config, double margin = 1.25);

}  // namespace epsilon
