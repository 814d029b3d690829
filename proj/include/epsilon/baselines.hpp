#pragma once

#include <cstdint>
#include <span>

#include "epsilon/model.hpp"

namespace epsilon {

struct VanillaResult {
  int prediction = 0;
  uint64_t op_count = 0;
};

/// Single-exit baseline: full backbone plus the final exit head, every time.
/// No detection, no mitigation; op count is the same for every input.
VanillaResult vanilla_infer(const ModelGraph& model, const QuantTensor& x,
                            const MultiplierModel& m);

struct MendConfig {
  double gamma = 0.5;  // confidence threshold
  double tau = 1.0;    // predictive-entropy threshold, nats

  void validate() const;
};

struct MendResult {
  int prediction = 0;
  bool flagged = false;  // no exit met both thresholds
  int exit_taken = 0;    // 1-based
  uint64_t op_count = 0;
};

/// Simplified dual-threshold multi-exit baseline: exits at the first head
/// with confidence > gamma and predictive entropy < tau; otherwise returns
/// the deepest prediction flagged. Never repairs weights.
MendResult mend_like_infer(const ModelGraph& model, const MendConfig& config,
                           const QuantTensor& x, const MultiplierModel& m);

/// H = -sum p ln p in nats; zero-probability terms contribute zero.
double predictive_entropy(std::span<const double> probabilities);

}  // namespace epsilon
