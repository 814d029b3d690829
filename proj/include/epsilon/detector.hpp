#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "epsilon/model.hpp"
#include "epsilon/signature.hpp"

namespace epsilon {

struct LayerCheck {
  int layer = 0;       // backbone index
  double raw_l1 = 0.0; // pattern distance before kappa scaling
  double score = 0.0;  // kappa * raw_l1
  double threshold = 0.0;
  int corrected = 0;
};

struct InferTrace {
  std::vector<double> exit_confidences;  // one per exit evaluated, in order
  int exit_taken = 0;                    // 1-based; N when stage 2 decided
  bool stage2_ran = false;
  bool mitigated = false;
  bool rerun_reused = false;  // stage-2 final used stage-1's cached logits
  std::vector<LayerCheck> checks;
  uint64_t total_ops = 0;
};

struct EpsilonResult {
  int prediction = 0;
  bool fault_detected = false;
  InferTrace trace;
};

/// Dual-stage inference. Stage 1 walks the exits in order and returns at the
/// first confidence strictly above gamma, leaving the model untouched. Stage
/// 2 (all exits at or below gamma) scores every weighted layer's sparsity
/// pattern against its signature; layers scoring strictly above their
/// threshold are flagged and mitigated, corrected weights are written back,
/// and the deepest exit is re-evaluated on the possibly corrected model.
/// When no layer was corrected the re-evaluation reuses stage 1's cached
/// activations, which are bit-identical to a fresh forward.
///
/// Requires one signature and one alpha per weighted backbone layer. The
/// model copy must not be shared with another inference in flight.
EpsilonResult epsilon_infer(ModelGraph& model, const SignatureStore& signatures,
                            std::span<const double> alphas, const EpsilonConfig& config,
                            const QuantTensor& x, const MultiplierModel& m);

}  // namespace epsilon
