#include "epsilon/detector.hpp"

#include <stdexcept>

namespace epsilon {

EpsilonResult epsilon_infer(ModelGraph& model, const SignatureStore& signatures,
                            std::span<const double> alphas, const EpsilonConfig& config,
                            const QuantTensor& x, const MultiplierModel& m) {
  config.validate();
  const std::vector<int> weighted = model.weighted_layers();
  if (alphas.size() != weighted.size()) {
    throw std::invalid_argument("epsilon_infer: got " + std::to_string(alphas.size()) +
                                " alphas for " + std::to_string(weighted.size()) +
                                " weighted layers");
  }

  EpsilonResult result;
  InferenceSession session(model, x, m);

  // Stage 1: confidence-gated exit cascade.
  const int n_exits = model.exit_count();
  ExitResult deepest;
  for (int i = 1; i <= n_exits; ++i) {
    deepest = session.run_exit(i);
    result.trace.exit_confidences.push_back(deepest.confidence);
    if (deepest.confidence > config.gamma) {
      result.prediction = deepest.prediction;
      result.trace.exit_taken = i;
      result.trace.total_ops = session.total_ops();
      return result;
    }
  }

  // Stage 2: statistical pattern analysis and mitigation.
  result.trace.stage2_ran = true;
  for (size_t ord = 0; ord < weighted.size(); ++ord) {
    const int layer = weighted[ord];
    const LayerSignature* sig = signatures.find(layer);
    if (sig == nullptr) {
      throw std::runtime_error("epsilon_infer: missing signature for layer " +
                               std::to_string(layer));
    }
    LayerCheck check;
    check.layer = layer;
    check.threshold = detection_threshold(*sig, alphas[ord], config);
    const std::span<const int8_t> w = get_layer_weights(model, layer);
    check.raw_l1 = pattern_deviation(w, *sig, sig->bins, 1.0);
    check.score = config.kappa * check.raw_l1;
    if (check.score > check.threshold) {
      result.fault_detected = true;
      std::vector<int8_t> corrected(w.begin(), w.end());
      check.corrected = mitigate_layer(corrected, *sig, check.threshold, config);
      if (check.corrected > 0) {
        update_layer(model, layer, corrected);
        result.trace.mitigated = true;
      }
    }
    result.trace.checks.push_back(check);
  }

  // Final prediction from the deepest exit on the (possibly corrected) model.
  result.trace.exit_taken = n_exits;
  if (result.trace.mitigated) {
    InferenceSession rerun(model, x, m);
    const ExitResult final = rerun.run_exit(n_exits);
    result.prediction = final.prediction;
    result.trace.total_ops = session.total_ops() + rerun.total_ops();
  } else {
    // Weights unchanged: stage 1's deepest-exit logits are already the fresh
    // forward's logits.
    result.trace.rerun_reused = true;
    result.prediction = deepest.prediction;
    result.trace.total_ops = session.total_ops();
  }
  return result;
}

}  // namespace epsilon
