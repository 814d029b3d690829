#include "epsilon/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace epsilon {

void MendConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("MendConfig: gamma must be in (0, 1)");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("MendConfig: tau must be > 0");
}

VanillaResult vanilla_infer(const ModelGraph& model, const QuantTensor& x,
                            const MultiplierModel& m) {
  InferenceSession session(model, x, m);
  const ExitResult r = session.run_exit(model.exit_count());
  return {r.prediction, session.total_ops()};
}

double predictive_entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

MendResult mend_like_infer(const ModelGraph& model, const MendConfig& config,
                           const QuantTensor& x, const MultiplierModel& m) {
  config.validate();
  InferenceSession session(model, x, m);
  MendResult result;
  const int n_exits = model.exit_count();
  for (int i = 1; i <= n_exits; ++i) {
    const ExitResult r = session.run_exit(i);
    const double entropy = predictive_entropy(r.probabilities);
    result.prediction = r.prediction;
    result.exit_taken = i;
    if (r.confidence > config.gamma && entropy < config.tau) {
      result.op_count = session.total_ops();
      return result;
    }
  }
  result.flagged = true;
  result.op_count = session.total_ops();
  return result;
}

}  // namespace epsilon
