#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epsilon/fault.hpp"
#include "epsilon/qnn.hpp"

namespace epsilon {

/// Classifier head attached after a backbone position. Runs on the activation
/// produced by backbone[attach_after]. The last layer must be a dense layer
/// with class_count outputs; it is evaluated in accumulator form so exit
/// logits keep full resolution. The final exit may have an empty head when
/// the backbone itself ends in the classifier dense layer.
struct ExitHead {
  int attach_after = 0;
  std::vector<LayerSpec> layers;
};

/// Multi-exit quantized model. Value semantics: experiments copy the golden
/// model per trial; a single copy serves one inference at a time (mitigation
/// rewrites weights mid-inference).
struct ModelGraph {
  std::string name;
  uint64_t seed = 0;
  int class_count = 0;
  std::vector<int> input_shape;
  double input_scale = 1.0;
  std::vector<LayerSpec> backbone;
  std::vector<ExitHead> exits;
  std::vector<FaultPlan> stuck_plans;  // hard-stuck plans re-asserted on writes

  int exit_count() const { return static_cast<int>(exits.size()); }

  /// Backbone indices of dense/conv layers, in depth order.
  std::vector<int> weighted_layers() const;
};

/// Throws if exit attachments are not strictly increasing, the final exit is
/// not attached after the last backbone layer, a head output width differs
/// from class_count, or an empty head appears on a non-final exit.
void validate_model(const ModelGraph& model);

/// View of the stored 8-bit weights of backbone layer l.
std::span<const int8_t> get_layer_weights(const ModelGraph& model, int layer_index);

/// Replaces the stored weights of backbone layer l; any hard-stuck plans on
/// that layer are re-asserted afterwards, so stuck bits survive the write.
void update_layer(ModelGraph& model, int layer_index, std::span<const int8_t> weights);

enum class FaultPoint { FP1, FP2, FP3, FP4 };

const char* fault_point_name(FaultPoint fp);
FaultPoint fault_point_from_name(const std::string& name);

/// FP4 = first weighted layer, FP1 = deepest weighted layer feeding the final
/// exit, FP2/FP3 evenly spaced between (ties toward the shallower index).
/// Construction fails for models with fewer than 4 weighted layers.
struct FaultPointMap {
  std::array<int, 4> fp_to_layer{};  // indexed by FaultPoint enum order

  int layer_for(FaultPoint fp) const { return fp_to_layer[static_cast<size_t>(fp)]; }
};

FaultPointMap make_fault_point_map(const ModelGraph& model);

struct ExitResult {
  AccumTensor logits;
  std::vector<double> probabilities;
  double confidence = 0.0;
  int prediction = 0;
  uint64_t ops_new = 0;  // multiplier ops executed by this call alone
};

/// One inference over one model copy. Backbone activations are cached so a
/// cascade of exits pays for each backbone prefix exactly once. Holds
/// references: model and multiplier must outlive the session.
class InferenceSession {
 public:
  InferenceSession(const ModelGraph& model, QuantTensor input, const MultiplierModel& mult);

  /// Runs exit i (1-based), reusing any backbone prefix already computed.
  ExitResult run_exit(int exit_index);

  uint64_t total_ops() const { return total_ops_; }

 private:
  const QuantTensor& backbone_activation(int position);

  const ModelGraph& model_;
  const MultiplierModel& mult_;
  QuantTensor input_;
  std::vector<std::optional<QuantTensor>> cache_;
  uint64_t total_ops_ = 0;
};

/// Convenience single-exit forward (fresh session).
ExitResult forward_exit(const ModelGraph& model, const QuantTensor& x, int exit_index,
                        const MultiplierModel& m);

/// Quantizes a real-valued input vector onto the model's input grid.
QuantTensor quantize_input(const ModelGraph& model, std::span<const float> values);

/// Model file pair: <stem>.json (topology, scales as decimal strings, block
/// offsets) plus <stem>.w8 (raw LE int8 weight blocks and int32 bias blocks
/// in declaration order). Round-trips byte-exactly.
void save_model(const ModelGraph& model, const std::string& json_path);
ModelGraph load_model(const std::string& json_path);

/// Small fully-connected multi-exit model with seeded random weights and an
/// exit after every hidden layer. Test/bench substrate, not a trained model.
ModelGraph make_random_quant_mlp(const std::vector<int>& widths, int class_count, uint64_t seed);

}  // namespace epsilon
