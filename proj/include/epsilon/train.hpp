#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "epsilon/dataset.hpp"
#include "epsilon/model.hpp"

namespace epsilon {

/// Real-valued twin of LayerSpec; topology maps 1:1 onto a ModelGraph layer.
struct FloatLayer {
  LayerKind kind = LayerKind::Relu;
  std::string name;
  int in_width = 0, out_width = 0;
  int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, padding = 0;
  int pool = 2, pool_stride = 0;
  std::vector<float> weights;
  std::vector<float> bias;

  bool has_weights() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
};

struct FloatExit {
  int attach_after = 0;
  std::vector<FloatLayer> layers;
};

struct FloatModel {
  std::string name;
  uint64_t seed = 0;
  int class_count = 0;
  std::vector<int> input_shape;
  std::vector<FloatLayer> backbone;
  std::vector<FloatExit> exits;

  int exit_count() const { return static_cast<int>(exits.size()); }
};

/// Default desk-scale 4-exit CNN on 1x32x32 input: conv 1->8 3x3, conv 8->16
/// 3x3 (stride 2), dense 256->64, dense 64->classes, one exit per weighted
/// layer (pool/flatten + dense heads, empty final head).
FloatModel make_float_cnn(int class_count, uint64_t seed);

/// Fully-connected multi-exit model; exit after each hidden layer.
FloatModel make_float_mlp(const std::vector<int>& widths, int class_count, uint64_t seed);

/// Logits of every exit for one input, deepest last.
std::vector<std::vector<float>> float_exit_logits(const FloatModel& model,
                                                  std::span<const float> x);

int float_predict(const FloatModel& model, std::span<const float> x);

/// Top-1 accuracy of one exit (default: deepest) over a dataset.
double float_accuracy(const FloatModel& model, const Dataset& data, int exit_index = 0);

/// Per-layer gradient buffers mirroring the model layout.
struct LayerGrad {
  std::vector<float> dw;
  std::vector<float> db;
};

struct ModelGrads {
  std::vector<LayerGrad> backbone;
  std::vector<std::vector<LayerGrad>> exits;
};

/// Sum of per-exit cross-entropies (uniform exit weights) for one sample;
/// fills grads when non-null.
double multiexit_loss(const FloatModel& model, std::span<const float> x, int label,
                      ModelGrads* grads);

struct TrainReport {
  std::vector<double> epoch_losses;          // mean summed-exit CE per sample
  std::vector<double> exit_train_accuracy;   // per exit, after the last epoch
};

/// Plain mini-batch SGD on the joint multi-exit loss. Deterministic per
/// seed. Throws if the loss goes non-finite, naming the epoch.
TrainReport train_multiexit(FloatModel& model, const Dataset& train, int epochs, double lr,
                            uint64_t seed, int batch_size = 32);

struct QuantizeResult {
  ModelGraph model;
  std::vector<std::string> warnings;
};

/// Post-training quantization with per-tensor symmetric scales: weight scale
/// = max|w|/127, activation scales from calibration max|a|/127 per layer
/// output. All-zero tensors get scale 1 and a warning.
QuantizeResult quantize(const FloatModel& model, const Dataset& calibration);

/// Fraction of items where the quantized model's deepest-exit prediction
/// matches the float model's, using the exact multiplier.
double quantized_agreement(const FloatModel& fm, const ModelGraph& qm, const Dataset& data,
                           size_t limit = 0);

/// Reshapes/pads dataset items to the model input shape (2-D images are
/// zero-padded centered into a {1, H, W} input).
Dataset prepare_for_input(const Dataset& data, const std::vector<int>& input_shape);

void save_float_model(const FloatModel& model, const std::string& json_path);
FloatModel load_float_model(const std::string& json_path);

}  // namespace epsilon
