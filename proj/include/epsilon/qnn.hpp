#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epsilon/multiplier.hpp"

namespace epsilon {

/// 8-bit signed tensor with a symmetric (zero-point 0) dequantization scale:
/// real value ~= data * scale.
struct QuantTensor {
  std::vector<int8_t> data;
  std::vector<int> shape;
  double scale = 1.0;

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }
};

/// 32-bit accumulator tensor. Fan-in of supported layers stays <= 65,536,
/// which with 16-bit products cannot overflow 32 bits.
struct AccumTensor {
  std::vector<int32_t> data;
  std::vector<int> shape;
  double scale = 1.0;
};

enum class LayerKind { Dense, Conv2d, Relu, MaxPool2d, GlobalAvgPool, Flatten };

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::string name;

  // dense
  int in_width = 0;
  int out_width = 0;

  // conv2d
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;

  // maxpool2d
  int pool = 2;
  int pool_stride = 0;  // 0 means equal to pool

  QuantTensor weights;  // dense: [out,in]; conv2d: [out,in,k,k]
  std::vector<int32_t> bias;
  double out_scale = 1.0;

  bool has_weights() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
  size_t weight_count() const { return weights.data.size(); }
};

std::vector<int> layer_output_shape(const LayerSpec& layer, const std::vector<int>& input_shape);

/// Runs one layer. Dense/conv accumulate multiplier products into 32-bit
/// accumulators, add bias, then requantize: multiply by
/// in_scale*weight_scale/out_scale in double precision, round half away from
/// zero, clamp to [-128, 127]. Pool/flatten/relu are exact integer ops.
QuantTensor layer_forward(const QuantTensor& x, const LayerSpec& layer, const MultiplierModel& m);

/// Dense/conv only: raw accumulators plus bias, scale = in_scale*weight_scale.
/// Used for exit logits, where requantization would discard resolution.
AccumTensor layer_forward_accum(const QuantTensor& x, const LayerSpec& layer,
                                const MultiplierModel& m);

struct SoftmaxResult {
  std::vector<double> probabilities;
  double confidence = 0.0;  // max probability
};

/// Numerically stable softmax over the dequantized logits.
SoftmaxResult softmax_confidence(const AccumTensor& logits);

int argmax_class(const std::vector<double>& probabilities);

/// Multiplier operations consumed by one layer on the given input shape.
/// Independent of multiplier choice and of the weight values.
uint64_t op_count(const LayerSpec& layer, const std::vector<int>& input_shape);

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace epsilon
