#pragma once

#include <vector>

#include "epsilon/model.hpp"

namespace epsilon::testing {

/// Five-weight single-conv model with a zero-weight two-class head: exit
/// confidence is exactly 0.5, so any gamma above that forces stage 2.
/// Weights are [-4, -2, 0, 2, 4]; with B = 4 bins the reference sparsity
/// pattern is (0.2, 0, 0.4, 0.4, 0).
inline ModelGraph make_toy_conv_model() {
  ModelGraph m;
  m.name = "toy-conv";
  m.class_count = 2;
  m.input_shape = {1, 1, 1};
  m.input_scale = 1.0;

  LayerSpec conv;
  conv.kind = LayerKind::Conv2d;
  conv.name = "conv";
  conv.in_channels = 1;
  conv.out_channels = 5;
  conv.kernel = 1;
  conv.stride = 1;
  conv.padding = 0;
  conv.weights.data = {-4, -2, 0, 2, 4};
  conv.weights.shape = {5, 1, 1, 1};
  conv.weights.scale = 1.0;
  conv.bias.assign(5, 0);
  conv.out_scale = 1.0;
  m.backbone.push_back(conv);

  ExitHead exit1;
  exit1.attach_after = 0;
  LayerSpec flat;
  flat.kind = LayerKind::Flatten;
  flat.name = "exit_flat";
  exit1.layers.push_back(flat);
  LayerSpec fc;
  fc.kind = LayerKind::Dense;
  fc.name = "exit_fc";
  fc.in_width = 5;
  fc.out_width = 2;
  fc.weights.data.assign(10, 0);
  fc.weights.shape = {2, 5};
  fc.weights.scale = 1.0;
  fc.bias.assign(2, 0);
  fc.out_scale = 1.0;
  exit1.layers.push_back(fc);
  m.exits.push_back(exit1);
  validate_model(m);
  return m;
}

inline QuantTensor unit_input() {
  QuantTensor x;
  x.shape = {1, 1, 1};
  x.scale = 1.0;
  x.data = {1};
  return x;
}

}  // namespace epsilon::testing
