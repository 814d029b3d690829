#include "epsilon/qnn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epsilon {

namespace {

int8_t clamp_i8(long long v) {
  return static_cast<int8_t>(std::clamp(v, -128LL, 127LL));
}

int8_t requantize(int32_t acc, double factor) {
  return clamp_i8(std::llround(static_cast<double>(acc) * factor));
}

[[noreturn]] void shape_error(const LayerSpec& layer, const std::vector<int>& input_shape,
                              const std::string& detail) {
  throw std::runtime_error("layer_forward: layer '" + layer.name + "' (" +
                           layer_kind_name(layer.kind) + "): " + detail + ", input shape " +
                           shape_to_string(input_shape));
}

void check_dense_input(const LayerSpec& layer, const QuantTensor& x) {
  if (x.shape.size() != 1 || x.shape[0] != layer.in_width) {
    shape_error(layer, x.shape, "expected [" + std::to_string(layer.in_width) + "]");
  }
  if (layer.weights.data.size() != static_cast<size_t>(layer.in_width) * layer.out_width) {
    shape_error(layer, x.shape, "weight count does not match in/out widths");
  }
}

struct ConvDims {
  int in_c, in_h, in_w, out_h, out_w;
};

ConvDims check_conv_input(const LayerSpec& layer, const std::vector<int>& shape) {
  if (shape.size() != 3 || shape[0] != layer.in_channels) {
    shape_error(layer, shape,
                "expected [" + std::to_string(layer.in_channels) + ", H, W]");
  }
  ConvDims d;
  d.in_c = shape[0];
  d.in_h = shape[1];
  d.in_w = shape[2];
  d.out_h = (d.in_h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
  d.out_w = (d.in_w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
  if (d.out_h <= 0 || d.out_w <= 0) shape_error(layer, shape, "kernel larger than padded input");
  return d;
}

AccumTensor dense_accum(const QuantTensor& x, const LayerSpec& layer, const MultiplierModel& m) {
  check_dense_input(layer, x);
  if (layer.bias.size() != static_cast<size_t>(layer.out_width)) {
    shape_error(layer, x.shape, "bias length does not match out width");
  }
  AccumTensor out;
  out.shape = {layer.out_width};
  out.data.resize(static_cast<size_t>(layer.out_width));
  out.scale = x.scale * layer.weights.scale;
  const int8_t* w = layer.weights.data.data();
  for (int o = 0; o < layer.out_width; ++o) {
    int32_t acc = 0;
    const int8_t* row = w + static_cast<size_t>(o) * layer.in_width;
    for (int i = 0; i < layer.in_width; ++i) {
      acc += m.product(row[i], x.data[static_cast<size_t>(i)]);
    }
    out.data[static_cast<size_t>(o)] = acc + layer.bias[static_cast<size_t>(o)];
  }
  return out;
}

AccumTensor conv_accum(const QuantTensor& x, const LayerSpec& layer, const MultiplierModel& m) {
  const ConvDims d = check_conv_input(layer, x.shape);
  const size_t expected_w = static_cast<size_t>(layer.out_channels) * layer.in_channels *
                            layer.kernel * layer.kernel;
  if (layer.weights.data.size() != expected_w) {
    shape_error(layer, x.shape, "weight count does not match channel/kernel parameters");
  }
  if (layer.bias.size() != static_cast<size_t>(layer.out_channels)) {
    shape_error(layer, x.shape, "bias length does not match out channels");
  }
  AccumTensor out;
  out.shape = {layer.out_channels, d.out_h, d.out_w};
  out.data.assign(static_cast<size_t>(layer.out_channels) * d.out_h * d.out_w, 0);
  out.scale = x.scale * layer.weights.scale;
  const int k = layer.kernel;
  // Padding positions still go through the multiplier with a zero operand,
  // mirroring the accelerator dataflow and keeping op_count exact.
  for (int oc = 0; oc < layer.out_channels; ++oc) {
    for (int oh = 0; oh < d.out_h; ++oh) {
      for (int ow = 0; ow < d.out_w; ++ow) {
        int32_t acc = 0;
        for (int ic = 0; ic < d.in_c; ++ic) {
          const int8_t* wbase =
              layer.weights.data.data() +
              ((static_cast<size_t>(oc) * d.in_c + ic) * k) * k;
          const int8_t* xbase = x.data.data() + static_cast<size_t>(ic) * d.in_h * d.in_w;
          for (int kh = 0; kh < k; ++kh) {
            const int ih = oh * layer.stride - layer.padding + kh;
            for (int kw = 0; kw < k; ++kw) {
              const int iw = ow * layer.stride - layer.padding + kw;
              const bool inside = ih >= 0 && ih < d.in_h && iw >= 0 && iw < d.in_w;
              const int8_t xv = inside ? xbase[static_cast<size_t>(ih) * d.in_w + iw] : int8_t{0};
              acc += m.product(wbase[static_cast<size_t>(kh) * k + kw], xv);
            }
          }
        }
        out.data[(static_cast<size_t>(oc) * d.out_h + oh) * d.out_w + ow] =
            acc + layer.bias[static_cast<size_t>(oc)];
      }
    }
  }
  return out;
}

QuantTensor relu_forward(const QuantTensor& x) {
  QuantTensor out = x;
  for (auto& v : out.data) v = std::max<int8_t>(v, 0);
  return out;
}

QuantTensor maxpool_forward(const QuantTensor& x, const LayerSpec& layer) {
  if (x.shape.size() != 3) shape_error(layer, x.shape, "expected [C, H, W]");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int k = layer.pool;
  const int s = layer.pool_stride > 0 ? layer.pool_stride : layer.pool;
  const int oh = (h - k) / s + 1;
  const int ow = (w - k) / s + 1;
  if (oh <= 0 || ow <= 0) shape_error(layer, x.shape, "pool window larger than input");
  QuantTensor out;
  out.shape = {c, oh, ow};
  out.scale = x.scale;
  out.data.resize(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    const int8_t* src = x.data.data() + static_cast<size_t>(ch) * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        int8_t best = -128;
        for (int di = 0; di < k; ++di) {
          for (int dj = 0; dj < k; ++dj) {
            best = std::max(best, src[static_cast<size_t>(i * s + di) * w + (j * s + dj)]);
          }
        }
        out.data[(static_cast<size_t>(ch) * oh + i) * ow + j] = best;
      }
    }
  }
  return out;
}

QuantTensor gap_forward(const QuantTensor& x, const LayerSpec& layer) {
  if (x.shape.size() != 3) shape_error(layer, x.shape, "expected [C, H, W]");
  const int c = x.shape[0];
  const long long hw = static_cast<long long>(x.shape[1]) * x.shape[2];
  QuantTensor out;
  out.shape = {c};
  out.scale = x.scale;
  out.data.resize(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    long long sum = 0;
    const int8_t* src = x.data.data() + static_cast<size_t>(ch) * hw;
    for (long long i = 0; i < hw; ++i) sum += src[i];
    out.data[static_cast<size_t>(ch)] =
        clamp_i8(std::llround(static_cast<double>(sum) / static_cast<double>(hw)));
  }
  return out;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2d: return "maxpool2d";
    case LayerKind::GlobalAvgPool: return "globalavgpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "conv2d") return LayerKind::Conv2d;
  if (name == "relu") return LayerKind::Relu;
  if (name == "maxpool2d") return LayerKind::MaxPool2d;
  if (name == "globalavgpool") return LayerKind::GlobalAvgPool;
  if (name == "flatten") return LayerKind::Flatten;
  throw std::runtime_error("layer_kind_from_name: unknown layer kind '" + name + "'");
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<int> layer_output_shape(const LayerSpec& layer, const std::vector<int>& input_shape) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return {layer.out_width};
    case LayerKind::Conv2d: {
      const ConvDims d = check_conv_input(layer, input_shape);
      return {layer.out_channels, d.out_h, d.out_w};
    }
    case LayerKind::Relu:
      return input_shape;
    case LayerKind::MaxPool2d: {
      if (input_shape.size() != 3) shape_error(layer, input_shape, "expected [C, H, W]");
      const int s = layer.pool_stride > 0 ? layer.pool_stride : layer.pool;
      return {input_shape[0], (input_shape[1] - layer.pool) / s + 1,
              (input_shape[2] - layer.pool) / s + 1};
    }
    case LayerKind::GlobalAvgPool:
      if (input_shape.size() != 3) shape_error(layer, input_shape, "expected [C, H, W]");
      return {input_shape[0]};
    case LayerKind::Flatten: {
      int n = 1;
      for (int d : input_shape) n *= d;
      return {n};
    }
  }
  throw std::logic_error("layer_output_shape: unreachable");
}

AccumTensor layer_forward_accum(const QuantTensor& x, const LayerSpec& layer,
                                const MultiplierModel& m) {
  switch (layer.kind) {
    case LayerKind::Dense: return dense_accum(x, layer, m);
    case LayerKind::Conv2d: return conv_accum(x, layer, m);
    default:
      throw std::runtime_error("layer_forward_accum: layer '" + layer.name +
                               "' has no accumulator form");
  }
}

QuantTensor layer_forward(const QuantTensor& x, const LayerSpec& layer, const MultiplierModel& m) {
  switch (layer.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d: {
      const AccumTensor acc = layer_forward_accum(x, layer, m);
      QuantTensor out;
      out.shape = acc.shape;
      out.scale = layer.out_scale;
      out.data.resize(acc.data.size());
      const double factor = x.scale * layer.weights.scale / layer.out_scale;
      for (size_t i = 0; i < acc.data.size(); ++i) out.data[i] = requantize(acc.data[i], factor);
      return out;
    }
    case LayerKind::Relu: return relu_forward(x);
    case LayerKind::MaxPool2d: return maxpool_forward(x, layer);
    case LayerKind::GlobalAvgPool: return gap_forward(x, layer);
    case LayerKind::Flatten: {
      QuantTensor out = x;
      out.shape = {static_cast<int>(x.numel())};
      return out;
    }
  }
  throw std::logic_error("layer_forward: unreachable");
}

SoftmaxResult softmax_confidence(const AccumTensor& logits) {
  if (logits.data.empty()) throw std::runtime_error("softmax_confidence: empty logits");
  SoftmaxResult r;
  r.probabilities.resize(logits.data.size());
  double max_v = -1e300;
  for (int32_t v : logits.data) max_v = std::max(max_v, static_cast<double>(v) * logits.scale);
  double sum = 0.0;
  for (size_t i = 0; i < logits.data.size(); ++i) {
    const double e = std::exp(static_cast<double>(logits.data[i]) * logits.scale - max_v);
    r.probabilities[i] = e;
    sum += e;
  }
  for (auto& p : r.probabilities) {
    p /= sum;
    r.confidence = std::max(r.confidence, p);
  }
  return r;
}

int argmax_class(const std::vector<double>& probabilities) {
  int best = 0;
  for (size_t i = 1; i < probabilities.size(); ++i) {
    if (probabilities[i] > probabilities[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

uint64_t op_count(const LayerSpec& layer, const std::vector<int>& input_shape) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return static_cast<uint64_t>(layer.in_width) * static_cast<uint64_t>(layer.out_width);
    case LayerKind::Conv2d: {
      const ConvDims d = check_conv_input(layer, input_shape);
      return static_cast<uint64_t>(d.out_h) * d.out_w * layer.out_channels * layer.in_channels *
             layer.kernel * layer.kernel;
    }
    default:
      return 0;
  }
}

}  // namespace epsilon
