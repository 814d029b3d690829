#include "epsilon/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epsilon/util.hpp"

namespace epsilon {

using nlohmann::json;

namespace {

struct FTensor {
  std::vector<float> v;
  std::vector<int> shape;

  size_t numel() const { return v.size(); }
};

std::vector<int> float_output_shape(const FloatLayer& layer, const std::vector<int>& in) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return {layer.out_width};
    case LayerKind::Conv2d: {
      const int oh = (in[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      const int ow = (in[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      return {layer.out_channels, oh, ow};
    }
    case LayerKind::Relu:
      return in;
    case LayerKind::MaxPool2d: {
      const int s = layer.pool_stride > 0 ? layer.pool_stride : layer.pool;
      return {in[0], (in[1] - layer.pool) / s + 1, (in[2] - layer.pool) / s + 1};
    }
    case LayerKind::GlobalAvgPool:
      return {in[0]};
    case LayerKind::Flatten: {
      int n = 1;
      for (int d : in) n *= d;
      return {n};
    }
  }
  throw std::logic_error("float_output_shape: unreachable");
}

FTensor float_forward_layer(const FTensor& x, const FloatLayer& layer) {
  FTensor out;
  out.shape = float_output_shape(layer, x.shape);
  switch (layer.kind) {
    case LayerKind::Dense: {
      if (x.v.size() != static_cast<size_t>(layer.in_width)) {
        throw std::runtime_error("float forward: dense '" + layer.name + "' expects " +
                                 std::to_string(layer.in_width) + " inputs, got " +
                                 std::to_string(x.v.size()));
      }
      out.v.resize(static_cast<size_t>(layer.out_width));
      for (int o = 0; o < layer.out_width; ++o) {
        const float* row = layer.weights.data() + static_cast<size_t>(o) * layer.in_width;
        float acc = layer.bias[static_cast<size_t>(o)];
        for (int i = 0; i < layer.in_width; ++i) acc += row[i] * x.v[static_cast<size_t>(i)];
        out.v[static_cast<size_t>(o)] = acc;
      }
      return out;
    }
    case LayerKind::Conv2d: {
      const int ic = x.shape[0], ih = x.shape[1], iw = x.shape[2];
      const int oh = out.shape[1], ow = out.shape[2];
      const int k = layer.kernel;
      out.v.assign(static_cast<size_t>(layer.out_channels) * oh * ow, 0.0f);
      for (int oc = 0; oc < layer.out_channels; ++oc) {
        for (int y = 0; y < oh; ++y) {
          for (int z = 0; z < ow; ++z) {
            float acc = layer.bias[static_cast<size_t>(oc)];
            for (int c = 0; c < ic; ++c) {
              const float* wb = layer.weights.data() + ((static_cast<size_t>(oc) * ic + c) * k) * k;
              const float* xb = x.v.data() + static_cast<size_t>(c) * ih * iw;
              for (int ky = 0; ky < k; ++ky) {
                const int sy = y * layer.stride - layer.padding + ky;
                if (sy < 0 || sy >= ih) continue;
                for (int kz = 0; kz < k; ++kz) {
                  const int sz = z * layer.stride - layer.padding + kz;
                  if (sz < 0 || sz >= iw) continue;
                  acc += wb[static_cast<size_t>(ky) * k + kz] * xb[static_cast<size_t>(sy) * iw + sz];
                }
              }
            }
            out.v[(static_cast<size_t>(oc) * oh + y) * ow + z] = acc;
          }
        }
      }
      return out;
    }
    case LayerKind::Relu:
      out.v = x.v;
      for (float& v : out.v) v = std::max(v, 0.0f);
      return out;
    case LayerKind::MaxPool2d: {
      const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
      const int k = layer.pool;
      const int s = layer.pool_stride > 0 ? layer.pool_stride : layer.pool;
      const int oh = out.shape[1], ow = out.shape[2];
      out.v.resize(static_cast<size_t>(c) * oh * ow);
      for (int ch = 0; ch < c; ++ch) {
        const float* src = x.v.data() + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < oh; ++y) {
          for (int z = 0; z < ow; ++z) {
            float best = src[static_cast<size_t>(y * s) * w + z * s];
            for (int dy = 0; dy < k; ++dy) {
              for (int dz = 0; dz < k; ++dz) {
                best = std::max(best, src[static_cast<size_t>(y * s + dy) * w + (z * s + dz)]);
              }
            }
            out.v[(static_cast<size_t>(ch) * oh + y) * ow + z] = best;
          }
        }
      }
      return out;
    }
    case LayerKind::GlobalAvgPool: {
      const int c = x.shape[0];
      const float hw = static_cast<float>(x.shape[1]) * static_cast<float>(x.shape[2]);
      out.v.resize(static_cast<size_t>(c));
      for (int ch = 0; ch < c; ++ch) {
        float sum = 0.0f;
        const float* src = x.v.data() + static_cast<size_t>(ch) * x.shape[1] * x.shape[2];
        for (int i = 0; i < x.shape[1] * x.shape[2]; ++i) sum += src[i];
        out.v[static_cast<size_t>(ch)] = sum / hw;
      }
      return out;
    }
    case LayerKind::Flatten:
      out.v = x.v;
      return out;
  }
  throw std::logic_error("float_forward_layer: unreachable");
}

/// Backprop through one layer. `grad` holds dL/d(output); returns dL/d(input)
/// and accumulates weight/bias gradients when `lg` is non-null.
std::vector<float> float_backward_layer(const FTensor& x, const FloatLayer& layer,
                                        const std::vector<float>& grad, LayerGrad* lg) {
  switch (layer.kind) {
    case LayerKind::Dense: {
      std::vector<float> gx(x.v.size(), 0.0f);
      for (int o = 0; o < layer.out_width; ++o) {
        const float g = grad[static_cast<size_t>(o)];
        const float* row = layer.weights.data() + static_cast<size_t>(o) * layer.in_width;
        if (lg != nullptr) {
          lg->db[static_cast<size_t>(o)] += g;
          float* dwr = lg->dw.data() + static_cast<size_t>(o) * layer.in_width;
          for (int i = 0; i < layer.in_width; ++i) dwr[i] += g * x.v[static_cast<size_t>(i)];
        }
        for (int i = 0; i < layer.in_width; ++i) gx[static_cast<size_t>(i)] += g * row[i];
      }
      return gx;
    }
    case LayerKind::Conv2d: {
      const int ic = x.shape[0], ih = x.shape[1], iw = x.shape[2];
      const int k = layer.kernel;
      const std::vector<int> os = float_output_shape(layer, x.shape);
      const int oh = os[1], ow = os[2];
      std::vector<float> gx(x.v.size(), 0.0f);
      for (int oc = 0; oc < layer.out_channels; ++oc) {
        for (int y = 0; y < oh; ++y) {
          for (int z = 0; z < ow; ++z) {
            const float g = grad[(static_cast<size_t>(oc) * oh + y) * ow + z];
            if (lg != nullptr) lg->db[static_cast<size_t>(oc)] += g;
            for (int c = 0; c < ic; ++c) {
              const float* wb =
                  layer.weights.data() + ((static_cast<size_t>(oc) * ic + c) * k) * k;
              float* dwb = lg != nullptr
                               ? lg->dw.data() + ((static_cast<size_t>(oc) * ic + c) * k) * k
                               : nullptr;
              const float* xb = x.v.data() + static_cast<size_t>(c) * ih * iw;
              float* gxb = gx.data() + static_cast<size_t>(c) * ih * iw;
              for (int ky = 0; ky < k; ++ky) {
                const int sy = y * layer.stride - layer.padding + ky;
                if (sy < 0 || sy >= ih) continue;
                for (int kz = 0; kz < k; ++kz) {
                  const int sz = z * layer.stride - layer.padding + kz;
                  if (sz < 0 || sz >= iw) continue;
                  if (dwb != nullptr) dwb[static_cast<size_t>(ky) * k + kz] += g * xb[static_cast<size_t>(sy) * iw + sz];
                  gxb[static_cast<size_t>(sy) * iw + sz] += g * wb[static_cast<size_t>(ky) * k + kz];
                }
              }
            }
          }
        }
      }
      return gx;
    }
    case LayerKind::Relu: {
      std::vector<float> gx(grad.size());
      for (size_t i = 0; i < grad.size(); ++i) gx[i] = x.v[i] > 0.0f ? grad[i] : 0.0f;
      return gx;
    }
    case LayerKind::MaxPool2d: {
      const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
      const int k = layer.pool;
      const int s = layer.pool_stride > 0 ? layer.pool_stride : layer.pool;
      const std::vector<int> os = float_output_shape(layer, x.shape);
      const int oh = os[1], ow = os[2];
      std::vector<float> gx(x.v.size(), 0.0f);
      for (int ch = 0; ch < c; ++ch) {
        const float* src = x.v.data() + static_cast<size_t>(ch) * h * w;
        float* gdst = gx.data() + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < oh; ++y) {
          for (int z = 0; z < ow; ++z) {
            // Route to the first maximum in scan order.
            int br = y * s, bc = z * s;
            float best = src[static_cast<size_t>(br) * w + bc];
            for (int dy = 0; dy < k; ++dy) {
              for (int dz = 0; dz < k; ++dz) {
                const float v = src[static_cast<size_t>(y * s + dy) * w + (z * s + dz)];
                if (v > best) {
                  best = v;
                  br = y * s + dy;
                  bc = z * s + dz;
                }
              }
            }
            gdst[static_cast<size_t>(br) * w + bc] +=
                grad[(static_cast<size_t>(ch) * oh + y) * ow + z];
          }
        }
      }
      return gx;
    }
    case LayerKind::GlobalAvgPool: {
      const int c = x.shape[0];
      const int hw = x.shape[1] * x.shape[2];
      std::vector<float> gx(x.v.size());
      for (int ch = 0; ch < c; ++ch) {
        const float g = grad[static_cast<size_t>(ch)] / static_cast<float>(hw);
        for (int i = 0; i < hw; ++i) gx[static_cast<size_t>(ch) * hw + i] = g;
      }
      return gx;
    }
    case LayerKind::Flatten:
      return grad;
  }
  throw std::logic_error("float_backward_layer: unreachable");
}

std::vector<double> stable_softmax(const std::vector<float>& logits) {
  double max_v = logits[0];
  for (float v : logits) max_v = std::max(max_v, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - max_v);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

struct ForwardCache {
  FTensor input;
  std::vector<FTensor> backbone;                 // activation after each position
  std::vector<std::vector<FTensor>> head_acts;   // per exit, after each head layer
  std::vector<std::vector<float>> exit_logits;   // per exit
};

ForwardCache float_forward_all(const FloatModel& model, std::span<const float> x) {
  ForwardCache cache;
  cache.input.v.assign(x.begin(), x.end());
  cache.input.shape = model.input_shape;
  size_t expect = 1;
  for (int d : model.input_shape) expect *= static_cast<size_t>(d);
  if (x.size() != expect) {
    throw std::runtime_error("float forward: input size " + std::to_string(x.size()) +
                             " does not match model input shape");
  }
  cache.backbone.reserve(model.backbone.size());
  const FTensor* prev = &cache.input;
  for (const FloatLayer& layer : model.backbone) {
    cache.backbone.push_back(float_forward_layer(*prev, layer));
    prev = &cache.backbone.back();
  }
  cache.head_acts.resize(model.exits.size());
  cache.exit_logits.resize(model.exits.size());
  for (size_t e = 0; e < model.exits.size(); ++e) {
    const FloatExit& exit = model.exits[e];
    const FTensor* h = &cache.backbone[static_cast<size_t>(exit.attach_after)];
    for (const FloatLayer& layer : exit.layers) {
      cache.head_acts[e].push_back(float_forward_layer(*h, layer));
      h = &cache.head_acts[e].back();
    }
    cache.exit_logits[e] = h->v;
  }
  return cache;
}

ModelGrads make_grads(const FloatModel& model) {
  ModelGrads g;
  g.backbone.resize(model.backbone.size());
  for (size_t i = 0; i < model.backbone.size(); ++i) {
    if (model.backbone[i].has_weights()) {
      g.backbone[i].dw.assign(model.backbone[i].weights.size(), 0.0f);
      g.backbone[i].db.assign(model.backbone[i].bias.size(), 0.0f);
    }
  }
  g.exits.resize(model.exits.size());
  for (size_t e = 0; e < model.exits.size(); ++e) {
    g.exits[e].resize(model.exits[e].layers.size());
    for (size_t i = 0; i < model.exits[e].layers.size(); ++i) {
      if (model.exits[e].layers[i].has_weights()) {
        g.exits[e][i].dw.assign(model.exits[e].layers[i].weights.size(), 0.0f);
        g.exits[e][i].db.assign(model.exits[e].layers[i].bias.size(), 0.0f);
      }
    }
  }
  return g;
}

float he_limit(int fan_in) { return std::sqrt(6.0f / static_cast<float>(fan_in)); }

FloatLayer init_dense(int in_w, int out_w, const std::string& name, std::mt19937_64& rng) {
  FloatLayer l;
  l.kind = LayerKind::Dense;
  l.name = name;
  l.in_width = in_w;
  l.out_width = out_w;
  l.weights.resize(static_cast<size_t>(in_w) * out_w);
  const float a = he_limit(in_w);
  for (float& w : l.weights) w = a * (2.0f * static_cast<float>(rng_unit(rng)) - 1.0f);
  l.bias.assign(static_cast<size_t>(out_w), 0.0f);
  return l;
}

FloatLayer init_conv(int in_c, int out_c, int k, int stride, int padding, const std::string& name,
                     std::mt19937_64& rng) {
  FloatLayer l;
  l.kind = LayerKind::Conv2d;
  l.name = name;
  l.in_channels = in_c;
  l.out_channels = out_c;
  l.kernel = k;
  l.stride = stride;
  l.padding = padding;
  l.weights.resize(static_cast<size_t>(out_c) * in_c * k * k);
  const float a = he_limit(in_c * k * k);
  for (float& w : l.weights) w = a * (2.0f * static_cast<float>(rng_unit(rng)) - 1.0f);
  l.bias.assign(static_cast<size_t>(out_c), 0.0f);
  return l;
}

FloatLayer plain_layer(LayerKind kind, const std::string& name) {
  FloatLayer l;
  l.kind = kind;
  l.name = name;
  return l;
}

}  // namespace

FloatModel make_float_cnn(int class_count, uint64_t seed) {
  std::mt19937_64 rng(mix64(seed, 0xc22ULL));
  FloatModel m;
  m.name = "cnn4";
  m.seed = seed;
  m.class_count = class_count;
  m.input_shape = {1, 32, 32};
  m.backbone.push_back(init_conv(1, 8, 3, 1, 1, "conv1", rng));   // 0 -> 8x32x32
  m.backbone.push_back(plain_layer(LayerKind::Relu, "relu1"));    // 1
  FloatLayer p1 = plain_layer(LayerKind::MaxPool2d, "pool1");     // 2 -> 8x16x16
  m.backbone.push_back(p1);
  m.backbone.push_back(init_conv(8, 16, 3, 2, 1, "conv2", rng));  // 3 -> 16x8x8
  m.backbone.push_back(plain_layer(LayerKind::Relu, "relu2"));    // 4
  FloatLayer p2 = plain_layer(LayerKind::MaxPool2d, "pool2");     // 5 -> 16x4x4
  m.backbone.push_back(p2);
  m.backbone.push_back(plain_layer(LayerKind::Flatten, "flat"));  // 6 -> 256
  m.backbone.push_back(init_dense(256, 64, "fc1", rng));          // 7
  m.backbone.push_back(plain_layer(LayerKind::Relu, "relu3"));    // 8
  m.backbone.push_back(init_dense(64, class_count, "fc2", rng));  // 9

  FloatExit e1;
  e1.attach_after = 0;
  e1.layers.push_back(plain_layer(LayerKind::Relu, "exit1_relu"));
  FloatLayer e1p = plain_layer(LayerKind::MaxPool2d, "exit1_pool");
  e1p.pool = 4;
  e1.layers.push_back(e1p);  // 8x8x8
  e1.layers.push_back(plain_layer(LayerKind::Flatten, "exit1_flat"));
  e1.layers.push_back(init_dense(512, class_count, "exit1_fc", rng));
  m.exits.push_back(std::move(e1));

  FloatExit e2;
  e2.attach_after = 3;
  e2.layers.push_back(plain_layer(LayerKind::Relu, "exit2_relu"));
  e2.layers.push_back(plain_layer(LayerKind::MaxPool2d, "exit2_pool"));  // 16x4x4
  e2.layers.push_back(plain_layer(LayerKind::Flatten, "exit2_flat"));
  e2.layers.push_back(init_dense(256, class_count, "exit2_fc", rng));
  m.exits.push_back(std::move(e2));

  FloatExit e3;
  e3.attach_after = 7;
  e3.layers.push_back(plain_layer(LayerKind::Relu, "exit3_relu"));
  e3.layers.push_back(init_dense(64, class_count, "exit3_fc", rng));
  m.exits.push_back(std::move(e3));

  FloatExit e4;
  e4.attach_after = 9;  // classifier itself; empty head
  m.exits.push_back(std::move(e4));
  return m;
}

FloatModel make_float_mlp(const std::vector<int>& widths, int class_count, uint64_t seed) {
  if (widths.size() < 2) {
    throw std::invalid_argument("make_float_mlp: need input plus at least one hidden width");
  }
  std::mt19937_64 rng(mix64(seed, 0x311ULL));
  FloatModel m;
  m.name = "mlp";
  m.seed = seed;
  m.class_count = class_count;
  m.input_shape = {widths[0]};
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    m.backbone.push_back(
        init_dense(widths[i], widths[i + 1], "fc" + std::to_string(i + 1), rng));
    FloatExit e;
    e.attach_after = static_cast<int>(m.backbone.size()) - 1;
    e.layers.push_back(plain_layer(LayerKind::Relu, "exit" + std::to_string(i + 1) + "_relu"));
    e.layers.push_back(
        init_dense(widths[i + 1], class_count, "exit" + std::to_string(i + 1) + "_fc", rng));
    m.exits.push_back(std::move(e));
    m.backbone.push_back(plain_layer(LayerKind::Relu, "relu" + std::to_string(i + 1)));
  }
  m.backbone.push_back(init_dense(widths.back(), class_count, "classifier", rng));
  FloatExit final_exit;
  final_exit.attach_after = static_cast<int>(m.backbone.size()) - 1;
  m.exits.push_back(final_exit);
  return m;
}

std::vector<std::vector<float>> float_exit_logits(const FloatModel& model,
                                                  std::span<const float> x) {
  return float_forward_all(model, x).exit_logits;
}

int float_predict(const FloatModel& model, std::span<const float> x) {
  const auto logits = float_forward_all(model, x).exit_logits.back();
  int best = 0;
  for (size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

double float_accuracy(const FloatModel& model, const Dataset& data, int exit_index) {
  const Dataset prepared = prepare_for_input(data, model.input_shape);
  const int target = exit_index == 0 ? model.exit_count() : exit_index;
  size_t correct = 0;
  for (size_t i = 0; i < prepared.size(); ++i) {
    const auto logits = float_forward_all(model, prepared.item(i)).exit_logits;
    const auto& l = logits[static_cast<size_t>(target - 1)];
    int best = 0;
    for (size_t j = 1; j < l.size(); ++j) {
      if (l[j] > l[static_cast<size_t>(best)]) best = static_cast<int>(j);
    }
    if (best == prepared.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(prepared.size());
}

double multiexit_loss(const FloatModel& model, std::span<const float> x, int label,
                      ModelGrads* grads) {
  if (grads != nullptr && grads->backbone.size() != model.backbone.size()) {
    *grads = make_grads(model);
  }
  const ForwardCache cache = float_forward_all(model, x);
  double loss = 0.0;
  std::vector<std::vector<float>> backbone_grad(model.backbone.size());
  for (size_t p = 0; p < model.backbone.size(); ++p) {
    backbone_grad[p].assign(cache.backbone[p].numel(), 0.0f);
  }
  for (size_t e = 0; e < model.exits.size(); ++e) {
    const std::vector<double> p = stable_softmax(cache.exit_logits[e]);
    loss += -std::log(std::max(p[static_cast<size_t>(label)], 1e-30));
    std::vector<float> g(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
      g[i] = static_cast<float>(p[i]) - (static_cast<int>(i) == label ? 1.0f : 0.0f);
    }
    const FloatExit& exit = model.exits[e];
    // Back through the head onto the backbone attachment.
    for (size_t i = exit.layers.size(); i-- > 0;) {
      const FTensor& in = i == 0 ? cache.backbone[static_cast<size_t>(exit.attach_after)]
                                 : cache.head_acts[e][i - 1];
      LayerGrad* lg = grads != nullptr && model.exits[e].layers[i].has_weights()
                          ? &grads->exits[e][i]
                          : nullptr;
      g = float_backward_layer(in, exit.layers[i], g, lg);
    }
    float* acc = backbone_grad[static_cast<size_t>(exit.attach_after)].data();
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
  for (size_t p = model.backbone.size(); p-- > 0;) {
    const FTensor& in = p == 0 ? cache.input : cache.backbone[p - 1];
    LayerGrad* lg =
        grads != nullptr && model.backbone[p].has_weights() ? &grads->backbone[p] : nullptr;
    const std::vector<float> gin = float_backward_layer(in, model.backbone[p], backbone_grad[p], lg);
    if (p > 0) {
      float* acc = backbone_grad[p - 1].data();
      for (size_t i = 0; i < gin.size(); ++i) acc[i] += gin[i];
    }
  }
  return loss;
}

namespace {

void sgd_step(std::vector<float>& w, const std::vector<float>& g, float step) {
  for (size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
}

}  // namespace

TrainReport train_multiexit(FloatModel& model, const Dataset& train, int epochs, double lr,
                            uint64_t seed, int batch_size) {
  if (epochs < 0 || batch_size < 1) {
    throw std::invalid_argument("train_multiexit: bad epochs/batch_size");
  }
  const Dataset data = prepare_for_input(train, model.input_shape);
  TrainReport report;
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::mt19937_64 rng(mix64(seed, static_cast<uint64_t>(epoch) + 1));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng_below(rng, i)]);
    }
    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
      ModelGrads grads = make_grads(model);
      double batch_loss = 0.0;
      for (size_t i = start; i < end; ++i) {
        batch_loss += multiexit_loss(model, data.item(order[i]), data.labels[order[i]], &grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train_multiexit: loss became non-finite at epoch " +
                                 std::to_string(epoch + 1));
      }
      epoch_loss += batch_loss;
      const float step = static_cast<float>(lr / static_cast<double>(end - start));
      for (size_t p = 0; p < model.backbone.size(); ++p) {
        if (!model.backbone[p].has_weights()) continue;
        sgd_step(model.backbone[p].weights, grads.backbone[p].dw, step);
        sgd_step(model.backbone[p].bias, grads.backbone[p].db, step);
      }
      for (size_t e = 0; e < model.exits.size(); ++e) {
        for (size_t i = 0; i < model.exits[e].layers.size(); ++i) {
          if (!model.exits[e].layers[i].has_weights()) continue;
          sgd_step(model.exits[e].layers[i].weights, grads.exits[e][i].dw, step);
          sgd_step(model.exits[e].layers[i].bias, grads.exits[e][i].db, step);
        }
      }
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  report.exit_train_accuracy.resize(model.exits.size());
  std::vector<size_t> correct(model.exits.size(), 0);
  for (size_t i = 0; i < data.size(); ++i) {
    const auto logits = float_forward_all(model, data.item(i)).exit_logits;
    for (size_t e = 0; e < logits.size(); ++e) {
      int best = 0;
      for (size_t j = 1; j < logits[e].size(); ++j) {
        if (logits[e][j] > logits[e][static_cast<size_t>(best)]) best = static_cast<int>(j);
      }
      if (best == data.labels[i]) ++correct[e];
    }
  }
  for (size_t e = 0; e < correct.size(); ++e) {
    report.exit_train_accuracy[e] =
        static_cast<double>(correct[e]) / static_cast<double>(data.size());
  }
  return report;
}

namespace {

LayerSpec quantize_layer(const FloatLayer& fl, double in_scale, double out_max,
                         std::vector<std::string>& warnings) {
  LayerSpec l;
  l.kind = fl.kind;
  l.name = fl.name;
  l.in_width = fl.in_width;
  l.out_width = fl.out_width;
  l.in_channels = fl.in_channels;
  l.out_channels = fl.out_channels;
  l.kernel = fl.kernel;
  l.stride = fl.stride;
  l.padding = fl.padding;
  l.pool = fl.pool;
  l.pool_stride = fl.pool_stride;
  if (!fl.has_weights()) return l;
  float max_w = 0.0f;
  for (float w : fl.weights) max_w = std::max(max_w, std::abs(w));
  double w_scale = max_w / 127.0;
  if (max_w == 0.0f) {
    w_scale = 1.0;
    warnings.push_back("layer '" + fl.name + "': all-zero weights, scale set to 1");
  }
  l.weights.scale = w_scale;
  l.weights.data.resize(fl.weights.size());
  for (size_t i = 0; i < fl.weights.size(); ++i) {
    l.weights.data[i] = static_cast<int8_t>(
        std::clamp(std::llround(static_cast<double>(fl.weights[i]) / w_scale), -128LL, 127LL));
  }
  l.weights.shape = fl.kind == LayerKind::Dense
                        ? std::vector<int>{fl.out_width, fl.in_width}
                        : std::vector<int>{fl.out_channels, fl.in_channels, fl.kernel, fl.kernel};
  const double bias_scale = in_scale * w_scale;
  l.bias.resize(fl.bias.size());
  for (size_t i = 0; i < fl.bias.size(); ++i) {
    l.bias[i] = static_cast<int32_t>(std::llround(static_cast<double>(fl.bias[i]) / bias_scale));
  }
  l.out_scale = out_max > 0.0 ? out_max / 127.0 : 1.0;
  if (out_max <= 0.0) {
    warnings.push_back("layer '" + fl.name + "': zero activation range, out scale set to 1");
  }
  return l;
}

}  // namespace

QuantizeResult quantize(const FloatModel& fm, const Dataset& calibration) {
  if (calibration.size() == 0) throw std::invalid_argument("quantize: empty calibration set");
  const Dataset calib = prepare_for_input(calibration, fm.input_shape);

  // Max |activation| at every layer output over the calibration set.
  double input_max = 0.0;
  std::vector<double> backbone_max(fm.backbone.size(), 0.0);
  std::vector<std::vector<double>> head_max(fm.exits.size());
  for (size_t e = 0; e < fm.exits.size(); ++e) head_max[e].resize(fm.exits[e].layers.size(), 0.0);
  for (size_t i = 0; i < calib.size(); ++i) {
    for (float v : calib.item(i)) input_max = std::max(input_max, std::abs(static_cast<double>(v)));
    const ForwardCache cache = float_forward_all(fm, calib.item(i));
    for (size_t p = 0; p < cache.backbone.size(); ++p) {
      for (float v : cache.backbone[p].v) {
        backbone_max[p] = std::max(backbone_max[p], std::abs(static_cast<double>(v)));
      }
    }
    for (size_t e = 0; e < cache.head_acts.size(); ++e) {
      for (size_t j = 0; j < cache.head_acts[e].size(); ++j) {
        for (float v : cache.head_acts[e][j].v) {
          head_max[e][j] = std::max(head_max[e][j], std::abs(static_cast<double>(v)));
        }
      }
    }
  }

  QuantizeResult result;
  ModelGraph& qm = result.model;
  qm.name = fm.name;
  qm.seed = fm.seed;
  qm.class_count = fm.class_count;
  qm.input_shape = fm.input_shape;
  qm.input_scale = input_max > 0.0 ? input_max / 127.0 : 1.0;

  double scale = qm.input_scale;  // scale flowing into the next layer
  for (size_t p = 0; p < fm.backbone.size(); ++p) {
    LayerSpec l = quantize_layer(fm.backbone[p], scale, backbone_max[p], result.warnings);
    if (l.has_weights()) scale = l.out_scale;
    qm.backbone.push_back(std::move(l));
  }
  std::vector<double> scale_at(fm.backbone.size());
  {
    double s = qm.input_scale;
    for (size_t p = 0; p < qm.backbone.size(); ++p) {
      if (qm.backbone[p].has_weights()) s = qm.backbone[p].out_scale;
      scale_at[p] = s;
    }
  }
  for (size_t e = 0; e < fm.exits.size(); ++e) {
    ExitHead head;
    head.attach_after = fm.exits[e].attach_after;
    double s = scale_at[static_cast<size_t>(head.attach_after)];
    for (size_t j = 0; j < fm.exits[e].layers.size(); ++j) {
      LayerSpec l = quantize_layer(fm.exits[e].layers[j], s, head_max[e][j], result.warnings);
      if (l.has_weights()) s = l.out_scale;
      head.layers.push_back(std::move(l));
    }
    qm.exits.push_back(std::move(head));
  }
  validate_model(qm);
  return result;
}

double quantized_agreement(const FloatModel& fm, const ModelGraph& qm, const Dataset& data,
                           size_t limit) {
  const Dataset prepared = prepare_for_input(data, fm.input_shape);
  const MultiplierModel exact = make_exact();
  const size_t n = limit == 0 ? prepared.size() : std::min(limit, prepared.size());
  size_t agree = 0;
  for (size_t i = 0; i < n; ++i) {
    const int fp = float_predict(fm, prepared.item(i));
    const QuantTensor x = quantize_input(qm, prepared.item(i));
    const ExitResult r = forward_exit(qm, x, qm.exit_count(), exact);
    if (r.prediction == fp) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(n);
}

Dataset prepare_for_input(const Dataset& data, const std::vector<int>& input_shape) {
  size_t need = 1;
  for (int d : input_shape) need *= static_cast<size_t>(d);
  if (static_cast<size_t>(data.item_size()) == need) return data;
  if (data.item_shape.size() == 2 && input_shape.size() == 3 && input_shape[0] == 1) {
    return pad_items(data, input_shape[1], input_shape[2]);
  }
  throw std::runtime_error("prepare_for_input: dataset items of " +
                           std::to_string(data.item_size()) +
                           " values cannot feed input shape " + shape_to_string(input_shape));
}

namespace {

json float_layer_to_json(const FloatLayer& l, std::vector<uint8_t>& blob) {
  json j;
  j["kind"] = layer_kind_name(l.kind);
  j["name"] = l.name;
  switch (l.kind) {
    case LayerKind::Dense:
      j["in_width"] = l.in_width;
      j["out_width"] = l.out_width;
      break;
    case LayerKind::Conv2d:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::MaxPool2d:
      j["pool"] = l.pool;
      if (l.pool_stride > 0) j["pool_stride"] = l.pool_stride;
      break;
    default:
      break;
  }
  if (l.has_weights()) {
    auto append = [&blob](const std::vector<float>& v) {
      const size_t off = blob.size();
      const auto* p = reinterpret_cast<const uint8_t*>(v.data());
      blob.insert(blob.end(), p, p + v.size() * sizeof(float));
      return off;
    };
    j["weights"] = {{"offset", append(l.weights)}, {"length", l.weights.size() * sizeof(float)}};
    j["bias"] = {{"offset", append(l.bias)}, {"length", l.bias.size() * sizeof(float)}};
  }
  return j;
}

FloatLayer float_layer_from_json(const json& j, const std::vector<uint8_t>& blob) {
  FloatLayer l;
  l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
  l.name = j.value("name", "");
  switch (l.kind) {
    case LayerKind::Dense:
      l.in_width = j.at("in_width").get<int>();
      l.out_width = j.at("out_width").get<int>();
      break;
    case LayerKind::Conv2d:
      l.in_channels = j.at("in_channels").get<int>();
      l.out_channels = j.at("out_channels").get<int>();
      l.kernel = j.at("kernel").get<int>();
      l.stride = j.at("stride").get<int>();
      l.padding = j.at("padding").get<int>();
      break;
    case LayerKind::MaxPool2d:
      l.pool = j.at("pool").get<int>();
      l.pool_stride = j.value("pool_stride", 0);
      break;
    default:
      break;
  }
  if (l.has_weights()) {
    auto load = [&blob](const json& ref, std::vector<float>& out) {
      const size_t off = ref.at("offset").get<size_t>();
      const size_t len = ref.at("length").get<size_t>();
      if (off + len > blob.size() || len % sizeof(float) != 0) {
        throw std::runtime_error("load_float_model: bad block at offset " + std::to_string(off));
      }
      out.resize(len / sizeof(float));
      std::memcpy(out.data(), blob.data() + off, len);
    };
    load(j.at("weights"), l.weights);
    load(j.at("bias"), l.bias);
  }
  return l;
}

std::string f32_path_for(const std::string& json_path) {
  const size_t dot = json_path.rfind('.');
  if (dot == std::string::npos || json_path.substr(dot) != ".json") {
    throw std::runtime_error("float model path must end in .json, got " + json_path);
  }
  return json_path.substr(0, dot) + ".f32";
}

}  // namespace

void save_float_model(const FloatModel& model, const std::string& json_path) {
  std::vector<uint8_t> blob;
  json doc;
  doc["format_version"] = 1;
  doc["model_type"] = "float";
  doc["name"] = model.name;
  doc["seed"] = model.seed;
  doc["class_count"] = model.class_count;
  doc["input_shape"] = model.input_shape;
  json layers = json::array();
  for (const FloatLayer& l : model.backbone) layers.push_back(float_layer_to_json(l, blob));
  doc["layers"] = std::move(layers);
  json exits = json::array();
  for (const FloatExit& e : model.exits) {
    json je;
    je["attach_after"] = e.attach_after;
    json hl = json::array();
    for (const FloatLayer& l : e.layers) hl.push_back(float_layer_to_json(l, blob));
    je["layers"] = std::move(hl);
    exits.push_back(std::move(je));
  }
  doc["exits"] = std::move(exits);
  const std::string text = doc.dump(2) + "\n";
  write_file_bytes(json_path, text.data(), text.size());
  write_file_bytes(f32_path_for(json_path), blob.data(), blob.size());
}

FloatModel load_float_model(const std::string& json_path) {
  const std::vector<uint8_t> json_bytes = read_file_bytes(json_path);
  const json doc = json::parse(json_bytes.begin(), json_bytes.end());
  if (doc.value("model_type", "") != "float" || doc.value("format_version", 0) != 1) {
    throw std::runtime_error("load_float_model: " + json_path + ": not a float model file");
  }
  const std::vector<uint8_t> blob = read_file_bytes(f32_path_for(json_path));
  FloatModel m;
  m.name = doc.value("name", "");
  m.seed = doc.value("seed", 0ULL);
  m.class_count = doc.at("class_count").get<int>();
  m.input_shape = doc.at("input_shape").get<std::vector<int>>();
  for (const json& j : doc.at("layers")) m.backbone.push_back(float_layer_from_json(j, blob));
  for (const json& je : doc.at("exits")) {
    FloatExit e;
    e.attach_after = je.at("attach_after").get<int>();
    for (const json& j : je.at("layers")) e.layers.push_back(float_layer_from_json(j, blob));
    m.exits.push_back(std::move(e));
  }
  return m;
}

}  // namespace epsilon
