#include "ctdiag/xception.hpp"

#include "ctdiag/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <exception>
#include <sstream>
#include <thread>

namespace ctdiag {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kSeparableConv: return "separable_conv";
    case LayerKind::kBatchNorm: return "batch_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "max_pool";
    case LayerKind::kAdd: return "add";
    case LayerKind::kGlobalAvgPool: return "global_average_pool";
    case LayerKind::kDense: return "dense";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kSigmoid: return "sigmoid";
  }
  return "unknown";
}

std::size_t ModelGraph::add_param(std::string name, Shape shape, bool trainable, bool base) {
  if (index_.contains(name)) throw ModelError("duplicate parameter name: " + name);
  const std::size_t idx = params.size();
  index_.emplace(name, idx);
  params.push_back(ParamTensor{std::move(name), std::move(shape), trainable, base, Tensor{}});
  return idx;
}

std::optional<std::size_t> ModelGraph::find_param(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ParamTensor& ModelGraph::param(std::string_view name) {
  const auto idx = find_param(name);
  if (!idx) throw ModelError("unknown parameter: " + std::string(name));
  return params[*idx];
}

const ParamTensor& ModelGraph::param(std::string_view name) const {
  const auto idx = find_param(name);
  if (!idx) throw ModelError("unknown parameter: " + std::string(name));
  return params[*idx];
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(ModelGraph& g) : g_(g) {}

  int conv(const std::string& name, int from, std::size_t filters, int k, int stride,
           Padding pad, bool shortcut = false) {
    const Shape& in = shape_of(from);
    Layer l = make(name, LayerKind::kConv, {from});
    l.conv = ConvSpec{k, k, stride, pad, false};
    l.shortcut = shortcut;
    l.params.push_back(g_.add_param(name + "/kernel",
                                    {std::size_t(k), std::size_t(k), in[2], filters}, true, true));
    l.output_shape = {conv_out_size(in[0], k, stride, pad), conv_out_size(in[1], k, stride, pad),
                      filters};
    return push(std::move(l));
  }

  int sepconv(const std::string& name, int from, std::size_t filters) {
    const Shape& in = shape_of(from);
    Layer l = make(name, LayerKind::kSeparableConv, {from});
    l.conv = ConvSpec{3, 3, 1, Padding::kSame, false};
    l.params.push_back(g_.add_param(name + "/depthwise_kernel", {3, 3, in[2]}, true, true));
    l.params.push_back(
        g_.add_param(name + "/pointwise_kernel", {1, 1, in[2], filters}, true, true));
    l.output_shape = {in[0], in[1], filters};
    return push(std::move(l));
  }

  int bn(const std::string& name, int from, bool base = true) {
    const Shape& in = shape_of(from);
    const std::size_t ch = in.back();
    Layer l = make(name, LayerKind::kBatchNorm, {from});
    l.in_base = base;
    l.params.push_back(g_.add_param(name + "/gamma", {ch}, true, base));
    l.params.push_back(g_.add_param(name + "/beta", {ch}, true, base));
    l.params.push_back(g_.add_param(name + "/moving_mean", {ch}, false, base));
    l.params.push_back(g_.add_param(name + "/moving_variance", {ch}, false, base));
    l.output_shape = in;
    return push(std::move(l));
  }

  int relu(const std::string& name, int from, bool base = true) {
    Layer l = make(name, LayerKind::kRelu, {from});
    l.in_base = base;
    l.output_shape = shape_of(from);
    return push(std::move(l));
  }

  int pool(const std::string& name, int from) {
    const Shape& in = shape_of(from);
    Layer l = make(name, LayerKind::kMaxPool, {from});
    l.conv = ConvSpec{3, 3, 2, Padding::kSame, false};
    l.output_shape = {conv_out_size(in[0], 3, 2, Padding::kSame),
                      conv_out_size(in[1], 3, 2, Padding::kSame), in[2]};
    return push(std::move(l));
  }

  int add(const std::string& name, int a, int b) {
    if (shape_of(a) != shape_of(b)) {
      throw ModelError("residual add " + name + ": " + shape_str(shape_of(a)) + " vs " +
                       shape_str(shape_of(b)));
    }
    Layer l = make(name, LayerKind::kAdd, {a, b});
    l.output_shape = shape_of(a);
    return push(std::move(l));
  }

  int head_layer(const std::string& name, LayerKind kind, int from, Shape out) {
    Layer l = make(name, kind, {from});
    l.in_base = false;
    l.output_shape = std::move(out);
    return push(std::move(l));
  }

  int dense(const std::string& name, int from, std::size_t units) {
    const std::size_t fin = shape_of(from).back();
    Layer l = make(name, LayerKind::kDense, {from});
    l.in_base = false;
    l.params.push_back(g_.add_param(name + "/kernel", {fin, units}, true, false));
    l.params.push_back(g_.add_param(name + "/bias", {units}, true, false));
    l.output_shape = {units};
    return push(std::move(l));
  }

  const Shape& shape_of(int idx) const { return idx < 0 ? input_ : g_.layers[idx].output_shape; }

  Shape input_;

 private:
  static Layer make(const std::string& name, LayerKind kind, std::vector<int> inputs) {
    Layer l;
    l.name = name;
    l.kind = kind;
    l.inputs = std::move(inputs);
    return l;
  }

  int push(Layer l) {
    g_.layers.push_back(std::move(l));
    return static_cast<int>(g_.layers.size()) - 1;
  }

  ModelGraph& g_;
};

// Residual down-sampling block: [relu] sep, bn, relu, sep, bn, pool + 1x1/2 projection.
int down_block(GraphBuilder& b, const std::string& prefix, int x, std::size_t width1,
               std::size_t width2, bool leading_relu) {
  int sc = b.conv(prefix + "/shortcut", x, width2, 1, 2, Padding::kSame, true);
  sc = b.bn(prefix + "/shortcut_bn", sc);
  int y = x;
  if (leading_relu) y = b.relu(prefix + "/sepconv1_act", y);
  y = b.sepconv(prefix + "/sepconv1", y, width1);
  y = b.bn(prefix + "/sepconv1_bn", y);
  y = b.relu(prefix + "/sepconv2_act", y);
  y = b.sepconv(prefix + "/sepconv2", y, width2);
  y = b.bn(prefix + "/sepconv2_bn", y);
  y = b.pool(prefix + "/pool", y);
  return b.add(prefix + "/add", y, sc);
}

}  // namespace

ModelGraph build_modified_xception(const HeadSpec& head, std::size_t input_side) {
  if (head.dense1_units == 0 || head.dense2_units != 1) {
    throw ModelError("head: dense1 units must be positive and dense2 units must be 1");
  }
  if (input_side < 36) throw ModelError("input side too small for the Xception base");
  ModelGraph g;
  g.head = head;
  g.input_side = input_side;
  GraphBuilder b(g);
  b.input_ = {input_side, input_side, 3};

  // Entry flow.
  int x = b.conv("entry/conv1", -1, 32, 3, 2, Padding::kValid);
  x = b.bn("entry/conv1_bn", x);
  x = b.relu("entry/conv1_act", x);
  x = b.conv("entry/conv2", x, 64, 3, 1, Padding::kValid);
  x = b.bn("entry/conv2_bn", x);
  x = b.relu("entry/conv2_act", x);
  x = down_block(b, "entry/block2", x, 128, 128, false);
  x = down_block(b, "entry/block3", x, 256, 256, true);
  x = down_block(b, "entry/block4", x, 728, 728, true);

  // Middle flow.
  for (int blk = 5; blk <= 12; ++blk) {
    const std::string prefix = "middle/block" + std::to_string(blk);
    int y = x;
    for (int s = 1; s <= 3; ++s) {
      const std::string sep = prefix + "/sepconv" + std::to_string(s);
      y = b.relu(sep + "_act", y);
      y = b.sepconv(sep, y, 728);
      y = b.bn(sep + "_bn", y);
    }
    x = b.add(prefix + "/add", y, x);
  }

  // Exit flow.
  x = down_block(b, "exit/block13", x, 728, 1024, true);
  x = b.sepconv("exit/block14/sepconv1", x, 1536);
  x = b.bn("exit/block14/sepconv1_bn", x);
  x = b.relu("exit/block14/sepconv1_act", x);
  x = b.sepconv("exit/block14/sepconv2", x, 2048);
  x = b.bn("exit/block14/sepconv2_bn", x);
  x = b.relu("exit/block14/sepconv2_act", x);
  g.base_output = x;

  // Head.
  const std::size_t width = b.shape_of(x).back();
  x = b.head_layer("head/gap", LayerKind::kGlobalAvgPool, x, {width});
  x = b.dense("head/dense1", x, head.dense1_units);
  x = b.head_layer("head/dense1_act", LayerKind::kRelu, x, {head.dense1_units});
  x = b.bn("head/bn", x, false);
  x = b.head_layer("head/dropout", LayerKind::kDropout, x, {head.dense1_units});
  x = b.dense("head/dense2", x, head.dense2_units);
  b.head_layer("head/sigmoid", LayerKind::kSigmoid, x, {head.dense2_units});
  return g;
}

ModelGraph& freeze_base(ModelGraph& model) {
  for (auto& p : model.params) {
    if (p.base) p.trainable = false;
  }
  return model;
}

ParamCounts count_params(const ModelGraph& model) {
  ParamCounts c;
  for (const auto& p : model.params) {
    c.total += p.numel();
    if (p.trainable) c.trainable += p.numel();
  }
  return c;
}

std::size_t base_param_count(const ModelGraph& model) {
  std::size_t n = 0;
  for (const auto& p : model.params) {
    if (p.base) n += p.numel();
  }
  return n;
}

std::size_t conv_layer_count(const ModelGraph& model) {
  return static_cast<std::size_t>(std::count_if(
      model.layers.begin(), model.layers.end(), [](const Layer& l) {
        return l.in_base && !l.shortcut &&
               (l.kind == LayerKind::kConv || l.kind == LayerKind::kSeparableConv);
      }));
}

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void fill_bn_identity(ParamTensor& p) {
  const bool ones = ends_with(p.name, "/gamma") || ends_with(p.name, "/moving_variance");
  p.values = Tensor(p.shape, ones ? 1.0f : 0.0f);
}

bool is_bn_param(std::string_view name) {
  return ends_with(name, "/gamma") || ends_with(name, "/beta") ||
         ends_with(name, "/moving_mean") || ends_with(name, "/moving_variance");
}

}  // namespace

void init_base_random(ModelGraph& model, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  for (auto& p : model.params) {
    if (!p.base) continue;
    if (is_bn_param(p.name)) {
      fill_bn_identity(p);
      continue;
    }
    // No ReLU sits between the depthwise and pointwise stages, so the depthwise
    // kernel gets unit gain instead of the He factor of 2.
    float gain = 2.0f;
    std::size_t fan_in = p.shape[0] * p.shape[1] * p.shape[2];
    if (ends_with(p.name, "/depthwise_kernel")) {
      gain = 1.0f;
      fan_in = p.shape[0] * p.shape[1];
    }
    std::normal_distribution<float> dist(0.0f, std::sqrt(gain / static_cast<float>(fan_in)));
    p.values = Tensor(p.shape);
    for (float& v : p.values.data()) v = dist(gen);
  }
}

void init_head(ModelGraph& model, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> dist(0.0f, 0.05f);
  for (auto& p : model.params) {
    if (p.base) continue;
    if (is_bn_param(p.name)) {
      fill_bn_identity(p);
    } else if (ends_with(p.name, "/kernel")) {
      p.values = Tensor(p.shape);
      for (float& v : p.values.data()) {
        float draw;
        do {
          draw = dist(gen);
        } while (std::abs(draw) > 0.1f);
        v = draw;
      }
    } else {
      p.values = Tensor(p.shape, 0.0f);
    }
  }
}

void validate_weights(const ModelGraph& model) {
  std::vector<std::string> unloaded, non_finite;
  for (const auto& p : model.params) {
    if (!p.loaded()) {
      unloaded.push_back(p.name);
    } else if (!p.values.all_finite()) {
      non_finite.push_back(p.name);
    }
  }
  if (unloaded.empty() && non_finite.empty()) return;
  std::ostringstream os;
  os << "model weights not usable:";
  if (!unloaded.empty()) {
    os << " " << unloaded.size() << " unloaded (first: " << unloaded.front() << ")";
  }
  if (!non_finite.empty()) {
    os << " " << non_finite.size() << " non-finite:";
    for (const auto& n : non_finite) os << " " << n;
  }
  throw ModelError(os.str());
}

HeadWeights<float> head_weights(const ModelGraph& model) {
  const auto vec = [&](std::string_view name) {
    const auto& t = model.param(name).values;
    if (t.empty()) throw ModelError("head parameter not loaded: " + std::string(name));
    return std::vector<float>(t.data().begin(), t.data().end());
  };
  HeadWeights<float> w;
  w.features = model.base_output_shape().back();
  w.hidden = model.head.dense1_units;
  w.dense1_kernel = vec("head/dense1/kernel");
  w.dense1_bias = vec("head/dense1/bias");
  w.bn_gamma = vec("head/bn/gamma");
  w.bn_beta = vec("head/bn/beta");
  w.bn_moving_mean = vec("head/bn/moving_mean");
  w.bn_moving_variance = vec("head/bn/moving_variance");
  w.bn_epsilon = model.head.bn_epsilon;
  w.dense2_kernel = vec("head/dense2/kernel");
  w.dense2_bias = vec("head/dense2/bias").at(0);
  w.dropout_rate = model.head.dropout_rate;
  return w;
}

void store_head_weights(ModelGraph& model, const HeadWeights<float>& w) {
  w.validate();
  const auto put = [&](std::string_view name, const std::vector<float>& v) {
    auto& p = model.param(name);
    p.values = Tensor(p.shape, v);
  };
  put("head/dense1/kernel", w.dense1_kernel);
  put("head/dense1/bias", w.dense1_bias);
  put("head/bn/gamma", w.bn_gamma);
  put("head/bn/beta", w.bn_beta);
  put("head/bn/moving_mean", w.bn_moving_mean);
  put("head/bn/moving_variance", w.bn_moving_variance);
  put("head/dense2/kernel", w.dense2_kernel);
  put("head/dense2/bias", {w.dense2_bias});
}

namespace {

// Keras BatchNormalization default, used throughout the pretrained base.
constexpr float kBaseBnEpsilon = 1e-3f;

BatchNormParams bn_view(const ModelGraph& model, const Layer& l, float epsilon) {
  const auto vec = [&](std::size_t i) {
    const auto& t = model.params[l.params[i]].values;
    return std::vector<float>(t.data().begin(), t.data().end());
  };
  return BatchNormParams{vec(0), vec(1), vec(2), vec(3), epsilon};
}

// Runs base layers for one sample and returns the base output [1, H, W, C].
Tensor run_base(const ModelGraph& model, const std::vector<BatchNormParams>& norms,
                Tensor input) {
  const int end = model.base_output;
  std::vector<int> last_use(static_cast<std::size_t>(end) + 1, -1);
  int input_last_use = -1;
  for (int i = 0; i <= end; ++i) {
    for (int src : model.layers[i].inputs) {
      if (src < 0) {
        input_last_use = i;
      } else {
        last_use[src] = i;
      }
    }
  }

  std::vector<Tensor> out(static_cast<std::size_t>(end) + 1);
  const auto take = [&](int src, int at) -> Tensor {
    if (src < 0) return at == input_last_use ? std::move(input) : input;
    if (last_use[src] == at && src != end) return std::move(out[src]);
    return out[src];
  };

  for (int i = 0; i <= end; ++i) {
    const Layer& l = model.layers[i];
    const auto kernel = [&](std::size_t k) -> const Tensor& {
      return model.params[l.params[k]].values;
    };
    switch (l.kind) {
      case LayerKind::kConv:
        out[i] = conv2d(take(l.inputs[0], i), kernel(0), l.conv);
        break;
      case LayerKind::kSeparableConv:
        out[i] = separable_conv2d(take(l.inputs[0], i), kernel(0), kernel(1), l.conv);
        break;
      case LayerKind::kBatchNorm: {
        Tensor t = take(l.inputs[0], i);
        batch_norm_infer_inplace(t, norms[i]);
        out[i] = std::move(t);
        break;
      }
      case LayerKind::kRelu: {
        Tensor t = take(l.inputs[0], i);
        relu_inplace(t);
        out[i] = std::move(t);
        break;
      }
      case LayerKind::kMaxPool:
        out[i] = max_pool2d(take(l.inputs[0], i), l.conv.kernel_h, l.conv.stride,
                            l.conv.padding);
        break;
      case LayerKind::kAdd: {
        Tensor t = take(l.inputs[0], i);
        add_inplace(t, out[l.inputs[1]]);
        if (last_use[l.inputs[1]] == i) out[l.inputs[1]] = Tensor{};
        out[i] = std::move(t);
        break;
      }
      default:
        throw ModelError("layer " + l.name + " is not a base layer");
    }
  }
  return std::move(out[end]);
}

}  // namespace

Tensor base_features(const ModelGraph& model, const Tensor& batch, std::size_t workers) {
  const std::size_t side = model.input_side;
  if (batch.rank() != 4 || batch.dim(1) != side || batch.dim(2) != side || batch.dim(3) != 3) {
    std::ostringstream os;
    os << "model input must be [N," << side << "," << side << ",3], got "
       << shape_str(batch.shape());
    throw ShapeError(os.str());
  }
  validate_weights(model);

  std::vector<BatchNormParams> norms(model.layers.size());
  for (int i = 0; i <= model.base_output; ++i) {
    const Layer& l = model.layers[i];
    if (l.kind == LayerKind::kBatchNorm) norms[i] = bn_view(model, l, kBaseBnEpsilon);
  }

  const std::size_t n = batch.dim(0);
  const std::size_t per_sample = side * side * 3;
  const std::size_t width = model.base_output_shape().back();
  Tensor features({n, width});
  const std::size_t threads = std::clamp<std::size_t>(workers, 1, n);
  std::vector<std::exception_ptr> errors(threads);
  const auto work = [&](std::size_t first) {
    try {
      for (std::size_t s = first; s < n; s += threads) {
        Tensor one({1, side, side, 3}, std::vector<float>(batch.raw() + s * per_sample,
                                                          batch.raw() + (s + 1) * per_sample));
        const Tensor pooled = global_average_pool(run_base(model, norms, std::move(one)));
        std::copy(pooled.raw(), pooled.raw() + width, features.raw() + s * width);
      }
    } catch (...) {
      errors[first] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return features;
}

std::vector<float> forward_head(const ModelGraph& model, const Tensor& features, Mode mode,
                                std::uint64_t seed) {
  const HeadWeights<float> w = head_weights(model);
  if (features.rank() != 2 || features.dim(1) != w.features) {
    throw ShapeError("head input must be [N," + std::to_string(w.features) + "], got " +
                     shape_str(features.shape()));
  }
  return head_forward<float>(w, features.data(), features.dim(0), mode, seed);
}

std::vector<float> forward(const ModelGraph& model, const Tensor& batch, Mode mode,
                           std::uint64_t seed) {
  return forward_head(model, base_features(model, batch), mode, seed);
}

}  // namespace ctdiag
