#pragma once

// Modified Xception: the entry/middle/exit-flow base followed by a
// GAP -> Dense(128) -> ReLU -> BN -> Dropout(0.2) -> Dense(1) -> Sigmoid head.

#include "ctdiag/head.hpp"
#include "ctdiag/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctdiag {

// Only Xception is built; the enum is where another backbone would plug in.
enum class Backbone { kXception };

enum class LayerKind {
  kConv,
  kSeparableConv,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAdd,
  kGlobalAvgPool,
  kDense,
  kDropout,
  kSigmoid,
};

std::string_view layer_kind_name(LayerKind kind);

struct ParamTensor {
  std::string name;
  Shape shape;
  bool trainable = true;
  bool base = true;
  Tensor values;  // empty until initialized or bound

  std::size_t numel() const { return shape_numel(shape); }
  bool loaded() const { return values.size() == numel() && values.shape() == shape; }
};

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::kRelu;
  std::vector<int> inputs;  // earlier layer indices; -1 is the graph input
  ConvSpec conv;            // kConv / kSeparableConv / kMaxPool (kernel_h is the window)
  std::vector<std::size_t> params;  // registry indices, in kind-specific order
  bool in_base = true;
  bool shortcut = false;  // 1x1 projection on a residual branch
  Shape output_shape;     // per sample: (H, W, C) or (F)
};

struct HeadSpec {
  std::size_t dense1_units = 128;
  float dropout_rate = 0.2f;
  std::size_t dense2_units = 1;
  float bn_epsilon = 1e-3f;
  float bn_momentum = 0.99f;  // moving-statistics update during head training
};

struct ParamCounts {
  std::size_t total = 0;
  std::size_t trainable = 0;
  friend bool operator==(const ParamCounts&, const ParamCounts&) = default;
};

class ModelGraph {
 public:
  Backbone backbone = Backbone::kXception;
  HeadSpec head;
  std::size_t input_side = 224;
  std::vector<Layer> layers;
  std::vector<ParamTensor> params;
  int base_output = -1;  // index of the last base layer

  std::size_t add_param(std::string name, Shape shape, bool trainable, bool base);
  ParamTensor& param(std::string_view name);
  const ParamTensor& param(std::string_view name) const;
  std::optional<std::size_t> find_param(std::string_view name) const;

  // Per-sample (H, W, C) of the base output.
  const Shape& base_output_shape() const { return layers.at(base_output).output_shape; }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

// Builds the graph with uninitialized parameter values. `input_side` other than
// 224 is a reduced geometry used for fast tests.
ModelGraph build_modified_xception(const HeadSpec& head = {}, std::size_t input_side = 224);

// Marks every base tensor non-trainable. Head dense weights/biases and BN
// gamma/beta stay trainable; BN moving statistics never are.
ModelGraph& freeze_base(ModelGraph& model);

ParamCounts count_params(const ModelGraph& model);
std::size_t base_param_count(const ModelGraph& model);

// Convolution-bearing base layers, separable convs counted once, shortcuts excluded.
std::size_t conv_layer_count(const ModelGraph& model);

// Seeded He-normal base kernels with identity batch norms. Synthetic use only.
void init_base_random(ModelGraph& model, std::uint64_t seed);

// Truncated-normal (stddev 0.05) dense kernels, zero biases, identity BN.
void init_head(ModelGraph& model, std::uint64_t seed);

// Throws ModelError listing every unloaded or non-finite tensor.
void validate_weights(const ModelGraph& model);

HeadWeights<float> head_weights(const ModelGraph& model);
void store_head_weights(ModelGraph& model, const HeadWeights<float>& weights);

// Base network followed by global average pooling: [N, side, side, 3] -> [N, 2048].
// Base batch norms always run with moving statistics. Samples are spread over
// up to `workers` threads; results do not depend on the worker count.
Tensor base_features(const ModelGraph& model, const Tensor& batch, std::size_t workers = 1);

// Per-slice probability of class 1 (Non-COVID).
std::vector<float> forward(const ModelGraph& model, const Tensor& batch, Mode mode,
                           std::uint64_t seed = 0);

// Head only, from precomputed base features.
std::vector<float> forward_head(const ModelGraph& model, const Tensor& features, Mode mode,
                                std::uint64_t seed = 0);

}  // namespace ctdiag
