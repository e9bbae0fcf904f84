#pragma once

// Dense float tensors and the layer math used by the Xception network.
// Rank-4 tensors are N,H,W,C (channels last); rank-2 tensors are N,F.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctdiag {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* raw() noexcept { return data_.data(); }
  const float* raw() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access (n, h, w, c).
  float& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  float at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  // Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

enum class Padding { kSame, kValid };
enum class Activation { kRelu, kSigmoid };
enum class Mode { kTrain, kInfer };

struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  Padding padding = Padding::kValid;
  bool use_bias = false;
};

// Output length along one axis. SAME: ceil(in/stride); VALID: floor((in-k)/stride)+1.
std::size_t conv_out_size(std::size_t in, int kernel, int stride, Padding padding);

// Leading (top/left) padding. SAME puts the odd extra cell at the bottom/right.
std::size_t conv_pad_before(std::size_t in, int kernel, int stride, Padding padding);

struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> moving_mean;
  std::vector<float> moving_variance;
  float epsilon = 1e-3f;

  std::size_t channels() const noexcept { return gamma.size(); }
  void validate() const;
};

// Kernel layout [kh, kw, Cin, Cout]. Cross-correlation, no kernel flip.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const ConvSpec& spec,
              std::optional<std::span<const float>> bias = std::nullopt);

// Kernel layout [kh, kw, C]; channel multiplier 1.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const ConvSpec& spec);

// Depthwise stage with geometry from `spec`, then a bias-free 1x1 pointwise [1,1,Cin,Cout].
Tensor separable_conv2d(const Tensor& input, const Tensor& depthwise_kernel,
                        const Tensor& pointwise_kernel, const ConvSpec& spec);

Tensor batch_norm_infer(const Tensor& input, const BatchNormParams& params);
void batch_norm_infer_inplace(Tensor& x, const BatchNormParams& params);

// SAME padding treats out-of-range cells as -inf.
Tensor max_pool2d(const Tensor& input, int window, int stride, Padding padding);

Tensor global_average_pool(const Tensor& input);

// weight [Fin, Fout]; y = xW + b.
Tensor dense_affine(const Tensor& input, const Tensor& weight, std::span<const float> bias);

Tensor activation(const Tensor& input, Activation kind);
void relu_inplace(Tensor& x) noexcept;

// Logistic function in the overflow-free branch form.
template <typename Real>
Real stable_sigmoid(Real x) noexcept {
  if (x >= Real(0)) {
    return Real(1) / (Real(1) + std::exp(-x));
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

// Keep-mask for inverted dropout: element i survives iff its uniform draw is >= rate.
std::vector<std::uint8_t> dropout_keep_mask(std::size_t count, float rate, std::uint64_t seed);

// Inverted dropout. INFER is the identity. The mask is a pure function of the seed.
Tensor dropout(const Tensor& input, float rate, Mode mode, std::uint64_t seed);

// Element-wise sum of two same-shaped tensors, written into `acc`.
void add_inplace(Tensor& acc, const Tensor& other);

}  // namespace ctdiag
