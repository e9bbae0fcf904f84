#include "ctdiag/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <random>
#include <sstream>

namespace ctdiag {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << what << ": expected rank " << rank << ", got shape " << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

[[noreturn]] void dim_mismatch(const char* what, const char* dim, std::size_t expected,
                               std::size_t actual) {
  std::ostringstream os;
  os << what << ": " << dim << " mismatch (expected " << expected << ", got " << actual << ")";
  throw ShapeError(os.str());
}

void check_window(const char* what, int kernel_h, int kernel_w, int stride) {
  if (kernel_h < 1 || kernel_w < 1 || stride < 1) {
    std::ostringstream os;
    os << what << ": kernel and stride must be >= 1 (kernel " << kernel_h << "x" << kernel_w
       << ", stride " << stride << ")";
    throw ShapeError(os.str());
  }
}

void check_fits(const char* what, std::size_t in, int kernel, Padding padding) {
  if (padding == Padding::kValid && in < static_cast<std::size_t>(kernel)) {
    std::ostringstream os;
    os << what << ": VALID window " << kernel << " larger than input extent " << in;
    throw ShapeError(os.str());
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  }
  if (data_.size() != shape_numel(shape_)) {
    std::ostringstream os;
    os << "tensor data length " << data_.size() << " does not match shape " << shape_str(shape_);
    throw ShapeError(os.str());
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::size_t conv_out_size(std::size_t in, int kernel, int stride, Padding padding) {
  const auto s = static_cast<std::size_t>(stride);
  if (padding == Padding::kSame) return (in + s - 1) / s;
  const auto k = static_cast<std::size_t>(kernel);
  if (in < k) return 0;
  return (in - k) / s + 1;
}

std::size_t conv_pad_before(std::size_t in, int kernel, int stride, Padding padding) {
  if (padding == Padding::kValid) return 0;
  const std::size_t out = conv_out_size(in, kernel, stride, padding);
  const std::ptrdiff_t needed = static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) -
                                static_cast<std::ptrdiff_t>(in);
  return needed > 0 ? static_cast<std::size_t>(needed / 2) : 0;
}

void BatchNormParams::validate() const {
  const std::size_t c = gamma.size();
  if (beta.size() != c || moving_mean.size() != c || moving_variance.size() != c) {
    std::ostringstream os;
    os << "batch norm: parameter lengths differ (gamma " << c << ", beta " << beta.size()
       << ", moving_mean " << moving_mean.size() << ", moving_variance "
       << moving_variance.size() << ")";
    throw ShapeError(os.str());
  }
  if (!(epsilon > 0.0f)) throw ShapeError("batch norm: epsilon must be positive");
  for (float v : moving_variance) {
    if (!(v >= 0.0f)) throw ShapeError("batch norm: moving_variance must be non-negative");
  }
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const ConvSpec& spec,
              std::optional<std::span<const float>> bias) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  check_window("conv2d", spec.kernel_h, spec.kernel_w, spec.stride);
  if (kernel.dim(0) != static_cast<std::size_t>(spec.kernel_h))
    dim_mismatch("conv2d", "kernel height", spec.kernel_h, kernel.dim(0));
  if (kernel.dim(1) != static_cast<std::size_t>(spec.kernel_w))
    dim_mismatch("conv2d", "kernel width", spec.kernel_w, kernel.dim(1));
  const std::size_t batch = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
  const std::size_t cin = input.dim(3), cout = kernel.dim(3);
  if (kernel.dim(2) != cin) dim_mismatch("conv2d", "input channels", cin, kernel.dim(2));
  if (bias && bias->size() != cout) dim_mismatch("conv2d", "bias length", cout, bias->size());
  if (spec.use_bias && !bias) throw ShapeError("conv2d: spec requires a bias vector");
  check_fits("conv2d", in_h, spec.kernel_h, spec.padding);
  check_fits("conv2d", in_w, spec.kernel_w, spec.padding);

  const std::size_t out_h = conv_out_size(in_h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t out_w = conv_out_size(in_w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t pad_t = conv_pad_before(in_h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t pad_l = conv_pad_before(in_w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t patch = kh * kw * cin;

  Tensor out({batch, out_h, out_w, cout});
  ConstMatrixMap weights(kernel.raw(), static_cast<Eigen::Index>(patch),
                         static_cast<Eigen::Index>(cout));
  const bool pointwise = kh == 1 && kw == 1 && spec.stride == 1;

  RowMatrix columns;
  if (!pointwise) columns.resize(static_cast<Eigen::Index>(out_h * out_w),
                                 static_cast<Eigen::Index>(patch));

  for (std::size_t n = 0; n < batch; ++n) {
    const float* img = input.raw() + n * in_h * in_w * cin;
    MatrixMap dst(out.raw() + n * out_h * out_w * cout, static_cast<Eigen::Index>(out_h * out_w),
                  static_cast<Eigen::Index>(cout));
    if (pointwise) {
      ConstMatrixMap src(img, static_cast<Eigen::Index>(in_h * in_w),
                         static_cast<Eigen::Index>(cin));
      dst.noalias() = src * weights;
    } else {
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          float* row = columns.data() + (oy * out_w + ox) * patch;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad_t);
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad_l);
              float* cell = row + (ky * kw + kx) * cin;
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(in_h) ||
                  ix >= static_cast<std::ptrdiff_t>(in_w)) {
                std::fill(cell, cell + cin, 0.0f);
              } else {
                const float* px = img + (static_cast<std::size_t>(iy) * in_w +
                                         static_cast<std::size_t>(ix)) * cin;
                std::copy(px, px + cin, cell);
              }
            }
          }
        }
      }
      dst.noalias() = columns * weights;
    }
    if (bias) {
      Eigen::Map<const Eigen::RowVectorXf> b(bias->data(), static_cast<Eigen::Index>(cout));
      dst.rowwise() += b;
    }
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const ConvSpec& spec) {
  require_rank(input, 4, "depthwise_conv2d input");
  require_rank(kernel, 3, "depthwise_conv2d kernel");
  check_window("depthwise_conv2d", spec.kernel_h, spec.kernel_w, spec.stride);
  if (kernel.dim(0) != static_cast<std::size_t>(spec.kernel_h))
    dim_mismatch("depthwise_conv2d", "kernel height", spec.kernel_h, kernel.dim(0));
  if (kernel.dim(1) != static_cast<std::size_t>(spec.kernel_w))
    dim_mismatch("depthwise_conv2d", "kernel width", spec.kernel_w, kernel.dim(1));
  const std::size_t batch = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
  const std::size_t ch = input.dim(3);
  if (kernel.dim(2) != ch) dim_mismatch("depthwise_conv2d", "channels", ch, kernel.dim(2));
  check_fits("depthwise_conv2d", in_h, spec.kernel_h, spec.padding);
  check_fits("depthwise_conv2d", in_w, spec.kernel_w, spec.padding);

  const std::size_t out_h = conv_out_size(in_h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t out_w = conv_out_size(in_w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t pad_t = conv_pad_before(in_h, spec.kernel_h, spec.stride, spec.padding);
  const std::size_t pad_l = conv_pad_before(in_w, spec.kernel_w, spec.stride, spec.padding);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);

  Tensor out({batch, out_h, out_w, ch});
  for (std::size_t n = 0; n < batch; ++n) {
    const float* img = input.raw() + n * in_h * in_w * ch;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        float* acc = out.raw() + ((n * out_h + oy) * out_w + ox) * ch;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad_t);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad_l);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const float* px =
                img + (static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix)) * ch;
            const float* wk = kernel.raw() + (ky * kw + kx) * ch;
            for (std::size_t c = 0; c < ch; ++c) acc[c] += px[c] * wk[c];
          }
        }
      }
    }
  }
  return out;
}

Tensor separable_conv2d(const Tensor& input, const Tensor& depthwise_kernel,
                        const Tensor& pointwise_kernel, const ConvSpec& spec) {
  require_rank(pointwise_kernel, 4, "separable_conv2d pointwise kernel");
  if (pointwise_kernel.dim(0) != 1 || pointwise_kernel.dim(1) != 1) {
    throw ShapeError("separable_conv2d: pointwise kernel must be 1x1, got " +
                     shape_str(pointwise_kernel.shape()));
  }
  if (spec.use_bias) throw ShapeError("separable_conv2d: bias is not supported");
  const Tensor spatial = depthwise_conv2d(input, depthwise_kernel, spec);
  return conv2d(spatial, pointwise_kernel, ConvSpec{1, 1, 1, Padding::kValid, false});
}

void batch_norm_infer_inplace(Tensor& x, const BatchNormParams& params) {
  params.validate();
  const std::size_t ch = x.shape().back();
  if (ch != params.channels()) dim_mismatch("batch_norm", "channels", params.channels(), ch);
  std::vector<float> scale(ch), shift(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    scale[c] = params.gamma[c] / std::sqrt(params.moving_variance[c] + params.epsilon);
    shift[c] = params.beta[c] - params.moving_mean[c] * scale[c];
  }
  float* p = x.raw();
  const std::size_t rows = x.size() / ch;
  for (std::size_t r = 0; r < rows; ++r, p += ch) {
    for (std::size_t c = 0; c < ch; ++c) p[c] = p[c] * scale[c] + shift[c];
  }
}

Tensor batch_norm_infer(const Tensor& input, const BatchNormParams& params) {
  if (input.rank() == 0) throw ShapeError("batch_norm: empty input");
  Tensor out = input;
  batch_norm_infer_inplace(out, params);
  return out;
}

Tensor max_pool2d(const Tensor& input, int window, int stride, Padding padding) {
  require_rank(input, 4, "max_pool2d input");
  check_window("max_pool2d", window, window, stride);
  const std::size_t batch = input.dim(0), in_h = input.dim(1), in_w = input.dim(2);
  const std::size_t ch = input.dim(3);
  check_fits("max_pool2d", in_h, window, padding);
  check_fits("max_pool2d", in_w, window, padding);
  const std::size_t out_h = conv_out_size(in_h, window, stride, padding);
  const std::size_t out_w = conv_out_size(in_w, window, stride, padding);
  const std::size_t pad_t = conv_pad_before(in_h, window, stride, padding);
  const std::size_t pad_l = conv_pad_before(in_w, window, stride, padding);

  Tensor out({batch, out_h, out_w, ch}, -std::numeric_limits<float>::infinity());
  for (std::size_t n = 0; n < batch; ++n) {
    const float* img = input.raw() + n * in_h * in_w * ch;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        float* best = out.raw() + ((n * out_h + oy) * out_w + ox) * ch;
        for (int ky = 0; ky < window; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + ky -
                                    static_cast<std::ptrdiff_t>(pad_t);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
          for (int kx = 0; kx < window; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride) + kx -
                                      static_cast<std::ptrdiff_t>(pad_l);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
            const float* px =
                img + (static_cast<std::size_t>(iy) * in_w + static_cast<std::size_t>(ix)) * ch;
            for (std::size_t c = 0; c < ch; ++c) best[c] = std::max(best[c], px[c]);
          }
        }
      }
    }
  }
  return out;
}

Tensor global_average_pool(const Tensor& input) {
  require_rank(input, 4, "global_average_pool input");
  const std::size_t batch = input.dim(0), ch = input.dim(3);
  const std::size_t cells = input.dim(1) * input.dim(2);
  Tensor out({batch, ch});
  std::vector<double> acc(ch);
  for (std::size_t n = 0; n < batch; ++n) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* p = input.raw() + n * cells * ch;
    for (std::size_t i = 0; i < cells; ++i, p += ch) {
      for (std::size_t c = 0; c < ch; ++c) acc[c] += p[c];
    }
    for (std::size_t c = 0; c < ch; ++c) {
      out[n * ch + c] = static_cast<float>(acc[c] / static_cast<double>(cells));
    }
  }
  return out;
}

Tensor dense_affine(const Tensor& input, const Tensor& weight, std::span<const float> bias) {
  require_rank(input, 2, "dense_affine input");
  require_rank(weight, 2, "dense_affine weight");
  const std::size_t rows = input.dim(0), fin = input.dim(1), fout = weight.dim(1);
  if (weight.dim(0) != fin) dim_mismatch("dense_affine", "input features", fin, weight.dim(0));
  if (bias.size() != fout) dim_mismatch("dense_affine", "bias length", fout, bias.size());
  Tensor out({rows, fout});
  ConstMatrixMap x(input.raw(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(fin));
  ConstMatrixMap w(weight.raw(), static_cast<Eigen::Index>(fin), static_cast<Eigen::Index>(fout));
  MatrixMap y(out.raw(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(fout));
  y.noalias() = x * w;
  Eigen::Map<const Eigen::RowVectorXf> b(bias.data(), static_cast<Eigen::Index>(fout));
  y.rowwise() += b;
  return out;
}

void relu_inplace(Tensor& x) noexcept {
  for (float& v : x.data()) v = v < 0.0f ? 0.0f : v;  // NaN passes through
}

Tensor activation(const Tensor& input, Activation kind) {
  Tensor out = input;
  if (kind == Activation::kRelu) {
    relu_inplace(out);
  } else {
    for (float& v : out.data()) v = stable_sigmoid(v);
  }
  return out;
}

std::vector<std::uint8_t> dropout_keep_mask(std::size_t count, float rate, std::uint64_t seed) {
  if (!(rate >= 0.0f && rate < 1.0f)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  std::vector<std::uint8_t> keep(count, 1);
  if (rate == 0.0f) return keep;
  std::mt19937_64 gen(seed);
  for (auto& k : keep) {
    // 53 high bits -> uniform double in [0, 1).
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    k = u >= static_cast<double>(rate) ? 1 : 0;
  }
  return keep;
}

Tensor dropout(const Tensor& input, float rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0f && rate < 1.0f)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::kInfer || rate == 0.0f) return input;
  const auto keep = dropout_keep_mask(input.size(), rate, seed);
  const float scale = 1.0f / (1.0f - rate);
  Tensor out = input;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? out[i] * scale : 0.0f;
  return out;
}

void add_inplace(Tensor& acc, const Tensor& other) {
  if (acc.shape() != other.shape()) {
    throw ShapeError("add: shape " + shape_str(acc.shape()) + " vs " + shape_str(other.shape()));
  }
  float* a = acc.raw();
  const float* b = other.raw();
  for (std::size_t i = 0; i < acc.size(); ++i) a[i] += b[i];
}

}  // namespace ctdiag
