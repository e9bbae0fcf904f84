#pragma once

// Classifier head: GAP features -> Dense -> ReLU -> BN -> Dropout -> Dense(1) -> Sigmoid.
//
// Templated on the scalar type so the same code runs in float for inference and
// training, and in double as the shadow path for finite-difference gradient checks.

#include "ctdiag/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace ctdiag {

template <typename Real>
struct HeadWeights {
  std::size_t features = 0;  // input width (2048 for Xception)
  std::size_t hidden = 0;    // dense1 units
  std::vector<Real> dense1_kernel;  // [features, hidden] row-major
  std::vector<Real> dense1_bias;    // [hidden]
  std::vector<Real> bn_gamma;
  std::vector<Real> bn_beta;
  std::vector<Real> bn_moving_mean;
  std::vector<Real> bn_moving_variance;
  Real bn_epsilon = Real(1e-3);
  std::vector<Real> dense2_kernel;  // [hidden, 1]
  Real dense2_bias = Real(0);
  float dropout_rate = 0.2f;

  void validate() const {
    const auto bad = [](const char* what, std::size_t want, std::size_t got) {
      std::ostringstream os;
      os << "head: " << what << " has " << got << " values, expected " << want;
      throw ShapeError(os.str());
    };
    if (dense1_kernel.size() != features * hidden)
      bad("dense1 kernel", features * hidden, dense1_kernel.size());
    if (dense1_bias.size() != hidden) bad("dense1 bias", hidden, dense1_bias.size());
    if (bn_gamma.size() != hidden) bad("bn gamma", hidden, bn_gamma.size());
    if (bn_beta.size() != hidden) bad("bn beta", hidden, bn_beta.size());
    if (bn_moving_mean.size() != hidden) bad("bn moving_mean", hidden, bn_moving_mean.size());
    if (bn_moving_variance.size() != hidden)
      bad("bn moving_variance", hidden, bn_moving_variance.size());
    if (dense2_kernel.size() != hidden) bad("dense2 kernel", hidden, dense2_kernel.size());
  }

  template <typename Other>
  HeadWeights<Other> cast() const {
    const auto conv = [](const std::vector<Real>& v) {
      return std::vector<Other>(v.begin(), v.end());
    };
    HeadWeights<Other> out;
    out.features = features;
    out.hidden = hidden;
    out.dense1_kernel = conv(dense1_kernel);
    out.dense1_bias = conv(dense1_bias);
    out.bn_gamma = conv(bn_gamma);
    out.bn_beta = conv(bn_beta);
    out.bn_moving_mean = conv(bn_moving_mean);
    out.bn_moving_variance = conv(bn_moving_variance);
    out.bn_epsilon = static_cast<Other>(bn_epsilon);
    out.dense2_kernel = conv(dense2_kernel);
    out.dense2_bias = static_cast<Other>(dense2_bias);
    out.dropout_rate = dropout_rate;
    return out;
  }
};

// Activations captured by a forward pass, consumed by head_backward.
template <typename Real>
struct HeadCache {
  Mode mode = Mode::kInfer;
  std::size_t rows = 0;
  std::size_t features = 0;
  std::size_t hidden = 0;
  std::vector<Real> input;       // [rows, features]
  std::vector<Real> pre_relu;    // [rows, hidden]
  std::vector<Real> normalized;  // x-hat, [rows, hidden]
  std::vector<Real> inv_std;     // per hidden unit
  std::vector<Real> batch_mean;  // TRAIN only
  std::vector<Real> batch_var;   // TRAIN only, biased
  std::vector<Real> dropped;     // dropout output, [rows, hidden]
  std::vector<Real> drop_scale;  // per element: 0 or 1/(1-rate)
  std::vector<Real> probs;       // [rows]
  std::vector<Real> gamma;       // copies of the weights backward needs
  std::vector<Real> dense2_kernel;
};

template <typename Real>
struct HeadGrads {
  std::vector<Real> dense1_kernel;
  std::vector<Real> dense1_bias;
  std::vector<Real> bn_gamma;
  std::vector<Real> bn_beta;
  std::vector<Real> dense2_kernel;
  Real dense2_bias = Real(0);
};

// Forward through the head. TRAIN normalizes with batch statistics and applies
// dropout seeded by `seed`; INFER uses moving statistics and no dropout.
template <typename Real>
std::vector<Real> head_forward(const HeadWeights<Real>& w, std::span<const Real> features,
                               std::size_t rows, Mode mode, std::uint64_t seed,
                               HeadCache<Real>* cache = nullptr) {
  w.validate();
  const std::size_t fin = w.features, hid = w.hidden;
  if (rows == 0 || features.size() != rows * fin) {
    std::ostringstream os;
    os << "head: expected " << rows << " x " << fin << " features, got " << features.size()
       << " values";
    throw ShapeError(os.str());
  }

  std::vector<Real> z(rows * hid);
  for (std::size_t r = 0; r < rows; ++r) {
    Real* zr = z.data() + r * hid;
    for (std::size_t j = 0; j < hid; ++j) zr[j] = w.dense1_bias[j];
    const Real* xr = features.data() + r * fin;
    for (std::size_t k = 0; k < fin; ++k) {
      const Real xv = xr[k];
      const Real* wk = w.dense1_kernel.data() + k * hid;
      for (std::size_t j = 0; j < hid; ++j) zr[j] += xv * wk[j];
    }
  }
  std::vector<Real> a(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] < Real(0) ? Real(0) : z[i];  // NaN passes through

  std::vector<Real> mean(hid), var(hid), inv_std(hid);
  if (mode == Mode::kTrain) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < hid; ++j) mean[j] += a[r * hid + j];
    for (auto& m : mean) m /= static_cast<Real>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < hid; ++j) {
        const Real d = a[r * hid + j] - mean[j];
        var[j] += d * d;
      }
    }
    for (auto& v : var) v /= static_cast<Real>(rows);
  } else {
    mean = w.bn_moving_mean;
    var = w.bn_moving_variance;
  }
  for (std::size_t j = 0; j < hid; ++j) inv_std[j] = Real(1) / std::sqrt(var[j] + w.bn_epsilon);

  std::vector<Real> xhat(a.size()), dropped(a.size()), scale(a.size(), Real(1));
  if (mode == Mode::kTrain && w.dropout_rate > 0.0f) {
    const auto keep = dropout_keep_mask(a.size(), w.dropout_rate, seed);
    const Real s = Real(1) / (Real(1) - static_cast<Real>(w.dropout_rate));
    for (std::size_t i = 0; i < keep.size(); ++i) scale[i] = keep[i] ? s : Real(0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = r * hid + j;
      xhat[i] = (a[i] - mean[j]) * inv_std[j];
      dropped[i] = (w.bn_gamma[j] * xhat[i] + w.bn_beta[j]) * scale[i];
    }
  }

  std::vector<Real> probs(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real logit = w.dense2_bias;
    for (std::size_t j = 0; j < hid; ++j) logit += dropped[r * hid + j] * w.dense2_kernel[j];
    probs[r] = stable_sigmoid(logit);
  }

  if (cache) {
    cache->mode = mode;
    cache->rows = rows;
    cache->features = fin;
    cache->hidden = hid;
    cache->input.assign(features.begin(), features.end());
    cache->pre_relu = std::move(z);
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    if (mode == Mode::kTrain) {
      cache->batch_mean = std::move(mean);
      cache->batch_var = std::move(var);
    } else {
      cache->batch_mean.clear();
      cache->batch_var.clear();
    }
    cache->dropped = std::move(dropped);
    cache->drop_scale = std::move(scale);
    cache->probs = probs;
    cache->gamma = w.bn_gamma;
    cache->dense2_kernel = w.dense2_kernel;
  }
  return probs;
}

// Reverse-mode gradients of a scalar loss with respect to the trainable head
// parameters, given dLoss/dProbability per row. Gradients are summed over rows.
template <typename Real>
HeadGrads<Real> head_backward(const HeadCache<Real>& cache, std::span<const Real> upstream) {
  const std::size_t rows = cache.rows, fin = cache.features, hid = cache.hidden;
  if (rows == 0 || upstream.size() != rows || cache.probs.size() != rows ||
      cache.input.size() != rows * fin || cache.pre_relu.size() != rows * hid ||
      cache.normalized.size() != rows * hid || cache.dropped.size() != rows * hid ||
      cache.drop_scale.size() != rows * hid || cache.gamma.size() != hid ||
      cache.dense2_kernel.size() != hid || cache.inv_std.size() != hid) {
    std::ostringstream os;
    os << "head_backward: cache inconsistent with upstream gradient of " << upstream.size()
       << " rows (cache rows " << rows << ")";
    throw ShapeError(os.str());
  }

  HeadGrads<Real> g;
  g.dense1_kernel.assign(fin * hid, Real(0));
  g.dense1_bias.assign(hid, Real(0));
  g.bn_gamma.assign(hid, Real(0));
  g.bn_beta.assign(hid, Real(0));
  g.dense2_kernel.assign(hid, Real(0));

  // Sigmoid and dense2.
  std::vector<Real> dlogit(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real p = cache.probs[r];
    dlogit[r] = upstream[r] * p * (Real(1) - p);
    g.dense2_bias += dlogit[r];
  }
  std::vector<Real> dy(rows * hid);  // gradient at the BN output (before dropout)
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = r * hid + j;
      g.dense2_kernel[j] += cache.dropped[i] * dlogit[r];
      dy[i] = dlogit[r] * cache.dense2_kernel[j] * cache.drop_scale[i];
    }
  }

  // Batch norm.
  std::vector<Real> sum_dy(hid, Real(0)), sum_dy_xhat(hid, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = r * hid + j;
      sum_dy[j] += dy[i];
      sum_dy_xhat[j] += dy[i] * cache.normalized[i];
    }
  }
  g.bn_beta = sum_dy;
  g.bn_gamma = sum_dy_xhat;

  std::vector<Real> dz(rows * hid);
  const Real n = static_cast<Real>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = r * hid + j;
      const Real k = cache.gamma[j] * cache.inv_std[j];
      Real da;
      if (cache.mode == Mode::kTrain) {
        da = k * (dy[i] - sum_dy[j] / n - cache.normalized[i] * sum_dy_xhat[j] / n);
      } else {
        da = k * dy[i];
      }
      dz[i] = cache.pre_relu[i] > Real(0) ? da : Real(0);
    }
  }

  // Dense1.
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* dzr = dz.data() + r * hid;
    const Real* xr = cache.input.data() + r * fin;
    for (std::size_t j = 0; j < hid; ++j) g.dense1_bias[j] += dzr[j];
    for (std::size_t k = 0; k < fin; ++k) {
      const Real xv = xr[k];
      if (xv == Real(0)) continue;
      Real* gk = g.dense1_kernel.data() + k * hid;
      for (std::size_t j = 0; j < hid; ++j) gk[j] += xv * dzr[j];
    }
  }
  return g;
}

}  // namespace ctdiag
