#pragma once

// Central finite differences of mean BCE through the head, in double.

#include "ctdiag/head.hpp"
#include "ctdiag/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace gradcheck {

using ctdiag::HeadWeights;

inline HeadWeights<double> random_head(std::size_t features, std::size_t hidden,
                                       std::mt19937_64& gen) {
  std::normal_distribution<double> n(0.0, 0.5);
  std::uniform_real_distribution<double> pos(0.5, 1.5);
  HeadWeights<double> w;
  w.features = features;
  w.hidden = hidden;
  const auto fill = [&](std::vector<double>& v, std::size_t count) {
    v.resize(count);
    for (double& x : v) x = n(gen);
  };
  fill(w.dense1_kernel, features * hidden);
  fill(w.dense1_bias, hidden);
  w.bn_gamma.resize(hidden);
  for (double& g : w.bn_gamma) g = pos(gen);
  fill(w.bn_beta, hidden);
  fill(w.bn_moving_mean, hidden);
  w.bn_moving_variance.resize(hidden);
  for (double& v : w.bn_moving_variance) v = pos(gen);
  fill(w.dense2_kernel, hidden);
  w.dense2_bias = n(gen);
  w.dropout_rate = 0.2f;
  return w;
}

inline double mean_bce(const HeadWeights<double>& w, const std::vector<double>& x,
                       const std::vector<double>& y, std::size_t rows, std::uint64_t seed) {
  const auto p = ctdiag::head_forward<double>(w, x, rows, ctdiag::Mode::kTrain, seed);
  return ctdiag::bce_loss<double>(p, y).loss;
}

struct Outcome {
  double worst = 0.0;            // largest per-tensor relative error
  std::string worst_name;        // parameter tensor with that error
  double worst_component = 0.0;  // largest single-component relative error
  std::string worst_component_name;
  std::size_t components = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double relative(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// True when every pre-activation of dense1 is at least `margin` away from the
// ReLU kink, so a step of size h cannot cross it, and every live unit's batch
// variance is well above the BN epsilon. A unit whose variance is near epsilon
// curves on a scale of sqrt(epsilon), which swamps a 1e-3 central difference.
inline bool clear_of_kinks(const HeadWeights<double>& w, const std::vector<double>& x,
                           std::size_t rows, double margin) {
  ctdiag::HeadCache<double> cache;
  ctdiag::head_forward<double>(w, x, rows, ctdiag::Mode::kTrain, 0, &cache);
  for (double z : cache.pre_relu)
    if (std::abs(z) < margin) return false;
  for (double p : cache.probs)
    if (p < 1e-6 || p > 1 - 1e-6) return false;
  for (double v : cache.batch_var)
    if (v != 0.0 && v < 50 * w.bn_epsilon) return false;
  return true;
}

// Compares head_backward against central differences for every trainable component.
inline Outcome check(HeadWeights<double> w, const std::vector<double>& x, const std::vector<double>& y,
                     std::size_t rows, std::uint64_t seed, double h) {
  ctdiag::HeadCache<double> cache;
  const auto p = ctdiag::head_forward<double>(w, x, rows, ctdiag::Mode::kTrain, seed, &cache);
  const auto bce = ctdiag::bce_loss<double>(p, y);
  const auto g = ctdiag::head_backward<double>(cache, bce.grad);

  Outcome out;
  const auto probe = [&](const std::string& name, double* param, std::size_t count, const double* grad) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double saved = param[i];
      param[i] = saved + h;
      const double up = mean_bce(w, x, y, rows, seed);
      param[i] = saved - h;
      const double down = mean_bce(w, x, y, rows, seed);
      param[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff2 += (grad[i] - numeric) * (grad[i] - numeric);
      a2 += grad[i] * grad[i];
      n2 += numeric * numeric;
      const double err = relative(grad[i], numeric);
      ++out.components;
      if (err > out.worst_component) {
        out.worst_component = err;
        out.worst_component_name = name + "[" + std::to_string(i) + "]";
      }
    }
    const double err = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
    if (err > out.worst) {
      out.worst = err;
      out.worst_name = name;
    }
  };
  probe("dense1_kernel", w.dense1_kernel.data(), w.dense1_kernel.size(), g.dense1_kernel.data());
  probe("dense1_bias", w.dense1_bias.data(), w.dense1_bias.size(), g.dense1_bias.data());
  probe("bn_gamma", w.bn_gamma.data(), w.bn_gamma.size(), g.bn_gamma.data());
  probe("bn_beta", w.bn_beta.data(), w.bn_beta.size(), g.bn_beta.data());
  probe("dense2_kernel", w.dense2_kernel.data(), w.dense2_kernel.size(), g.dense2_kernel.data());
  probe("dense2_bias", &w.dense2_bias, 1, &g.dense2_bias);
  return out;
}

// Draws batches until one is clear of ReLU kinks, then checks it. Features are
// drawn on [-scale, scale].
inline Outcome random_batch_check(std::mt19937_64& gen, std::size_t features, std::size_t hidden,
                                  std::size_t rows, double h, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::bernoulli_distribution label(0.5);
  for (;;) {
    const HeadWeights<double> w = random_head(features, hidden, gen);
    std::vector<double> x(rows * features), y(rows);
    for (double& v : x) v = u(gen);
    for (double& v : y) v = label(gen) ? 1.0 : 0.0;
    // A kernel step of h moves a pre-activation by up to h * scale.
    if (!clear_of_kinks(w, x, rows, 2 * h * std::max(scale, 1.0) + 10 * h)) continue;
    return check(w, x, y, rows, gen(), h);
  }
}

}  // namespace gradcheck
