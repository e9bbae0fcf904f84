#pragma once

// Head-only fine-tuning: binary cross-entropy, Adam, reduce-on-plateau.

#include "ctdiag/head.hpp"
#include "ctdiag/ingest.hpp"
#include "ctdiag/xception.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctdiag {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 128;
  int epochs = 13;
  int plateau_patience = 2;
  double plateau_factor = 0.1;
  double min_lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-7;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  int wait = 0;
  double lr = 0.001;
};

PlateauState plateau_init(const TrainConfig& config);

// Strict improvement resets the wait counter; `patience` non-improving epochs
// in a row scale the rate by `factor` (floored at min_lr) and reset the counter.
PlateauState plateau_update(PlateauState state, double epoch_val_loss, const TrainConfig& config);

inline constexpr double kBceClip = 1e-7;

template <typename Real>
struct BceResult {
  Real loss = Real(0);
  std::vector<Real> grad;  // dloss/dp per row
};

// Mean binary cross-entropy with p clipped to [1e-7, 1 - 1e-7]. The gradient is
// that of the clipped forward (zero where clipping is active).
template <typename Real>
BceResult<Real> bce_loss(std::span<const Real> p, std::span<const Real> y) {
  if (p.size() != y.size()) {
    throw std::invalid_argument("bce_loss: " + std::to_string(p.size()) + " probabilities vs " +
                                std::to_string(y.size()) + " labels");
  }
  if (p.empty()) throw std::invalid_argument("bce_loss: empty batch");
  const Real lo = static_cast<Real>(kBceClip);
  const Real hi = Real(1) - lo;
  const Real n = static_cast<Real>(p.size());
  BceResult<Real> r;
  r.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool clipped = p[i] < lo || p[i] > hi;
    const Real q = p[i] < lo ? lo : (p[i] > hi ? hi : p[i]);
    r.loss -= y[i] * std::log(q) + (Real(1) - y[i]) * std::log(Real(1) - q);
    r.grad[i] = clipped ? Real(0) : (-y[i] / q + (Real(1) - y[i]) / (Real(1) - q)) / n;
  }
  r.loss /= n;
  return r;
}

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long long t = 0;
};

// One bias-corrected Adam update over a list of parameter buffers.
void adam_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
               AdamState& state, double lr, const TrainConfig& config);

// Base features for every slice of a manifest, with 0/1 targets (1 = NON_COVID).
struct FeatureSet {
  Tensor features;             // [N, 2048]
  std::vector<float> targets;  // empty if unlabeled
  std::vector<SliceRef> provenance;
};

FeatureSet extract_features(const ModelGraph& model, const DatasetManifest& manifest,
                            std::size_t batch_size, std::size_t workers = 1);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double val_precision = 0.0;  // class-averaged, slice level, threshold 0.5
  double val_recall = 0.0;
  double lr = 0.0;             // rate used during the epoch
};

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains the head parameters of a frozen model in place from precomputed features.
std::vector<EpochRecord> train_head_on_features(ModelGraph& model, const FeatureSet& train,
                                                const FeatureSet& val, const TrainConfig& config,
                                                const EpochCallback& on_epoch = {});

// Extracts features from both manifests, then trains.
std::vector<EpochRecord> train_head(ModelGraph& model, const DatasetManifest& train,
                                    const DatasetManifest& val, const TrainConfig& config,
                                    const EpochCallback& on_epoch = {});

// epoch,train_loss,val_loss,train_acc,val_acc,val_precision,val_recall,lr
// followed by one "mean" row averaging every column across epochs.
void write_history_csv(std::ostream& os, std::span<const EpochRecord> history);

}  // namespace ctdiag
