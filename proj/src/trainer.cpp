#include "ctdiag/trainer.hpp"

#include "ctdiag/diagnosis.hpp"
#include "ctdiag/errors.hpp"
#include "ctdiag/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace ctdiag {

void TrainConfig::validate() const {
  const auto fail = [](const std::string& what) {
    throw std::invalid_argument("train config: " + what);
  };
  if (!(learning_rate > 0.0)) fail("learning rate must be positive");
  if (batch_size == 0) fail("batch size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (plateau_patience < 1) fail("patience must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau factor must lie in (0, 1)");
  if (!(min_lr > 0.0) || min_lr > learning_rate) fail("min_lr must lie in (0, learning_rate]");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam epsilon must be positive");
}

PlateauState plateau_init(const TrainConfig& config) {
  PlateauState s;
  s.lr = config.learning_rate;
  return s;
}

PlateauState plateau_update(PlateauState state, double epoch_val_loss,
                            const TrainConfig& config) {
  if (epoch_val_loss < state.best) {
    state.best = epoch_val_loss;
    state.wait = 0;
    return state;
  }
  if (++state.wait >= config.plateau_patience) {
    state.lr = std::max(state.lr * config.plateau_factor, config.min_lr);
    state.wait = 0;
  }
  return state;
}

void adam_step(std::span<const std::span<float>> params,
               std::span<const std::span<const float>> grads, AdamState& state, double lr,
               const TrainConfig& config) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) +
                                " parameter buffers vs " + std::to_string(grads.size()) +
                                " gradients");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state tracks a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || state.m[i].size() != params[i].size()) {
      throw std::invalid_argument("adam_step: shape mismatch for parameter buffer " +
                                  std::to_string(i));
    }
  }
  ++state.t;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double g = grads[i][k];
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      params[i][k] = static_cast<float>(params[i][k] -
                                        lr * m_hat / (std::sqrt(v_hat) + config.adam_epsilon));
    }
  }
}

FeatureSet extract_features(const ModelGraph& model, const DatasetManifest& manifest,
                            std::size_t batch_size, std::size_t workers) {
  const std::size_t width = model.base_output_shape().back();
  const std::size_t total = manifest.slice_count();
  if (total == 0) throw DataError("dataset contains no slices");
  FeatureSet out;
  out.features = Tensor({total, width});
  const bool labeled = manifest.fully_labeled();
  std::size_t row = 0;
  auto stream = batch_iter(manifest, batch_size, model.input_side, workers);
  while (auto batch = stream.next()) {
    const Tensor f = base_features(model, batch->tensor, workers);
    std::copy(f.raw(), f.raw() + f.size(), out.features.raw() + row * width);
    row += batch->provenance.size();
    out.provenance.insert(out.provenance.end(), batch->provenance.begin(),
                          batch->provenance.end());
  }
  if (labeled) {
    for (const auto& v : manifest.volumes) {
      out.targets.insert(out.targets.end(), v.slice_paths.size(),
                         *v.label == Label::kNonCovid ? 1.0f : 0.0f);
    }
  }
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Scores {
  double loss = 0.0;
  double accuracy = 0.0;
  double avg_precision = 0.0;
  double avg_recall = 0.0;
};

Scores score_slices(std::span<const float> probs, std::span<const float> targets) {
  Scores s;
  s.loss = static_cast<double>(bce_loss<float>(probs, targets).loss);
  std::vector<Label> pred, truth;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    pred.push_back(classify_slice(probs[i], ThresholdPolicy{0.5}));
    truth.push_back(targets[i] > 0.5f ? Label::kNonCovid : Label::kCovid);
  }
  const MetricsReport r = build_report(confusion(pred, truth), kDefaultZ, CountUnit::kSlices);
  s.accuracy = r.accuracy;
  s.avg_precision = r.avg_precision;
  s.avg_recall = r.avg_recall;
  return s;
}

void check_features(const FeatureSet& set, std::size_t width, const char* which) {
  if (set.features.rank() != 2 || set.features.dim(1) != width) {
    throw std::invalid_argument(std::string(which) + " features must be [N," +
                                std::to_string(width) + "]");
  }
  if (set.targets.size() != set.features.dim(0)) {
    throw DataError(std::string(which) + " data is unlabeled or target count mismatches");
  }
}

}  // namespace

std::vector<EpochRecord> train_head_on_features(ModelGraph& model, const FeatureSet& train,
                                                const FeatureSet& val, const TrainConfig& config,
                                                const EpochCallback& on_epoch) {
  config.validate();
  for (const auto& p : model.params) {
    if (p.base && p.trainable) {
      throw TrainError("model base is not frozen (" + p.name + " is trainable)");
    }
  }
  HeadWeights<float> w = head_weights(model);
  check_features(train, w.features, "training");
  check_features(val, w.features, "validation");

  const std::size_t n = train.features.dim(0);
  const std::size_t fin = w.features;
  const float momentum = model.head.bn_momentum;
  AdamState adam;
  PlateauState plateau = plateau_init(config);
  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(n);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 gen(mix(config.seed ^ mix(static_cast<std::uint64_t>(epoch))));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[gen() % i]);

    double loss_sum = 0.0;
    std::vector<float> train_probs(n), train_targets(n);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::size_t rows = std::min(config.batch_size, n - start);
      std::vector<float> x(rows * fin), y(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t src = order[start + r];
        std::copy(train.features.raw() + src * fin, train.features.raw() + (src + 1) * fin,
                  x.begin() + static_cast<std::ptrdiff_t>(r * fin));
        y[r] = train.targets[src];
      }
      HeadCache<float> cache;
      const std::uint64_t drop_seed =
          mix(config.seed ^ mix((static_cast<std::uint64_t>(epoch) << 32) | batch_index));
      const auto probs = head_forward<float>(w, x, rows, Mode::kTrain, drop_seed, &cache);
      const auto bce = bce_loss<float>(probs, y);
      if (!std::isfinite(bce.loss)) {
        throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index));
      }
      const HeadGrads<float> g = head_backward<float>(cache, bce.grad);

      std::span<float> bias2(&w.dense2_bias, 1);
      std::span<const float> gbias2(&g.dense2_bias, 1);
      const std::span<float> params[] = {w.dense1_kernel, w.dense1_bias, w.bn_gamma,
                                         w.bn_beta,       w.dense2_kernel, bias2};
      const std::span<const float> grads[] = {g.dense1_kernel, g.dense1_bias, g.bn_gamma,
                                              g.bn_beta,       g.dense2_kernel, gbias2};
      adam_step(params, grads, adam, plateau.lr, config);

      for (std::size_t j = 0; j < w.hidden; ++j) {
        w.bn_moving_mean[j] = momentum * w.bn_moving_mean[j] + (1.0f - momentum) * cache.batch_mean[j];
        w.bn_moving_variance[j] =
            momentum * w.bn_moving_variance[j] + (1.0f - momentum) * cache.batch_var[j];
      }
      loss_sum += static_cast<double>(bce.loss) * static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        train_probs[start + r] = probs[r];
        train_targets[start + r] = y[r];
      }
    }

    const auto val_probs =
        head_forward<float>(w, val.features.data(), val.features.dim(0), Mode::kInfer, 0);
    const Scores tr = score_slices(train_probs, train_targets);
    const Scores va = score_slices(val_probs, val.targets);
    if (!std::isfinite(va.loss)) {
      throw TrainError("non-finite validation loss at epoch " + std::to_string(epoch));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_loss = va.loss;
    rec.train_acc = tr.accuracy;
    rec.val_acc = va.accuracy;
    rec.val_precision = va.avg_precision;
    rec.val_recall = va.avg_recall;
    rec.lr = plateau.lr;
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    plateau = plateau_update(plateau, va.loss, config);
  }
  store_head_weights(model, w);
  return history;
}

std::vector<EpochRecord> train_head(ModelGraph& model, const DatasetManifest& train,
                                    const DatasetManifest& val, const TrainConfig& config,
                                    const EpochCallback& on_epoch) {
  config.validate();
  require_labels(train);
  require_labels(val);
  const FeatureSet train_set = extract_features(model, train, config.batch_size, config.workers);
  const FeatureSet val_set = extract_features(model, val, config.batch_size, config.workers);
  return train_head_on_features(model, train_set, val_set, config, on_epoch);
}

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
  os << "epoch,train_loss,val_loss,train_acc,val_acc,val_precision,val_recall,lr\n";
  const auto row = [&os](const std::string& epoch, const EpochRecord& r) {
    std::ostringstream line;
    line << std::setprecision(9) << epoch << ',' << r.train_loss << ',' << r.val_loss << ','
         << r.train_acc << ',' << r.val_acc << ',' << r.val_precision << ',' << r.val_recall
         << ',' << r.lr << '\n';
    os << line.str();
  };
  EpochRecord mean;
  for (const auto& r : history) {
    row(std::to_string(r.epoch), r);
    mean.train_loss += r.train_loss;
    mean.val_loss += r.val_loss;
    mean.train_acc += r.train_acc;
    mean.val_acc += r.val_acc;
    mean.val_precision += r.val_precision;
    mean.val_recall += r.val_recall;
    mean.lr += r.lr;
  }
  if (history.empty()) return;
  const double k = static_cast<double>(history.size());
  mean.train_loss /= k;
  mean.val_loss /= k;
  mean.train_acc /= k;
  mean.val_acc /= k;
  mean.val_precision /= k;
  mean.val_recall /= k;
  mean.lr /= k;
  row("mean", mean);
}

}  // namespace ctdiag
