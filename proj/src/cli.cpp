#include "ctdiag/cli.hpp"

#include "ctdiag/diagnosis.hpp"
#include "ctdiag/errors.hpp"
#include "ctdiag/ingest.hpp"
#include "ctdiag/metrics.hpp"
#include "ctdiag/ntc.hpp"
#include "ctdiag/trainer.hpp"
#include "ctdiag/xception.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace ctdiag {
namespace {

using nlohmann::json;

std::size_t default_workers() {
  if (const char* env = std::getenv("CT_DIAG_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

struct Options {
  std::string weights;
  std::string weights_out;
  std::string manifest_out;
  std::string input;
  std::string val;
  std::string out;
  std::string history;
  std::string rule = "majority";
  double threshold = 0.5;
  std::vector<double> thresholds;
  double z = kDefaultZ;
  std::size_t batch = 32;
  std::size_t workers = default_workers();
  TrainConfig train;
};

ModelGraph frozen_model() {
  ModelGraph m = build_modified_xception();
  freeze_base(m);
  return m;
}

// Full bind, or base-only bind plus a fresh head when the file carries no head.
void load_weights(ModelGraph& model, const std::string& path, std::uint64_t seed,
                  bool allow_base_only) {
  auto entries = load_ntc(path);
  const BindScope scope = detect_bind_scope(entries);
  if (scope == BindScope::kBaseOnly && !allow_base_only) {
    bind_weights(model, std::move(entries), BindScope::kFull);  // reports the missing head
  }
  bind_weights(model, std::move(entries), scope);
  if (scope == BindScope::kBaseOnly) init_head(model, seed);
}

AggregationRule rule_from(const std::string& text) {
  const auto r = parse_rule(text);
  if (!r) throw CLI::ValidationError("--rule", "expected majority, majority-strict or any");
  return *r;
}

std::vector<VolumeScores> score_volumes(const ModelGraph& model, const DatasetManifest& manifest,
                                        std::size_t batch, std::size_t workers) {
  std::vector<VolumeScores> out;
  std::map<std::string, std::size_t> index;
  for (const auto& v : manifest.volumes) {
    index.emplace(v.volume_id, out.size());
    out.push_back({v.volume_id, {}, v.label});
  }
  auto stream = batch_iter(manifest, batch, model.input_side, workers);
  while (auto b = stream.next()) {
    const auto probs = forward_head(model, base_features(model, b->tensor, workers), Mode::kInfer);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      out[index.at(b->provenance[i].volume_id)].probabilities.push_back(probs[i]);
    }
  }
  return out;
}

void emit_warnings(const DatasetManifest& m, std::ostream& err) {
  for (const auto& w : m.warnings) err << "warning: " << w << '\n';
}

DatasetManifest scan_nonempty(const std::string& root, std::ostream& err) {
  DatasetManifest m = scan_dataset(root);
  emit_warnings(m, err);
  if (m.volumes.empty()) throw DataError("no volumes found under " + root);
  return m;
}

void write_output(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path);
  os << text;
}

json scores_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

json report_json(const MetricsReport& r) {
  json j;
  j["n"] = r.n;
  j["unit"] = std::string(count_unit_name(r.unit));
  j["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn},
                    {"fn", r.counts.fn}};
  j["accuracy"] = r.accuracy;
  j["covid"] = scores_json(r.covid);
  j["non_covid"] = scores_json(r.noncovid);
  j["average_precision"] = r.avg_precision;
  j["average_recall"] = r.avg_recall;
  j["macro_f1_avgpr"] = r.macro_f1_avgpr;
  j["macro_f1_mean"] = r.macro_f1_mean;
  j["ci_radius"] = r.ci_radius ? json(*r.ci_radius) : json(nullptr);
  j["ci_score"] = "macro_f1_mean";
  j["z"] = r.z;
  return j;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  ModelGraph m = frozen_model();
  if (!o.weights.empty()) load_weights(m, o.weights, 0, true);
  const ParamCounts c = count_params(m);
  const Shape& base = m.base_output_shape();
  json j;
  j["total_params"] = c.total;
  j["trainable_params"] = c.trainable;
  j["base_params"] = base_param_count(m);
  j["conv_layer_count"] = conv_layer_count(m);
  j["base_output_shape"] = base;
  j["input_shape"] = {m.input_side, m.input_side, 3};
  j["weights_loaded"] = !o.weights.empty();
  out << j.dump(2) << '\n';
  if (!o.manifest_out.empty()) write_output(o.manifest_out, name_manifest(m), out);
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  const AggregationRule rule = rule_from(o.rule);
  ModelGraph m = frozen_model();
  load_weights(m, o.weights, 0, false);
  const DatasetManifest manifest = scan_nonempty(o.input, err);
  const auto volumes = score_volumes(m, manifest, o.batch, o.workers);

  std::ostringstream csv;
  csv << "volume_id,n_slices,n_covid_slices,n_noncovid_slices,diagnosis\n";
  for (const auto& v : volumes) {
    const VolumePrediction p =
        diagnose_volume(v.volume_id, v.probabilities, ThresholdPolicy{o.threshold}, rule);
    csv << p.volume_id << ',' << p.slice_labels.size() << ',' << p.covid_count << ','
        << p.noncovid_count << ',' << label_name(p.diagnosis) << '\n';
  }
  write_output(o.out, csv.str(), out);
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const AggregationRule rule = rule_from(o.rule);
  const std::vector<double> thresholds = o.thresholds.empty() ? kDefaultThresholds : o.thresholds;
  ModelGraph m = frozen_model();
  load_weights(m, o.weights, 0, false);
  const DatasetManifest manifest = scan_nonempty(o.input, err);
  require_labels(manifest);
  const auto volumes = score_volumes(m, manifest, o.batch, o.workers);
  const auto points = sweep_thresholds(volumes, thresholds, rule, o.z);

  json j;
  j["rule"] = std::string(rule_name(rule));
  j["z"] = o.z;
  j["volumes"] = manifest.volumes.size();
  j["slices"] = manifest.slice_count();
  j["reports"] = json::array();
  json summary = json::array();
  for (const auto& p : points) {
    j["reports"].push_back(
        {{"threshold", p.threshold}, {"volume", report_json(p.volume)}, {"slice", report_json(p.slice)}});
    summary.push_back({{"threshold", p.threshold},
                       {"volume_accuracy", p.volume.accuracy},
                       {"volume_macro_f1_avgpr", p.volume.macro_f1_avgpr},
                       {"volume_macro_f1_mean", p.volume.macro_f1_mean},
                       {"slice_accuracy", p.slice.accuracy},
                       {"slice_macro_f1_mean", p.slice.macro_f1_mean}});
  }
  j["summary"] = summary;
  write_output(o.out, j.dump(2) + "\n", out);

  err << "rule=" << rule_name(rule) << " z=" << o.z << "\n"
      << "threshold  vol_acc  vol_f1(avgPR)  vol_f1(mean)  slice_acc  slice_f1(mean)\n";
  for (const auto& p : points) {
    err << std::fixed << std::setprecision(4) << std::setw(9) << p.threshold << "  "
        << std::setw(7) << p.volume.accuracy << "  " << std::setw(13) << p.volume.macro_f1_avgpr
        << "  " << std::setw(12) << p.volume.macro_f1_mean << "  " << std::setw(9)
        << p.slice.accuracy << "  " << std::setw(14) << p.slice.macro_f1_mean << '\n';
  }
  err.unsetf(std::ios::floatfield);
  return kExitOk;
}

int cmd_train_head(const Options& o, std::ostream& out, std::ostream& err) {
  ModelGraph m = frozen_model();
  if (o.weights.empty()) {
    err << "warning: no --weights-in; using a seeded random base (synthetic runs only)\n";
    init_base_random(m, o.train.seed);
    init_head(m, o.train.seed);
  } else {
    load_weights(m, o.weights, o.train.seed, true);
  }
  const DatasetManifest train = scan_nonempty(o.input, err);
  const DatasetManifest val = scan_nonempty(o.val, err);
  require_labels(train);
  require_labels(val);

  TrainConfig cfg = o.train;
  cfg.workers = o.workers;
  const auto history = train_head(m, train, val, cfg, [&err](const EpochRecord& r) {
    err << "epoch " << r.epoch << " train_loss=" << r.train_loss << " val_loss=" << r.val_loss
        << " val_acc=" << r.val_acc << " lr=" << r.lr << '\n';
  });
  save_ntc(m, o.weights_out);
  std::ostringstream csv;
  write_history_csv(csv, history);
  write_output(o.history, csv.str(), out);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"CT-volume COVID-19 diagnosis with a modified Xception classifier", "ctdiag"};
  app.require_subcommand(1);
  Options o;

  auto* inspect = app.add_subcommand("inspect", "Report parameter counts and model geometry as JSON");
  inspect->add_option("--weights", o.weights, "NTC v1 weight file to bind");
  inspect->add_option("--manifest-out", o.manifest_out, "Write the tensor name manifest here");

  auto add_inference = [&](CLI::App* cmd) {
    cmd->add_option("--weights", o.weights, "NTC v1 weight file")->required();
    cmd->add_option("--rule", o.rule, "majority | majority-strict | any")->capture_default_str();
    cmd->add_option("--out", o.out, "Output path (default stdout)");
    cmd->add_option("--batch", o.batch, "Slices per inference batch")->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd->add_option("--workers", o.workers, "Parallel preprocessing/inference workers")
        ->capture_default_str()->check(CLI::PositiveNumber);
  };

  auto* predict = app.add_subcommand("predict", "Per-volume diagnosis CSV");
  add_inference(predict);
  predict->add_option("--input", o.input, "Dataset root")->required();
  predict->add_option("--threshold", o.threshold, "Class-1 probability threshold")
      ->capture_default_str()->check(CLI::Range(0.0, 1.0));

  auto add_eval = [&](CLI::App* cmd) {
    add_inference(cmd);
    cmd->add_option("--data", o.input, "Labeled dataset root")->required();
    cmd->add_option("--thresholds", o.thresholds, "Comma-separated thresholds (default 0.15,0.5,0.9)")
        ->delimiter(',')->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--z", o.z, "Confidence-interval z")->capture_default_str();
  };
  auto* evaluate = app.add_subcommand("evaluate", "Slice- and volume-level metrics JSON");
  add_eval(evaluate);
  auto* sweep = app.add_subcommand("sweep", "Alias of evaluate over a threshold list");
  add_eval(sweep);

  auto* train = app.add_subcommand("train-head", "Train the classifier head of a frozen model");
  train->add_option("--data", o.input, "Labeled training root")->required();
  train->add_option("--val", o.val, "Labeled validation root")->required();
  train->add_option("--weights-in", o.weights, "Starting weights (full or base-only NTC)");
  train->add_option("--weights-out", o.weights_out, "Trained NTC output")->required();
  train->add_option("--history", o.history, "History CSV output (default stdout)");
  train->add_option("--epochs", o.train.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--batch", o.train.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", o.train.learning_rate)->capture_default_str();
  train->add_option("--patience", o.train.plateau_patience)->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--factor", o.train.plateau_factor)->capture_default_str();
  train->add_option("--min-lr", o.train.min_lr)->capture_default_str();
  train->add_option("--seed", o.train.seed)->capture_default_str();
  train->add_option("--workers", o.workers)->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*inspect) return cmd_inspect(o, out);
    if (*predict) return cmd_predict(o, out, err);
    if (*evaluate || *sweep) return cmd_evaluate(o, out, err);
    if (*train) {
      o.train.validate();
      return cmd_train_head(o, out, err);
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ModelError& e) {
    err << "error: " << e.what() << '\n';
    return kExitModel;
  } catch (const TrainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitModel;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ctdiag
