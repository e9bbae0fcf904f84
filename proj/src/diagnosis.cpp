#include "ctdiag/diagnosis.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace ctdiag {
namespace {

void check_threshold(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    std::ostringstream os;
    os << "threshold " << t << " outside [0, 1]";
    throw std::invalid_argument(os.str());
  }
}

std::size_t count_covid(std::span<const Label> labels) {
  if (labels.empty()) throw std::invalid_argument("diagnosis of an empty slice list is undefined");
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::kCovid));
}

}  // namespace

std::optional<Label> parse_label(std::string_view text) {
  if (text == "COVID" || text == "covid") return Label::kCovid;
  if (text == "NON_COVID" || text == "non-covid" || text == "non_covid") return Label::kNonCovid;
  return std::nullopt;
}

std::string_view rule_name(AggregationRule rule) noexcept {
  switch (rule) {
    case AggregationRule::kMajority: return "majority";
    case AggregationRule::kMajorityStrict: return "majority-strict";
    case AggregationRule::kAny: return "any";
  }
  return "majority";
}

std::optional<AggregationRule> parse_rule(std::string_view text) {
  if (text == "majority") return AggregationRule::kMajority;
  if (text == "majority-strict") return AggregationRule::kMajorityStrict;
  if (text == "any") return AggregationRule::kAny;
  return std::nullopt;
}

Label classify_slice(double p1, const ThresholdPolicy& policy) {
  check_threshold(policy.threshold);
  if (!(p1 >= 0.0 && p1 <= 1.0)) {
    std::ostringstream os;
    os << "slice probability " << p1 << " outside [0, 1]";
    throw std::invalid_argument(os.str());
  }
  return p1 > policy.threshold ? Label::kNonCovid : Label::kCovid;
}

Label diagnose_majority(std::span<const Label> labels) {
  const std::size_t covid = count_covid(labels);
  return labels.size() - covid >= covid ? Label::kNonCovid : Label::kCovid;
}

Label diagnose_majority_strict(std::span<const Label> labels) {
  const std::size_t covid = count_covid(labels);
  return labels.size() - covid > covid ? Label::kNonCovid : Label::kCovid;
}

Label diagnose_any(std::span<const Label> labels) {
  return count_covid(labels) > 0 ? Label::kCovid : Label::kNonCovid;
}

Label aggregate(std::span<const Label> labels, AggregationRule rule) {
  switch (rule) {
    case AggregationRule::kMajority: return diagnose_majority(labels);
    case AggregationRule::kMajorityStrict: return diagnose_majority_strict(labels);
    case AggregationRule::kAny: return diagnose_any(labels);
  }
  throw std::invalid_argument("unknown aggregation rule");
}

VolumePrediction diagnose_volume(std::string volume_id, std::span<const float> probs,
                                 const ThresholdPolicy& policy, AggregationRule rule) {
  if (probs.empty()) {
    throw std::invalid_argument("volume " + volume_id + " has no slice probabilities");
  }
  VolumePrediction v;
  v.volume_id = std::move(volume_id);
  v.probabilities.assign(probs.begin(), probs.end());
  v.slice_labels.reserve(probs.size());
  for (float p : probs) v.slice_labels.push_back(classify_slice(p, policy));
  v.covid_count = static_cast<std::size_t>(
      std::count(v.slice_labels.begin(), v.slice_labels.end(), Label::kCovid));
  v.noncovid_count = v.slice_labels.size() - v.covid_count;
  v.diagnosis = aggregate(v.slice_labels, rule);
  return v;
}

std::vector<SweepPoint> sweep_thresholds(std::span<const VolumeScores> volumes,
                                         std::span<const double> thresholds,
                                         AggregationRule rule, double z) {
  if (volumes.empty()) throw std::invalid_argument("sweep: no volumes");
  if (thresholds.empty()) throw std::invalid_argument("sweep: no thresholds");
  for (const auto& v : volumes) {
    if (!v.truth) throw std::invalid_argument("sweep: volume " + v.volume_id + " is unlabeled");
  }
  for (double t : thresholds) check_threshold(t);

  std::vector<SweepPoint> points;
  points.reserve(thresholds.size());
  for (double t : thresholds) {
    const ThresholdPolicy policy{t};
    std::vector<Label> vol_pred, vol_true, slice_pred, slice_true;
    for (const auto& v : volumes) {
      VolumePrediction p = diagnose_volume(v.volume_id, v.probabilities, policy, rule);
      vol_pred.push_back(p.diagnosis);
      vol_true.push_back(*v.truth);
      slice_pred.insert(slice_pred.end(), p.slice_labels.begin(), p.slice_labels.end());
      slice_true.insert(slice_true.end(), p.slice_labels.size(), *v.truth);
    }
    SweepPoint point;
    point.threshold = t;
    point.rule = rule;
    point.volume = build_report(confusion(vol_pred, vol_true), z, CountUnit::kVolumes);
    point.slice = build_report(confusion(slice_pred, slice_true), z, CountUnit::kSlices);
    points.push_back(point);
  }
  return points;
}

}  // namespace ctdiag
