#pragma once

// Slice labeling by probability threshold and patient-level aggregation.

#include "ctdiag/labels.hpp"
#include "ctdiag/metrics.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ctdiag {

struct ThresholdPolicy {
  double threshold = 0.5;  // slice is NON_COVID iff p1 > threshold
};

enum class AggregationRule {
  kMajority,        // NON_COVID iff #NON_COVID >= #COVID (ties -> NON_COVID)
  kMajorityStrict,  // NON_COVID iff #NON_COVID > #COVID (ties -> COVID)
  kAny,             // COVID iff any slice is COVID
};

std::string_view rule_name(AggregationRule rule) noexcept;
std::optional<AggregationRule> parse_rule(std::string_view text);

inline const std::vector<double> kDefaultThresholds{0.15, 0.5, 0.9};

Label classify_slice(double p1, const ThresholdPolicy& policy);

Label diagnose_majority(std::span<const Label> labels);
Label diagnose_majority_strict(std::span<const Label> labels);
Label diagnose_any(std::span<const Label> labels);
Label aggregate(std::span<const Label> labels, AggregationRule rule);

struct VolumePrediction {
  std::string volume_id;
  std::vector<float> probabilities;
  std::vector<Label> slice_labels;
  std::size_t covid_count = 0;
  std::size_t noncovid_count = 0;
  Label diagnosis = Label::kCovid;
};

VolumePrediction diagnose_volume(std::string volume_id, std::span<const float> probs,
                                 const ThresholdPolicy& policy, AggregationRule rule);

// Per-volume slice probabilities with the ground-truth label, if known.
struct VolumeScores {
  std::string volume_id;
  std::vector<float> probabilities;
  std::optional<Label> truth;
};

struct SweepPoint {
  double threshold = 0.5;
  AggregationRule rule = AggregationRule::kMajority;
  MetricsReport volume;  // patient-level diagnoses, n = volume count
  MetricsReport slice;   // every slice scored against its volume label, n = slice count
};

std::vector<SweepPoint> sweep_thresholds(std::span<const VolumeScores> volumes,
                                         std::span<const double> thresholds,
                                         AggregationRule rule, double z = kDefaultZ);

}  // namespace ctdiag
