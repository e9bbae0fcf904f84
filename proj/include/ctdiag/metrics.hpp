#pragma once

// Confusion accounting and the evaluation formulas: accuracy, per-class
// precision/recall/F1, both macro-F1 forms and the binomial confidence radius.

#include "ctdiag/labels.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>

namespace ctdiag {

struct ConfusionCounts {
  std::size_t tp = 0;  // COVID predicted, COVID true
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(std::span<const Label> predictions, std::span<const Label> truths);

double accuracy(const ConfusionCounts& c);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct PerClassScores {
  ClassScores covid;
  ClassScores noncovid;
};

// 0/0 resolves to 0 for every ratio.
PerClassScores per_class_prf(const ConfusionCounts& c);

// Harmonic mean of the class-averaged precision and recall.
double macro_f1_avgpr(double avg_precision, double avg_recall);

// Arithmetic mean of the per-class F1 scores.
double macro_f1_mean(double f1_covid, double f1_noncovid);

// z * sqrt(score (1 - score) / n).
double binomial_ci_radius(double score, std::size_t n, double z);

inline constexpr double kDefaultZ = 1.96;

enum class CountUnit { kSlices, kVolumes };
std::string_view count_unit_name(CountUnit unit) noexcept;

struct MetricsReport {
  ConfusionCounts counts;
  double accuracy = 0.0;
  ClassScores covid;
  ClassScores noncovid;
  double avg_precision = 0.0;
  double avg_recall = 0.0;
  double macro_f1_avgpr = 0.0;
  double macro_f1_mean = 0.0;
  std::optional<double> ci_radius;  // around macro_f1_mean
  std::size_t n = 0;
  double z = kDefaultZ;
  CountUnit unit = CountUnit::kVolumes;
};

MetricsReport build_report(const ConfusionCounts& c, double z = kDefaultZ,
                           CountUnit unit = CountUnit::kVolumes);

}  // namespace ctdiag
