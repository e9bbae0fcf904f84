#include "ctdiag/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ctdiag {
namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double a, double b) {
  return a + b == 0.0 ? 0.0 : 2.0 * a * b / (a + b);
}

}  // namespace

ConfusionCounts confusion(std::span<const Label> predictions, std::span<const Label> truths) {
  if (predictions.size() != truths.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(truths.size()) + " truths");
  }
  if (predictions.empty()) throw std::invalid_argument("confusion: no items");
  ConfusionCounts c;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool pred_covid = predictions[i] == Label::kCovid;
    const bool true_covid = truths[i] == Label::kCovid;
    if (pred_covid && true_covid) ++c.tp;
    else if (pred_covid) ++c.fp;
    else if (true_covid) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("accuracy: empty confusion counts");
  return ratio(c.tp + c.tn, c.total());
}

PerClassScores per_class_prf(const ConfusionCounts& c) {
  PerClassScores s;
  s.covid.precision = ratio(c.tp, c.tp + c.fp);
  s.covid.recall = ratio(c.tp, c.tp + c.fn);
  s.covid.f1 = harmonic(s.covid.precision, s.covid.recall);
  s.noncovid.precision = ratio(c.tn, c.tn + c.fn);
  s.noncovid.recall = ratio(c.tn, c.tn + c.fp);
  s.noncovid.f1 = harmonic(s.noncovid.precision, s.noncovid.recall);
  return s;
}

double macro_f1_avgpr(double avg_precision, double avg_recall) {
  return harmonic(avg_precision, avg_recall);
}

double macro_f1_mean(double f1_covid, double f1_noncovid) {
  return (f1_covid + f1_noncovid) / 2.0;
}

double binomial_ci_radius(double score, std::size_t n, double z) {
  if (n == 0) throw std::invalid_argument("binomial_ci_radius: n must be >= 1");
  if (!(score >= 0.0 && score <= 1.0)) {
    throw std::invalid_argument("binomial_ci_radius: score outside [0, 1]");
  }
  return z * std::sqrt(score * (1.0 - score) / static_cast<double>(n));
}

std::string_view count_unit_name(CountUnit unit) noexcept {
  return unit == CountUnit::kSlices ? "slices" : "volumes";
}

MetricsReport build_report(const ConfusionCounts& c, double z, CountUnit unit) {
  MetricsReport r;
  r.counts = c;
  r.accuracy = accuracy(c);
  const PerClassScores s = per_class_prf(c);
  r.covid = s.covid;
  r.noncovid = s.noncovid;
  r.avg_precision = (s.covid.precision + s.noncovid.precision) / 2.0;
  r.avg_recall = (s.covid.recall + s.noncovid.recall) / 2.0;
  r.macro_f1_avgpr = macro_f1_avgpr(r.avg_precision, r.avg_recall);
  r.macro_f1_mean = macro_f1_mean(s.covid.f1, s.noncovid.f1);
  r.n = c.total();
  r.z = z;
  r.unit = unit;
  r.ci_radius = binomial_ci_radius(r.macro_f1_mean, r.n, z);
  return r;
}

}  // namespace ctdiag
