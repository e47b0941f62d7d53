#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace effnet {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Prediction is positive iff score >= threshold.
ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold = 0.5);

/// A metric value, or nullopt when its denominator is zero.
using Metric = std::optional<double>;

struct MetricReport {
  Metric acc, auc, sen, spe, f;
  ConfusionCounts counts;
  double threshold = 0.5;
  /// Why auc is undefined, empty otherwise.
  std::string auc_note;
};

MetricReport report(const ConfusionCounts& counts, Metric auc, double threshold = 0.5);

/// Mann-Whitney AUC with average ranks for ties (a tied pair counts one half).
/// Undefined when only one class is present; `why` then receives the reason.
Metric auc(std::span<const double> scores, std::span<const int> labels,
           std::string* why = nullptr);

/// confusion + auc + report in one call.
MetricReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                             double threshold = 0.5);

/// One evaluation, as written to CSV and text reports.
struct EvalRecord {
  std::string split;
  std::string config;  // flags label
  MetricReport metrics;
};

/// "—" when undefined, else fixed with `digits` decimals.
std::string format_metric(const Metric& m, int digits = 4, double scale = 1.0);

std::string records_csv(std::span<const EvalRecord> records);
std::string records_table(std::span<const EvalRecord> records);

}  // namespace effnet
