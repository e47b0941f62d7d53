#include "effnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "effnet/errors.hpp"

namespace effnet {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels,
                  const char* op) {
  if (scores.size() != labels.size()) {
    throw UsageError(std::string(op) + ": " + std::to_string(scores.size()) +
                     " scores but " + std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw UsageError(std::string(op) + ": empty input");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw DataError(std::string(op) + ": label " + std::to_string(labels[i]) +
                      " at index " + std::to_string(i) + " is not 0 or 1");
    }
    if (std::isnan(scores[i])) {
      throw UsageError(std::string(op) + ": score at index " + std::to_string(i) +
                       " is NaN");
    }
  }
}

Metric ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string csv_metric(const Metric& m) {
  if (!m) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *m);
  return buf;
}

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold) {
  check_inputs(scores, labels, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

MetricReport report(const ConfusionCounts& counts, Metric auc_value, double threshold) {
  MetricReport r;
  r.counts = counts;
  r.threshold = threshold;
  r.acc = ratio(counts.tp + counts.tn, counts.total());
  r.sen = ratio(counts.tp, counts.tp + counts.fn);
  r.spe = ratio(counts.tn, counts.tn + counts.fp);
  // F is undefined without any positive sample, even when FP > 0 keeps the
  // denominator nonzero: recall has no meaning there.
  if (counts.tp + counts.fn == 0) {
    r.f = std::nullopt;
  } else {
    r.f = ratio(2 * counts.tp, 2 * counts.tp + counts.fn + counts.fp);
  }
  r.auc = auc_value;
  return r;
}

Metric auc(std::span<const double> scores, std::span<const int> labels, std::string* why) {
  check_inputs(scores, labels, "auc");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (int l : labels) pos += l == 1;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    if (why) {
      *why = pos == 0 ? "AUC undefined: no positive samples"
                      : "AUC undefined: no negative samples";
    }
    return std::nullopt;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Ranks are 1-based; a run of ties [i, j) shares the rank (i + j + 1) / 2,
  // accumulated doubled so every value stays an exact integer.
  double rank_sum2 = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    std::size_t pos_in_run = 0;
    for (std::size_t k = i; k < j; ++k) pos_in_run += labels[order[k]] == 1;
    rank_sum2 += static_cast<double>(pos_in_run) * static_cast<double>(i + j + 1);
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  const double u2 = rank_sum2 - p * (p + 1.0);
  if (why) why->clear();
  return u2 / (2.0 * p * q);
}

MetricReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                             double threshold) {
  std::string why;
  const Metric a = auc(scores, labels, &why);
  MetricReport r = report(confusion(scores, labels, threshold), a, threshold);
  r.auc_note = why;
  return r;
}

std::string format_metric(const Metric& m, int digits, double scale) {
  if (!m) return "—";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *m * scale);
  return buf;
}

std::string records_csv(std::span<const EvalRecord> records) {
  std::ostringstream os;
  os << "split,config,acc,auc,sen,spe,f,n,threshold\n";
  for (const auto& r : records) {
    const auto& m = r.metrics;
    os << r.split << ',' << r.config << ',' << csv_metric(m.acc) << ','
       << csv_metric(m.auc) << ',' << csv_metric(m.sen) << ',' << csv_metric(m.spe)
       << ',' << csv_metric(m.f) << ',' << m.counts.total() << ','
       << csv_metric(m.threshold) << '\n';
  }
  return os.str();
}

namespace {

// Pads by display width; the undefined marker is one column but three bytes.
std::string pad_cell(const std::string& s, std::size_t width, bool left) {
  std::size_t shown = 0;
  for (unsigned char ch : s) shown += (ch & 0xC0) != 0x80;
  if (shown >= width) return s;
  const std::string fill(width - shown, ' ');
  return left ? s + fill : fill + s;
}

}  // namespace

std::string records_table(std::span<const EvalRecord> records) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Split", "Config", "ACC(%)", "AUC(%)", "SEN(%)", "SPE(%)", "F(%)", "N"});
  for (const auto& r : records) {
    const auto& m = r.metrics;
    rows.push_back({r.split, r.config, format_metric(m.acc, 2, 100.0),
                    format_metric(m.auc, 2, 100.0), format_metric(m.sen, 2, 100.0),
                    format_metric(m.spe, 2, 100.0), format_metric(m.f, 2, 100.0),
                    std::to_string(m.counts.total())});
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::size_t shown = 0;
      for (unsigned char ch : row[c]) shown += (ch & 0xC0) != 0x80;
      width[c] = std::max(width[c], shown);
    }
  }
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      os << pad_cell(row[c], width[c], c < 2);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace effnet
