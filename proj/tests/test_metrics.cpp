#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "effnet/errors.hpp"
#include "effnet/metrics.hpp"
#include "effnet/rng.hpp"

using namespace effnet;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace

TEST(Metrics, RandomSetsMatchDirectFormulas) {
  CounterRng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(80);
    const int levels = trial % 3 == 0 ? 3 : 1000;  // tie-heavy every third set
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / (levels - 1);
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    const double thr = rng.uniform();
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = s[i] >= thr;
      tp += p && y[i] == 1;
      fp += p && y[i] == 0;
      tn += !p && y[i] == 0;
      fn += !p && y[i] == 1;
    }
    const MetricReport r = evaluate_scores(s, y, thr);
    EXPECT_EQ(r.counts, (ConfusionCounts{tp, tn, fp, fn}));
    ASSERT_TRUE(r.acc);
    EXPECT_EQ(*r.acc, static_cast<double>(tp + tn) / static_cast<double>(tp + tn + fp + fn));
    if (tp + fn) {
      EXPECT_EQ(*r.sen, static_cast<double>(tp) / static_cast<double>(tp + fn));
      EXPECT_EQ(*r.f, static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fn + fp));
    } else {
      EXPECT_FALSE(r.sen);
      EXPECT_FALSE(r.f);
    }
    if (tn + fp) {
      EXPECT_EQ(*r.spe, static_cast<double>(tn) / static_cast<double>(tn + fp));
    } else {
      EXPECT_FALSE(r.spe);
    }
    if (tp + fn && tn + fp) {
      ASSERT_TRUE(r.auc);
      EXPECT_NEAR(*r.auc, pairwise_auc(s, y), 1e-12);
    } else {
      EXPECT_FALSE(r.auc);
      EXPECT_FALSE(r.auc_note.empty());
    }
  }
}

TEST(Metrics, AucLandmarks) {
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 0.0);
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.1, 0.5, 0.5, 0.9}, y), 0.875);
  std::string why;
  EXPECT_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}, &why));
  EXPECT_NE(why.find("negative"), std::string::npos);
}

TEST(Metrics, ThresholdIsInclusive) {
  const auto c = confusion(std::vector<double>{0.5, 0.4999}, std::vector<int>{1, 0}, 0.5);
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.tn, 1u);
}

TEST(Metrics, FUndefinedWithoutPositives) {
  const MetricReport r = report({0, 3, 2, 0}, std::nullopt);
  EXPECT_FALSE(r.sen);
  EXPECT_FALSE(r.f);
  EXPECT_DOUBLE_EQ(*r.acc, 0.6);
  EXPECT_DOUBLE_EQ(*r.spe, 0.6);
}

TEST(Metrics, BadInputs) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(confusion(s, std::vector<int>{1}), UsageError);
  EXPECT_THROW(confusion({}, {}), UsageError);
  EXPECT_THROW(confusion(s, std::vector<int>{1, 2}), DataError);
  EXPECT_THROW(auc(std::vector<double>{NAN, 0.2}, std::vector<int>{1, 0}), UsageError);
}

TEST(Metrics, RenderingMarksUndefinedValues) {
  EXPECT_EQ(format_metric(std::nullopt), "—");
  EXPECT_EQ(format_metric(0.98765, 2, 100.0), "98.77");
  EvalRecord rec{"val", "baseline", report({0, 3, 2, 0}, std::nullopt)};
  const std::string csv = records_csv({&rec, 1});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "split,config,acc,auc,sen,spe,f,n,threshold");
  EXPECT_NE(csv.find("val,baseline,0.59999999999999998,null,null,0.59999999999999998,null,5,0.5"),
            std::string::npos);
  const std::string table = records_table({&rec, 1});
  EXPECT_NE(table.find("—"), std::string::npos);
  EXPECT_NE(table.find("60.00"), std::string::npos);
}
