// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lora_forensics/error.hpp"

namespace lf {

struct EvalResult {
  double mae = 0.0;       // images
  double mape = 0.0;      // percent
  double accuracy = 0.0;  // percent
  std::vector<int> class_set;
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][pred], class_set order
  std::size_t n_samples = 0;
};

struct MetricStat {
  double mean = 0.0;
  double std_dev = 0.0;  // sample (n-1)
};

struct AggregateResult {
  MetricStat mae;
  MetricStat mape;
  MetricStat accuracy;
  std::size_t repeat_count = 0;
};

namespace detail {

inline std::size_t class_index(int label, const std::vector<int>& class_set) {
  const auto it = std::lower_bound(class_set.begin(), class_set.end(), label);
  if (it == class_set.end() || *it != label) {
    raise(ErrorCode::LabelNotInClassSet,
          "label " + std::to_string(label) + " is not in the class set");
  }
  return static_cast<std::size_t>(it - class_set.begin());
}

}  // namespace detail

// MAE / MAPE / accuracy / confusion over prediction-truth pairs. MAPE is
// truth-normalized: 100 * mean(|p - t| / t).
inline EvalResult evaluate(const std::vector<int>& preds, const std::vector<int>& truths,
                           std::vector<int> class_set) {
  if (preds.size() != truths.size()) {
    raise(ErrorCode::LengthMismatch, "prediction and truth lists differ in length");
  }
  if (preds.empty()) {
    raise(ErrorCode::LengthMismatch, "nothing to evaluate");
  }
  std::sort(class_set.begin(), class_set.end());
  class_set.erase(std::unique(class_set.begin(), class_set.end()), class_set.end());

  EvalResult result;
  result.class_set = class_set;
  result.confusion.assign(class_set.size(), std::vector<std::int64_t>(class_set.size(), 0));
  result.n_samples = preds.size();
  double abs_sum = 0.0;
  double rel_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (truths[i] <= 0) {
      raise(ErrorCode::ZeroTruthLabel, "truth labels must be positive");
    }
    const std::size_t ti = detail::class_index(truths[i], class_set);
    const std::size_t pi = detail::class_index(preds[i], class_set);
    ++result.confusion[ti][pi];
    const double err = std::fabs(static_cast<double>(preds[i]) - truths[i]);
    abs_sum += err;
    rel_sum += err / truths[i];
    if (preds[i] == truths[i]) ++hits;
  }
  const auto n = static_cast<double>(preds.size());
  result.mae = abs_sum / n;
  result.mape = 100.0 * rel_sum / n;
  result.accuracy = 100.0 * static_cast<double>(hits) / n;
  return result;
}

// Mean and sample standard deviation per metric across repeated experiments.
inline AggregateResult aggregate(const std::vector<EvalResult>& results) {
  if (results.size() < 2) {
    raise(ErrorCode::TooFewRepeats, "aggregation needs at least two repeats");
  }
  const auto stat = [&](auto pick) {
    MetricStat s;
    for (const EvalResult& r : results) s.mean += pick(r);
    s.mean /= static_cast<double>(results.size());
    double ss = 0.0;
    for (const EvalResult& r : results) {
      const double d = pick(r) - s.mean;
      ss += d * d;
    }
    s.std_dev = std::sqrt(ss / static_cast<double>(results.size() - 1));
    return s;
  };
  AggregateResult agg;
  agg.mae = stat([](const EvalResult& r) { return r.mae; });
  agg.mape = stat([](const EvalResult& r) { return r.mape; });
  agg.accuracy = stat([](const EvalResult& r) { return r.accuracy; });
  agg.repeat_count = results.size();
  return agg;
}

// Fraction of misclassified mass sitting on classes adjacent to the truth in
// the sorted class set. No errors at all counts as 1 by convention.
inline double adjacent_error_fraction(const std::vector<std::vector<std::int64_t>>& confusion,
                                      const std::vector<int>& class_set) {
  std::int64_t off_diag = 0;
  std::int64_t adjacent = 0;
  for (std::size_t t = 0; t < class_set.size(); ++t) {
    for (std::size_t p = 0; p < class_set.size(); ++p) {
      if (t == p) continue;
      off_diag += confusion[t][p];
      const std::size_t gap = t > p ? t - p : p - t;
      if (gap == 1) adjacent += confusion[t][p];
    }
  }
  if (off_diag == 0) return 1.0;
  return static_cast<double>(adjacent) / static_cast<double>(off_diag);
}

}  // namespace lf
