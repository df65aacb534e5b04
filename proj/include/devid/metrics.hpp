#pragma once

#include <string>
#include <vector>

#include "devid/common.hpp"

namespace devid {

struct ClassMetrics {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f_beta = 0;
  bool has_precision = false; // false when TP+FP = 0 (never predicted)
  bool has_recall = false;    // false when TP+FN = 0 (absent from test set)
};

// Confusion-matrix derived scores. Classes without support are reported as
// null and excluded from the macro averages; weighted averages weight by
// true-class support.
struct MetricsReport {
  std::vector<std::vector<long>> confusion; // [true][predicted]
  long total = 0, correct = 0;
  double accuracy = 0;
  double beta = 1.0;
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f = 0;
  double weighted_precision = 0, weighted_recall = 0, weighted_f = 0;

  std::string to_csv() const;  // one row per class plus a macro row
  std::string to_json() const;
};

MetricsReport metrics_from_confusion(const std::vector<std::vector<long>>& confusion,
                                     double beta = 1.0);

MetricsReport metrics_from_predictions(const std::vector<int>& truth,
                                       const std::vector<int>& predicted,
                                       int n_classes, double beta = 1.0);

} // namespace devid
