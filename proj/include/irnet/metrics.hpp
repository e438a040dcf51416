#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "irnet/data.hpp"
#include "irnet/model.hpp"

namespace irnet {

// Positive class is Pneumonia (label 1) throughout.
struct ConfusionMatrix {
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  int64_t total() const { return tp + tn + fp + fn; }
};

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& predictions);

// A metric that may be undefined (0/0 denominator, single-class AUC). The
// undefined marker carries a reason instead of collapsing to 0 or NaN, so
// aggregates stay honest.
struct MetricValue {
  std::optional<double> value;
  std::string reason;

  MetricValue() = default;
  MetricValue(double v) : value(v) {}  // NOLINT: implicit by design
  static MetricValue undefined(std::string why) {
    MetricValue m;
    m.reason = std::move(why);
    return m;
  }
  bool defined() const { return value.has_value(); }
  double get() const { return *value; }
};

struct MetricsReport {
  MetricValue acc, pre, rec, spf, tpr, fpr, ppv, f1;
  MetricValue auc;
  MetricValue loss;

  // Stable field order used by every renderer and table.
  static const std::vector<std::string>& metric_names();
  const MetricValue& by_name(const std::string& name) const;
  MetricValue& by_name(const std::string& name);
};

// The nine confusion-matrix metrics; auc and loss stay unset.
MetricsReport metrics(const ConfusionMatrix& cm);

// Rank statistic (concordant pairs, ties at half weight) computed in 64-bit;
// equals trapezoidal integration of the empirical ROC curve.
MetricValue roc_auc(const std::vector<int>& labels, const std::vector<double>& scores);

struct EvalResult {
  MetricsReport report;
  ConfusionMatrix cm;
  std::vector<double> scores;  // softmax probability of class Pneumonia
  std::vector<int> predictions;
};

// Eval-mode forward over the samples in fixed order; batch size only controls
// batching, not the result.
EvalResult evaluate(const ModelGraph& model, const std::vector<Sample>& samples,
                    int64_t batch_size);

struct AggregateReport {
  MetricsReport mean;
  std::map<std::string, int> undefined_skipped;  // per metric
};

// Arithmetic mean per metric, skipping undefined values with a recorded count.
AggregateReport aggregate(const std::vector<MetricsReport>& reports);

// Scientific notation with four significant digits, e.g. 0.8869 -> "8.869E-01".
std::string render_scientific(double v);

std::string render_report(const MetricsReport& report);
std::string render_confusion(const ConfusionMatrix& cm);

}  // namespace irnet
