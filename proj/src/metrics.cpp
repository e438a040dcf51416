#include "irnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "irnet/ops.hpp"

namespace irnet {

ConfusionMatrix confusion(const std::vector<int>& labels, const std::vector<int>& predictions) {
  if (labels.size() != predictions.size()) {
    throw invalid_error("labels length " + std::to_string(labels.size()) +
                        " != predictions length " + std::to_string(predictions.size()));
  }
  if (labels.empty()) throw invalid_error("confusion needs at least one sample");
  ConfusionMatrix cm;
  for (size_t i = 0; i < labels.size(); ++i) {
    const bool pos = labels[i] == 1;
    const bool pred_pos = predictions[i] == 1;
    if (pos && pred_pos) ++cm.tp;
    else if (!pos && !pred_pos) ++cm.tn;
    else if (!pos && pred_pos) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

const std::vector<std::string>& MetricsReport::metric_names() {
  static const std::vector<std::string> names = {"acc", "pre", "rec", "spf", "tpr",
                                                 "fpr", "ppv", "f1",  "auc", "loss"};
  return names;
}

const MetricValue& MetricsReport::by_name(const std::string& name) const {
  return const_cast<MetricsReport*>(this)->by_name(name);
}

MetricValue& MetricsReport::by_name(const std::string& name) {
  if (name == "acc") return acc;
  if (name == "pre") return pre;
  if (name == "rec") return rec;
  if (name == "spf") return spf;
  if (name == "tpr") return tpr;
  if (name == "fpr") return fpr;
  if (name == "ppv") return ppv;
  if (name == "f1") return f1;
  if (name == "auc") return auc;
  if (name == "loss") return loss;
  throw invalid_error("unknown metric '" + name + "'");
}

namespace {

MetricValue ratio(int64_t num, int64_t den, const std::string& what) {
  if (den == 0) return MetricValue::undefined(what + " undefined: denominator is 0");
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw invalid_error("metrics over an empty confusion matrix");
  MetricsReport r;
  r.acc = ratio(cm.tp + cm.tn, cm.total(), "ACC");
  r.pre = ratio(cm.tp, cm.tp + cm.fp, "PRE");
  r.ppv = ratio(cm.tp, cm.tp + cm.fp, "PPV");
  r.rec = ratio(cm.tp, cm.tp + cm.fn, "REC");
  r.tpr = ratio(cm.tp, cm.tp + cm.fn, "TPR");
  r.spf = ratio(cm.tn, cm.fp + cm.tn, "SPF");
  r.fpr = ratio(cm.fp, cm.fp + cm.tn, "FPR");
  // 2TP/(2TP+FP+FN): defined whenever TP+FP+FN > 0.
  r.f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "F1");
  return r;
}

MetricValue roc_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) {
    throw invalid_error("labels/scores length mismatch");
  }
  int64_t pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg) += 1;
  if (pos == 0 || neg == 0) {
    return MetricValue::undefined(std::string("AUC undefined: ") +
                                  (pos == 0 ? "no positive samples" : "no negative samples"));
  }
  // Mann-Whitney U via midranks; tied scores get the average rank, which
  // counts tied positive-negative pairs at half weight.
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    // 1-based ranks i+1 .. j averaged over the tie group.
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1) rank_sum_pos += midrank;
    }
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

EvalResult evaluate(const ModelGraph& model, const std::vector<Sample>& samples,
                    int64_t batch_size) {
  if (samples.empty()) throw invalid_error("evaluate needs a non-empty sample set");
  if (model.cfg.num_classes != 2) {
    throw invalid_error("evaluate expects a binary head, model has " +
                        std::to_string(model.cfg.num_classes) + " classes");
  }
  EvalResult result;
  std::vector<int> labels;
  double loss_sum = 0.0;
  const auto batches = batch_indices(static_cast<int64_t>(samples.size()), batch_size,
                                     /*seed=*/0, /*shuffle=*/false);
  for (const auto& batch : batches) {
    auto [images, batch_labels] = assemble_batch(samples, batch, model.cfg.input_size);
    const Tensor logits = model.forward(images, RunMode::Eval);
    const auto xent = ops::softmax_cross_entropy(logits, batch_labels);
    loss_sum += xent.loss * static_cast<double>(batch.size());
    for (int64_t b = 0; b < logits.dim(0); ++b) {
      result.scores.push_back(static_cast<double>(xent.probs.at2(b, 1)));
      // Argmax with ties resolved to class 0 (Normal).
      result.predictions.push_back(logits.at2(b, 1) > logits.at2(b, 0) ? 1 : 0);
      labels.push_back(batch_labels[static_cast<size_t>(b)]);
    }
  }
  result.cm = confusion(labels, result.predictions);
  result.report = metrics(result.cm);
  result.report.auc = roc_auc(labels, result.scores);
  result.report.loss = loss_sum / static_cast<double>(samples.size());
  return result;
}

AggregateReport aggregate(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw invalid_error("aggregate needs at least one report");
  AggregateReport out;
  for (const auto& name : MetricsReport::metric_names()) {
    double sum = 0.0;
    int defined = 0, skipped = 0;
    for (const auto& r : reports) {
      const MetricValue& v = r.by_name(name);
      if (v.defined()) {
        sum += v.get();
        ++defined;
      } else {
        ++skipped;
      }
    }
    if (defined > 0) {
      out.mean.by_name(name) = sum / static_cast<double>(defined);
    } else {
      out.mean.by_name(name) = MetricValue::undefined("undefined in all " +
                                                      std::to_string(reports.size()) + " reports");
    }
    if (skipped > 0) out.undefined_skipped[name] = skipped;
  }
  return out;
}

std::string render_scientific(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3E", v);
  return buf;
}

std::string render_report(const MetricsReport& report) {
  std::ostringstream os;
  for (const auto& name : MetricsReport::metric_names()) {
    const MetricValue& v = report.by_name(name);
    os << name << "\t" << (v.defined() ? render_scientific(v.get()) : "undefined (" + v.reason + ")")
       << "\n";
  }
  return os.str();
}

std::string render_confusion(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "                 predicted\n";
  os << "                 PNEUMONIA  NORMAL\n";
  os << "actual PNEUMONIA " << cm.tp << "  " << cm.fn << "\n";
  os << "actual NORMAL    " << cm.fp << "  " << cm.tn << "\n";
  return os.str();
}

}  // namespace irnet
