#include "devid/metrics.hpp"

#include <cstdio>

#include "devid/errors.hpp"

namespace devid {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

} // namespace

MetricsReport metrics_from_confusion(const std::vector<std::vector<long>>& confusion,
                                     double beta) {
  const std::size_t n = confusion.size();
  for (const auto& row : confusion)
    if (row.size() != n) throw ConfigError("metrics: confusion matrix must be square");

  MetricsReport r;
  r.confusion = confusion;
  r.beta = beta;
  r.per_class.resize(n);

  long total = 0, correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (confusion[i][j] < 0) throw ConfigError("metrics: negative count");
      total += confusion[i][j];
      if (i == j) correct += confusion[i][j];
    }
  r.total = total;
  r.correct = correct;
  r.accuracy = total > 0 ? double(correct) / double(total) : 0.0;

  const double b2 = beta * beta;
  double macro_p = 0, macro_r = 0, macro_f = 0;
  long macro_pn = 0, macro_rn = 0, macro_fn = 0;
  double wsum_p = 0, wsum_r = 0, wsum_f = 0;
  long wp = 0, wr = 0, wf = 0;

  for (std::size_t c = 0; c < n; ++c) {
    ClassMetrics& m = r.per_class[c];
    m.tp = confusion[c][c];
    long row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += confusion[c][j];
      col += confusion[j][c];
    }
    m.fn = row - m.tp;
    m.fp = col - m.tp;
    m.tn = total - row - col + m.tp;

    const long support = row;
    if (m.tp + m.fp > 0) {
      m.precision = double(m.tp) / double(m.tp + m.fp);
      m.has_precision = true;
      macro_p += m.precision;
      ++macro_pn;
      wsum_p += m.precision * double(support);
      wp += support;
    }
    if (m.tp + m.fn > 0) {
      m.recall = double(m.tp) / double(m.tp + m.fn);
      m.has_recall = true;
      macro_r += m.recall;
      ++macro_rn;
      wsum_r += m.recall * double(support);
      wr += support;
    }
    if (m.has_precision && m.has_recall) {
      const double denom = b2 * m.precision + m.recall;
      m.f_beta = denom > 0 ? (1.0 + b2) * m.precision * m.recall / denom : 0.0;
      macro_f += m.f_beta;
      ++macro_fn;
      wsum_f += m.f_beta * double(support);
      wf += support;
    }
  }

  r.macro_precision = macro_pn ? macro_p / double(macro_pn) : 0.0;
  r.macro_recall = macro_rn ? macro_r / double(macro_rn) : 0.0;
  r.macro_f = macro_fn ? macro_f / double(macro_fn) : 0.0;
  r.weighted_precision = wp ? wsum_p / double(wp) : 0.0;
  r.weighted_recall = wr ? wsum_r / double(wr) : 0.0;
  r.weighted_f = wf ? wsum_f / double(wf) : 0.0;
  return r;
}

MetricsReport metrics_from_predictions(const std::vector<int>& truth,
                                       const std::vector<int>& predicted,
                                       int n_classes, double beta) {
  if (truth.size() != predicted.size())
    throw ConfigError("metrics: truth/prediction length mismatch");
  std::vector<std::vector<long>> cm(std::size_t(n_classes),
                                    std::vector<long>(std::size_t(n_classes), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || predicted[i] < 0 ||
        predicted[i] >= n_classes)
      throw ConfigError("metrics: label out of range");
    ++cm[std::size_t(truth[i])][std::size_t(predicted[i])];
  }
  return metrics_from_confusion(cm, beta);
}

std::string MetricsReport::to_csv() const {
  std::string out = "class,support,tp,fp,fn,precision,recall,f_beta\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const ClassMetrics& m = per_class[c];
    out += std::to_string(c) + "," + std::to_string(m.tp + m.fn) + "," +
           std::to_string(m.tp) + "," + std::to_string(m.fp) + "," + std::to_string(m.fn) +
           ",";
    out += m.has_precision ? fmt(m.precision) : "null";
    out += ",";
    out += m.has_recall ? fmt(m.recall) : "null";
    out += ",";
    out += (m.has_precision && m.has_recall) ? fmt(m.f_beta) : "null";
    out += "\n";
  }
  out += "macro," + std::to_string(total) + ",,,," + fmt(macro_precision) + "," +
         fmt(macro_recall) + "," + fmt(macro_f) + "\n";
  return out;
}

std::string MetricsReport::to_json() const {
  std::string out = "{\n";
  out += "  \"accuracy\": " + fmt(accuracy) + ",\n";
  out += "  \"total\": " + std::to_string(total) + ",\n";
  out += "  \"correct\": " + std::to_string(correct) + ",\n";
  out += "  \"beta\": " + fmt(beta) + ",\n";
  out += "  \"macro\": {\"precision\": " + fmt(macro_precision) +
         ", \"recall\": " + fmt(macro_recall) + ", \"f\": " + fmt(macro_f) + "},\n";
  out += "  \"weighted\": {\"precision\": " + fmt(weighted_precision) +
         ", \"recall\": " + fmt(weighted_recall) + ", \"f\": " + fmt(weighted_f) + "},\n";
  out += "  \"classes\": [\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const ClassMetrics& m = per_class[c];
    out += "    {\"class\": " + std::to_string(c) + ", \"tp\": " + std::to_string(m.tp) +
           ", \"fp\": " + std::to_string(m.fp) + ", \"fn\": " + std::to_string(m.fn) +
           ", \"precision\": " + (m.has_precision ? fmt(m.precision) : "null") +
           ", \"recall\": " + (m.has_recall ? fmt(m.recall) : "null") + ", \"f\": " +
           ((m.has_precision && m.has_recall) ? fmt(m.f_beta) : "null") + "}";
    out += (c + 1 < per_class.size()) ? ",\n" : "\n";
  }
  out += "  ],\n  \"confusion\": [\n";
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    out += "    [";
    for (std::size_t j = 0; j < confusion[i].size(); ++j) {
      out += std::to_string(confusion[i][j]);
      if (j + 1 < confusion[i].size()) out += ",";
    }
    out += (i + 1 < confusion.size()) ? "],\n" : "]\n";
  }
  out += "  ]\n}\n";
  return out;
}

} // namespace devid
