#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "clozepet/error.hpp"
#include "clozepet/rng.hpp"

#include "json.hpp"

namespace clozepet {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold count
  bool excluded = false;    // never gold and never predicted
};

struct RunMetadata {
  std::int64_t seed = -1;
  int set_id = -1;
  int shot_size = -1;
  std::string method;   // pet / sc / zero-shot
  std::string variant;  // pretrain plan name or model tag
  std::string context;  // nocontext / prevcontext / context
};

struct MetricsReport {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> confusion;  // gold x predicted
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::size_t n_samples = 0;
  RunMetadata metadata;

  const ClassMetrics& for_class(const std::string& name) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == name) return per_class[i];
    }
    throw Error(ErrorCode::UnknownLabel, "no metrics for class '" + name + "'");
  }
};

inline MetricsReport metrics_from_confusion(
    const std::vector<std::vector<std::size_t>>& confusion,
    const std::vector<std::string>& classes) {
  MetricsReport report;
  report.classes = classes;
  report.confusion = confusion;
  std::size_t k = classes.size();
  std::size_t total = 0, correct = 0;
  std::vector<std::size_t> gold_count(k, 0), pred_count(k, 0);
  for (std::size_t g = 0; g < k; ++g) {
    for (std::size_t p = 0; p < k; ++p) {
      total += confusion[g][p];
      gold_count[g] += confusion[g][p];
      pred_count[p] += confusion[g][p];
    }
    correct += confusion[g][g];
  }
  report.n_samples = total;
  report.accuracy = total == 0 ? 0.0
                               : static_cast<double>(correct) /
                                     static_cast<double>(total);
  report.per_class.resize(k);
  double f1_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    ClassMetrics& m = report.per_class[i];
    double tp = static_cast<double>(confusion[i][i]);
    double gold = static_cast<double>(gold_count[i]);
    double pred = static_cast<double>(pred_count[i]);
    m.support = gold_count[i];
    m.excluded = (gold_count[i] == 0 && pred_count[i] == 0);
    m.precision = pred > 0 ? tp / pred : 0.0;
    m.recall = gold > 0 ? tp / gold : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    f1_sum += m.f1;
  }
  report.macro_f1 = k > 0 ? f1_sum / static_cast<double>(k) : 0.0;
  return report;
}

inline MetricsReport compute_metrics(const std::vector<std::string>& gold,
                                     const std::vector<std::string>& pred,
                                     const std::vector<std::string>& classes) {
  if (gold.size() != pred.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "gold and predictions differ in length");
  }
  if (gold.empty()) {
    throw Error(ErrorCode::EmptyEvaluation, "no samples to evaluate");
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
  std::vector<std::vector<std::size_t>> confusion(
      classes.size(), std::vector<std::size_t>(classes.size(), 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    auto g = index.find(gold[i]);
    auto p = index.find(pred[i]);
    if (g == index.end()) {
      throw Error(ErrorCode::UnknownLabel, "gold label '" + gold[i] + "'");
    }
    if (p == index.end()) {
      throw Error(ErrorCode::UnknownLabel, "predicted label '" + pred[i] + "'");
    }
    ++confusion[g->second][p->second];
  }
  return metrics_from_confusion(confusion, classes);
}

// ---------------------------------------------------------------------------
// Approximate randomization significance test.

struct MetricSpec {
  enum Kind { Accuracy, F1 } kind = Accuracy;
  std::string class_name;  // only for F1

  static MetricSpec accuracy() { return MetricSpec{Accuracy, ""}; }
  static MetricSpec f1(const std::string& cls) { return MetricSpec{F1, cls}; }
};

namespace detail {

inline double metric_value(const MetricSpec& spec,
                           const std::vector<std::string>& gold,
                           const std::vector<std::string>& pred,
                           const std::vector<std::string>& classes) {
  MetricsReport r = compute_metrics(gold, pred, classes);
  if (spec.kind == MetricSpec::Accuracy) return r.accuracy;
  return r.for_class(spec.class_name).f1;
}

}  // namespace detail

// Shuffles paired predictions (swap probability 1/2 per sample) and reports
// the add-one p-value estimate (count + 1) / (R + 1). Each round draws from
// its own derived seed, so the result does not depend on evaluation order.
inline double approx_randomization_test(const std::vector<std::string>& gold,
                                        const std::vector<std::string>& pred_a,
                                        const std::vector<std::string>& pred_b,
                                        const MetricSpec& metric,
                                        const std::vector<std::string>& classes,
                                        std::size_t rounds,
                                        std::uint64_t seed) {
  if (pred_a.size() != gold.size() || pred_b.size() != gold.size()) {
    throw Error(ErrorCode::LengthMismatch, "prediction lengths differ from gold");
  }
  if (rounds < 1) throw Error(ErrorCode::InvalidConfig, "rounds must be >= 1");
  const double observed =
      std::abs(detail::metric_value(metric, gold, pred_a, classes) -
               detail::metric_value(metric, gold, pred_b, classes));
  std::size_t count = 0;
  std::vector<std::string> a(gold.size()), b(gold.size());
  for (std::size_t r = 0; r < rounds; ++r) {
    Rng rng(derive_seed(seed, r));
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (rng.bernoulli(0.5)) {
        a[i] = pred_b[i];
        b[i] = pred_a[i];
      } else {
        a[i] = pred_a[i];
        b[i] = pred_b[i];
      }
    }
    double delta = std::abs(detail::metric_value(metric, gold, a, classes) -
                            detail::metric_value(metric, gold, b, classes));
    if (delta >= observed - 1e-12) ++count;
  }
  return static_cast<double>(count + 1) / static_cast<double>(rounds + 1);
}

// ---------------------------------------------------------------------------
// Aggregation over repeated runs (sets x seeds).

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct RunSummary {
  std::size_t n_runs = 0;
  MetricSummary accuracy;
  MetricSummary macro_f1;
  std::map<std::string, MetricSummary> per_class_f1;
};

namespace detail {

inline MetricSummary summarize(const std::vector<double>& xs) {
  MetricSummary s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(xs.size()));
  return s;
}

}  // namespace detail

inline RunSummary aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) {
    throw Error(ErrorCode::TooFewRuns, "need at least two runs to aggregate");
  }
  const auto& first = reports.front();
  for (const auto& r : reports) {
    if (r.metadata.shot_size != first.metadata.shot_size ||
        r.metadata.method != first.metadata.method ||
        r.metadata.variant != first.metadata.variant ||
        r.metadata.context != first.metadata.context ||
        r.classes != first.classes) {
      throw Error(ErrorCode::MixedStrata,
                  "runs must share shot size, method, variant and classes");
    }
  }
  RunSummary summary;
  summary.n_runs = reports.size();
  std::vector<double> acc, mf1;
  for (const auto& r : reports) {
    acc.push_back(r.accuracy);
    mf1.push_back(r.macro_f1);
  }
  summary.accuracy = detail::summarize(acc);
  summary.macro_f1 = detail::summarize(mf1);
  for (std::size_t i = 0; i < first.classes.size(); ++i) {
    std::vector<double> f1s;
    for (const auto& r : reports) f1s.push_back(r.per_class[i].f1);
    summary.per_class_f1[first.classes[i]] = detail::summarize(f1s);
  }
  return summary;
}

// ---------------------------------------------------------------------------
// metrics.json

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    per_class[r.classes[i]] = {{"precision", r.per_class[i].precision},
                               {"recall", r.per_class[i].recall},
                               {"f1", r.per_class[i].f1},
                               {"support", r.per_class[i].support},
                               {"excluded", r.per_class[i].excluded}};
  }
  return nlohmann::json{
      {"accuracy", r.accuracy},
      {"macro_f1", r.macro_f1},
      {"per_class", per_class},
      {"confusion", {{"classes", r.classes}, {"matrix", r.confusion}}},
      {"metadata",
       {{"seed", r.metadata.seed},
        {"set", r.metadata.set_id},
        {"shot_size", r.metadata.shot_size},
        {"method", r.metadata.method},
        {"variant", r.metadata.variant},
        {"context", r.metadata.context},
        {"n_samples", r.n_samples}}}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  std::vector<std::string> classes =
      j.at("confusion").at("classes").get<std::vector<std::string>>();
  std::vector<std::vector<std::size_t>> confusion =
      j.at("confusion").at("matrix").get<std::vector<std::vector<std::size_t>>>();
  MetricsReport r = metrics_from_confusion(confusion, classes);
  const auto& meta = j.at("metadata");
  r.metadata.seed = meta.at("seed").get<std::int64_t>();
  r.metadata.set_id = meta.at("set").get<int>();
  r.metadata.shot_size = meta.at("shot_size").get<int>();
  r.metadata.method = meta.at("method").get<std::string>();
  r.metadata.variant = meta.at("variant").get<std::string>();
  r.metadata.context = meta.at("context").get<std::string>();
  return r;
}

inline void write_metrics_json(const MetricsReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << metrics_to_json(r).dump(2) << "\n";
}

inline MetricsReport read_metrics_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  nlohmann::json j;
  in >> j;
  return metrics_from_json(j);
}

}  // namespace clozepet
