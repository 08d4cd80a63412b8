#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"
#include "ndtsynth/tinynn.hpp"

// Binary classification metrics. Orientation: positive = defective.
namespace ndtsynth::metrics {

struct ConfusionMatrix {
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  double tn = 0.0;

  double total() const { return tp + fp + fn + tn; }

  void validate() const {
    if (!(tp >= 0.0 && fp >= 0.0 && fn >= 0.0 && tn >= 0.0)) {
      throw DataError("confusion matrix entries must be non-negative");
    }
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

/// tp / (tp + fp); 0 when nothing was predicted positive (`undefined` set).
inline double precision(const ConfusionMatrix& cm, bool* undefined = nullptr) {
  cm.validate();
  const double d = cm.tp + cm.fp;
  if (undefined) *undefined = d == 0.0;
  return d == 0.0 ? 0.0 : cm.tp / d;
}

/// tp / (tp + fn); 0 when there are no positives (`undefined` set).
inline double recall(const ConfusionMatrix& cm, bool* undefined = nullptr) {
  cm.validate();
  const double d = cm.tp + cm.fn;
  if (undefined) *undefined = d == 0.0;
  return d == 0.0 ? 0.0 : cm.tp / d;
}

inline double f1(const ConfusionMatrix& cm) {
  const double p = precision(cm), r = recall(cm);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

inline double accuracy(const ConfusionMatrix& cm) {
  cm.validate();
  const double n = cm.total();
  if (n == 0.0) throw DataError("accuracy of an empty confusion matrix");
  return (cm.tp + cm.tn) / n;
}

inline constexpr double kDecisionThreshold = 0.5;

inline ConfusionMatrix confusion(std::span<const double> probabilities, std::span<const Label> truth,
                                 double threshold = kDecisionThreshold) {
  if (probabilities.size() != truth.size()) {
    throw DimensionError("predictions", truth.size(), probabilities.size());
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool predicted = probabilities[i] >= threshold;
    const bool actual = truth[i] == Label::defective;
    (predicted ? (actual ? cm.tp : cm.fp) : (actual ? cm.fn : cm.tn)) += 1.0;
  }
  return cm;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over runs
};

struct EvalReport {
  Summary accuracy;
  Summary precision;
  Summary recall;
  Summary f1;
  ConfusionMatrix mean_confusion;
  std::size_t n_runs = 0;
  std::vector<ConfusionMatrix> runs;
};

namespace detail {

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

}  // namespace detail

/// Per-run metrics averaged over runs (not metrics of the averaged matrix).
inline EvalReport aggregate_runs(std::span<const ConfusionMatrix> runs) {
  if (runs.empty()) throw DataError("aggregate_runs: no runs");
  std::vector<double> acc, prec, rec, f;
  EvalReport r;
  for (const auto& cm : runs) {
    acc.push_back(accuracy(cm));
    prec.push_back(precision(cm));
    rec.push_back(recall(cm));
    f.push_back(f1(cm));
    r.mean_confusion.tp += cm.tp;
    r.mean_confusion.fp += cm.fp;
    r.mean_confusion.fn += cm.fn;
    r.mean_confusion.tn += cm.tn;
  }
  const double n = static_cast<double>(runs.size());
  r.mean_confusion.tp /= n;
  r.mean_confusion.fp /= n;
  r.mean_confusion.fn /= n;
  r.mean_confusion.tn /= n;
  r.accuracy = detail::summarize(acc);
  r.precision = detail::summarize(prec);
  r.recall = detail::summarize(rec);
  r.f1 = detail::summarize(f);
  r.n_runs = runs.size();
  r.runs.assign(runs.begin(), runs.end());
  return r;
}

using ModelSink = std::function<void(std::size_t run, const nn::CnnModel&)>;

/// n_runs fresh-init trainings on `train_set`, each scored on `test_set`.
/// Run i uses rng.split(i), so runs are independent of execution order.
inline EvalReport repeated_eval(std::span<const CScanImage> train_set, std::span<const CScanImage> test_set,
                                const nn::CnnConfig& cfg, std::size_t n_runs, const Rng& rng,
                                const ModelSink& on_model = nullptr) {
  if (n_runs == 0) throw ConfigError("repeated_eval: n_runs must be >= 1");
  if (test_set.empty()) throw DataError("repeated_eval: empty test set");
  std::vector<Label> truth;
  for (const auto& img : test_set) truth.push_back(img.label);
  std::vector<ConfusionMatrix> runs;
  for (std::size_t run = 0; run < n_runs; ++run) {
    Rng r = rng.split(run);
    auto model = nn::build_model(cfg, r);
    nn::train(model, train_set, cfg, r);
    if (on_model) on_model(run, model);
    const auto probs = nn::predict(model, test_set);
    runs.push_back(confusion(probs, truth));
  }
  return aggregate_runs(runs);
}

/// Peak inside the defect mask over mean outside it; +inf when the background is zero.
inline double snr(const CScanImage& img) {
  if (!img.defect_mask) throw DataError("snr: image has no defect mask");
  const auto& mask = *img.defect_mask;
  if (mask.size() != img.size()) throw DimensionError("defect mask", img.size(), mask.size());
  double peak = -std::numeric_limits<double>::infinity(), sum = 0.0;
  std::size_t inside = 0, outside = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      peak = std::max(peak, static_cast<double>(img.pixels[i]));
      ++inside;
    } else {
      sum += img.pixels[i];
      ++outside;
    }
  }
  if (inside == 0 || outside == 0) throw DataError("snr: mask must split the image into two non-empty regions");
  const double background = sum / static_cast<double>(outside);
  return background == 0.0 ? std::numeric_limits<double>::infinity() : peak / background;
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto s = [](const Summary& x) { return nlohmann::json{{"mean", x.mean}, {"std", x.std}}; };
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& cm : r.runs) runs.push_back(to_json(cm));
  return {{"n_runs", r.n_runs},
          {"accuracy", s(r.accuracy)},
          {"f1", s(r.f1)},
          {"precision", s(r.precision)},
          {"recall", s(r.recall)},
          {"mean_confusion", to_json(r.mean_confusion)},
          {"runs", runs}};
}

/// Aligned text table with columns Accuracy, F1, Precision, Recall.
inline std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t w = 7;
  for (const auto& [name, _] : rows) w = std::max(w, name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %9s  %8s\n", static_cast<int>(w), "Dataset", "Accuracy", "F1",
                "Precision", "Recall");
  out += buf;
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.3f  %8.3f  %9.3f  %8.3f\n", static_cast<int>(w), name.c_str(),
                  r.accuracy.mean, r.f1.mean, r.precision.mean, r.recall.mean);
    out += buf;
  }
  return out;
}

}  // namespace ndtsynth::metrics
