#include "synapse/eval.hpp"

#include <charconv>

#include "synapse/errors.hpp"

namespace synapse {

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

MetricsReport compute_metrics(std::span<const int> y_true, std::span<const int> y_pred, int num_classes) {
  if (y_true.empty()) throw ConfigError("compute_metrics: empty input");
  if (y_true.size() != y_pred.size()) throw ConfigError("compute_metrics: length mismatch");
  if (num_classes <= 0) throw ConfigError("compute_metrics: need at least one class");
  const auto C = static_cast<std::size_t>(num_classes);
  std::vector<long> tp(C, 0), fp(C, 0), fn(C, 0);
  std::vector<int> support(C, 0);
  long correct = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw IndexError("compute_metrics: label out of range at position " + std::to_string(i));
    }
    ++support[static_cast<std::size_t>(t)];
    if (t == p) {
      ++correct;
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }

  MetricsReport r;
  r.n = y_true.size();
  r.support = support;
  r.accuracy = double(correct) / double(r.n);
  r.per_class_f1.resize(C);
  r.per_class_precision.resize(C);
  r.per_class_recall.resize(C);
  double macro = 0.0, weighted = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double precision = ratio(double(tp[c]), double(tp[c] + fp[c]));
    const double recall = ratio(double(tp[c]), double(tp[c] + fn[c]));
    const double f1 = ratio(2.0 * precision * recall, precision + recall);
    r.per_class_precision[c] = precision;
    r.per_class_recall[c] = recall;
    r.per_class_f1[c] = f1;
    if (support[c] > 0) {
      macro += f1;
      ++present;
    }
    weighted += double(support[c]) / double(r.n) * f1;
  }
  r.macro_f1 = macro / double(present);
  r.weighted_f1 = weighted;
  return r;
}

double delta_f1(const MetricsReport& baseline, const MetricsReport& attacked) {
  if (!(baseline.weighted_f1 > 0.0)) throw UndefinedDeltaError("delta_f1: baseline weighted F1 is zero");
  return 100.0 * (attacked.weighted_f1 - baseline.weighted_f1) / baseline.weighted_f1;
}

long TransitionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts)
    for (const long v : row) t += v;
  return t;
}

long TransitionMatrix::unflipped() const {
  long t = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
  return t;
}

TransitionMatrix transition_matrix(std::span<const int> baseline, std::span<const int> attacked, int num_classes) {
  if (baseline.size() != attacked.size()) throw ConfigError("transition_matrix: length mismatch");
  TransitionMatrix tm;
  tm.counts.assign(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (baseline[i] < 0 || baseline[i] >= num_classes || attacked[i] < 0 || attacked[i] >= num_classes) {
      throw IndexError("transition_matrix: prediction out of range at position " + std::to_string(i));
    }
    ++tm.counts[static_cast<std::size_t>(baseline[i])][static_cast<std::size_t>(attacked[i])];
  }
  return tm;
}

FlipStats flip_stats(const TransitionMatrix& tm, int target) {
  if (target < 0 || target >= tm.classes()) throw IndexError("flip_stats: target class out of range");
  const auto t = static_cast<std::size_t>(target);
  long to_target = 0, nontarget_rows = 0, nontarget_flips = 0;
  for (std::size_t i = 0; i < tm.counts.size(); ++i) {
    to_target += tm.counts[i][t];
    if (i == t) continue;
    for (const long v : tm.counts[i]) nontarget_rows += v;
    nontarget_flips += tm.counts[i][t];
  }
  FlipStats f;
  const long n = tm.total();
  f.pct_pred_target = n == 0 ? 0.0 : 100.0 * double(to_target) / double(n);
  if (nontarget_rows > 0) f.pct_flips_nontarget = 100.0 * double(nontarget_flips) / double(nontarget_rows);
  return f;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"accuracy", r.accuracy},
          {"macro_f1", r.macro_f1},
          {"weighted_f1", r.weighted_f1},
          {"per_class_f1", r.per_class_f1},
          {"per_class_precision", r.per_class_precision},
          {"per_class_recall", r.per_class_recall},
          {"support", r.support},
          {"n", r.n},
          {"macro_averaging", "classes present in y_true"}};
}

nlohmann::json to_json(const TransitionMatrix& tm) { return tm.counts; }

nlohmann::json to_json(const FlipStats& f) {
  nlohmann::json j{{"pct_pred_target", f.pct_pred_target}};
  j["pct_flips_nontarget"] = f.pct_flips_nontarget ? nlohmann::json(*f.pct_flips_nontarget) : nlohmann::json(nullptr);
  return j;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace synapse
