#pragma once

// Classification metrics and attack-effect statistics.
//
// Conventions: 0/0 is 0 for precision, recall and F1. Macro F1 averages over
// the classes present in y_true; weighted F1 weights by true support.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "synapse/errors.hpp"

namespace synapse {

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
  std::vector<int> support;
  std::size_t n = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

MetricsReport compute_metrics(std::span<const int> y_true, std::span<const int> y_pred, int num_classes);

/// 100 * (attacked - baseline) / baseline on weighted F1.
double delta_f1(const MetricsReport& baseline, const MetricsReport& attacked);

struct TransitionMatrix {
  std::vector<std::vector<long>> counts;  // [baseline prediction][attacked prediction]

  int classes() const noexcept { return static_cast<int>(counts.size()); }
  long total() const;
  long unflipped() const;
  friend bool operator==(const TransitionMatrix&, const TransitionMatrix&) = default;
};

TransitionMatrix transition_matrix(std::span<const int> baseline, std::span<const int> attacked, int num_classes);

struct FlipStats {
  double pct_pred_target = 0.0;
  /// Absent when no sample was baseline-predicted as a non-target class.
  std::optional<double> pct_flips_nontarget;
};

FlipStats flip_stats(const TransitionMatrix& tm, int target);

nlohmann::json to_json(const MetricsReport& r);
nlohmann::json to_json(const TransitionMatrix& tm);
nlohmann::json to_json(const FlipStats& f);

/// CSV field formatting shared by sweep tables: shortest round-trip representation.
std::string format_double(double v);

}  // namespace synapse
