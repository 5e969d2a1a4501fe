#pragma once

// Experiment orchestration. Every experiment runs ranking, selection,
// intervention, inference, cleanup and verification in that order; the
// verification step recomputes the baseline and compares it bit-for-bit with
// the pre-attack one.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "synapse/analysis.hpp"
#include "synapse/data.hpp"
#include "synapse/encoder.hpp"
#include "synapse/eval.hpp"
#include "synapse/interventions.hpp"

namespace synapse {

enum class AttackKind { Silence, GaussianCls, LogitBias, EmbeddingNoise, Fgsm, BalancedPush, BiasOnly };

std::string attack_name(AttackKind k);
AttackKind attack_from_name(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::Silence;
  SelectionSpec selection;        // neurons for silence / gaussian_cls, columns for balanced_push
  bool random_selection = false;  // uniform draw of the same k instead of the probe ranking
  double sigma = 0.0;
  double bias = 0.0;
  double balanced_delta = 0.0;
  double epsilon = 0.0;
  double delta = 0.0;
  int target = 0;
  bool balanced = true;
  std::optional<int> suppress;
  std::optional<int> max_columns;
  std::uint64_t seed = 0;  // root of every stochastic stream of the attack

  bool uses_neurons() const;
  bool has_target() const;
};

struct ExperimentConfig {
  std::string model_path;
  std::string probe_data_path;
  std::string test_data_path;
  std::optional<std::string> ranking_path;
  std::string output_dir = ".";
  ProbeHyper probe;
  AttackConfig attack;
};

nlohmann::json to_json(const AttackConfig& a);
AttackConfig attack_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

struct Baseline {
  std::vector<int> predictions;
  MetricsReport report;
  std::uint64_t weight_hash = 0;
};

struct ExperimentLog {
  nlohmann::json config;   // echo of the ExperimentConfig (or AttackConfig for in-memory runs)
  nlohmann::json ranking;  // source, selection and neuron ids, or null
  nlohmann::json intervention;
  std::vector<std::string> steps;
  MetricsReport baseline;
  MetricsReport attacked;
  double delta_pct = 0.0;
  TransitionMatrix transitions;
  std::optional<FlipStats> flips;
  std::uint64_t weight_hash_before = 0;
  std::uint64_t weight_hash_after = 0;
  bool verified = false;
  std::string verification;
  double wall_clock_seconds = 0.0;
};

/// With `include_wall_clock` false the output is a pure function of the inputs.
nlohmann::json to_json(const ExperimentLog& log, bool include_wall_clock = true);

/// Throws IntegrityError if the log's verification step failed.
void require_verified(const ExperimentLog& log);

/// Holds one model and its data so sweeps share the probe and the baseline.
class ExperimentSession {
 public:
  ExperimentSession(EncoderWeights weights, Dataset probe_set, Dataset test_set, ProbeHyper probe_hyper = {});

  const EncoderWeights& weights() const noexcept { return weights_; }
  const Dataset& test_set() const noexcept { return test_; }
  const ProbeModel& probe();
  const Baseline& baseline();

  /// Runs the full protocol. Never leaves the weights modified; the result
  /// reports verification instead of throwing.
  ExperimentLog run(const AttackConfig& attack, const std::optional<RankingRecord>& preset = std::nullopt);

  /// Called between inference and cleanup. Test-only fault injection.
  void set_after_inference_hook(std::function<void(EncoderWeights&)> hook) { hook_ = std::move(hook); }

 private:
  Baseline compute_baseline();

  EncoderWeights weights_;
  Dataset probe_set_;
  Dataset test_;
  ProbeHyper probe_hyper_;
  std::optional<ProbeModel> probe_;
  std::optional<Baseline> baseline_;
  std::function<void(EncoderWeights&)> hook_;
};

/// Loads the files named in `cfg` and runs one experiment.
ExperimentLog run_experiment(const ExperimentConfig& cfg);

struct SweepAxis {
  std::string name;  // p | sigma | bias | epsilon | delta | seed | target
  std::vector<double> values;
};

struct SweepResult {
  std::vector<ExperimentLog> logs;
  bool complete = true;  // false when an integrity failure aborted the sweep
  std::string error;
};

/// One experiment per grid point with a shared baseline.
SweepResult run_sweep(ExperimentSession& session, const AttackConfig& base, const SweepAxis& axis,
                      const std::optional<RankingRecord>& preset = std::nullopt);
SweepResult run_sweep(const ExperimentConfig& base, const SweepAxis& axis);

AttackConfig with_axis_value(AttackConfig a, const std::string& axis, double value);

/// Columns: variant, kind, class, scope, p, k, sigma, bias, epsilon, delta, target, seed,
/// weighted_f1, macro_f1, accuracy, delta_pct, pct_pred_target, flips, verified.
std::string sweep_csv(const SweepResult& result);

/// CLI entry point. Exit codes: 0 success, 1 runtime error, 2 usage error.
int cli(int argc, const char* const* argv);

}  // namespace synapse
