#pragma once

// Explainability and analysis: [CLS] activation extraction, a linear probe
// over the concatenated per-layer activations, and the neuron rankings and
// top-k selections derived from its weights.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "synapse/data.hpp"
#include "synapse/encoder.hpp"
#include "synapse/neuron_ref.hpp"

namespace synapse {

struct ActivationSet {
  int layers = 0;
  int hidden = 0;
  Tensor2 features;  // N x (L*H); row n is [cls_0 | cls_1 | ... | cls_{L-1}]
  std::vector<int> labels;
  std::uint64_t fingerprint = 0;

  std::size_t size() const noexcept { return labels.size(); }
  double at(std::size_t n, int layer, int dim) const {
    return features(static_cast<Eigen::Index>(n), layer * hidden + dim);
  }
  /// Throws StalenessError unless the set was produced by weights with this fingerprint.
  void require_fingerprint(std::uint64_t expected) const;

  friend bool operator==(const ActivationSet&, const ActivationSet&) = default;
};

/// Baseline forward pass per sample; the embedding layer is not recorded.
ActivationSet extract_activations(const EncoderWeights& w, const Dataset& ds);

void save_activations(const ActivationSet& acts, const std::filesystem::path& path);
ActivationSet load_activations(const std::filesystem::path& path);

struct ProbeHyper {
  double lr = 0.1;
  int epochs = 500;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

struct ProbeModel {
  Tensor2 weight;  // C x (L*H)
  Tensor2 bias;    // 1 x C
  double train_accuracy = 0.0;
  int layers = 0;
  int hidden = 0;
  std::uint64_t fingerprint = 0;
  ProbeHyper hyper;

  int classes() const noexcept { return static_cast<int>(weight.rows()); }
};

/// Multinomial logistic regression, full-batch gradient descent from zero init.
/// `num_classes` of 0 infers the count from the labels.
ProbeModel train_probe(const ActivationSet& acts, const ProbeHyper& hyper, int num_classes = 0);

/// Mean cross-entropy + l2/2 * ||W||^2 and its gradients (bias unregularised).
double probe_loss_and_gradient(const ActivationSet& acts, const Tensor2& weight, const Tensor2& bias, double l2,
                               Tensor2* grad_weight = nullptr, Tensor2* grad_bias = nullptr);

std::vector<int> probe_predict(const ProbeModel& probe, const ActivationSet& acts);

nlohmann::json to_json(const ProbeModel& probe);
ProbeModel probe_from_json(const nlohmann::json& j);
void save_probe(const ProbeModel& probe, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);

/// Score sum_c |W[c, j]|, descending; ties go to the lower global index.
NeuronRefs rank_global(const ProbeModel& probe);
/// Score |W[c, j]|, same ordering rule.
NeuronRefs rank_per_class(const ProbeModel& probe, int c);

enum class Scope { AllLayers, LastLayer };

struct SelectionKind {
  enum Kind { Global, Class, Directed } kind = Global;
  int target = 0;  // used by Class and Directed

  static SelectionKind global() { return {Global, 0}; }
  static SelectionKind per_class(int c) { return {Class, c}; }
  static SelectionKind directed(int c) { return {Directed, c}; }
  friend bool operator==(const SelectionKind&, const SelectionKind&) = default;
};

struct SelectionSpec {
  double p = 0.05;
  Scope scope = Scope::AllLayers;
  SelectionKind kind;

  /// p in (0, 1]; target < classes when the kind carries one.
  void validate(int classes) const;
  friend bool operator==(const SelectionSpec&, const SelectionSpec&) = default;
};

/// floor(p*H*L) for all-layer scope, floor(p*H) for last-layer scope.
int top_k_count(double p, Scope scope, const ModelConfig& config);

NeuronRefs select_top_k(const NeuronRefs& ranking, const SelectionSpec& sel, const ModelConfig& config);

/// Takes the top 2k of the (scope-filtered) global ranking, reorders that pool
/// by class-c score and keeps the first k.
NeuronRefs select_directed(const NeuronRefs& global_ranking, const NeuronRefs& class_ranking,
                           const SelectionSpec& sel, const ModelConfig& config);

/// Dispatches on sel.kind using the probe's rankings.
NeuronRefs select_neurons(const ProbeModel& probe, const SelectionSpec& sel, const ModelConfig& config);

/// k neurons drawn uniformly without replacement from the scope; uninformed baseline.
NeuronRefs select_random(const SelectionSpec& sel, const ModelConfig& config, std::uint64_t seed);

std::string scope_name(Scope s);
Scope scope_from_name(const std::string& s);

struct RankingRecord {
  SelectionSpec selection;
  int k = 0;
  std::uint64_t seed = 0;
  std::uint64_t fingerprint = 0;
  NeuronRefs neurons;
};

nlohmann::json to_json(const RankingRecord& r);
RankingRecord ranking_from_json(const nlohmann::json& j);
void persist_ranking(const RankingRecord& r, const std::filesystem::path& path);
/// With `expected_fingerprint`, throws StalenessError on mismatch.
RankingRecord load_ranking(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t fingerprint_from_hex(const std::string& s);

}  // namespace synapse
