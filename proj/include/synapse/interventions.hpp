#pragma once

// Adversarial block: spec constructors for the forward-pass perturbations,
// FGSM on input embeddings, and reversible edits of the classification head.

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <json.hpp>

#include "synapse/encoder.hpp"

namespace synapse {

InterventionSpec make_silence(NeuronRefs targets);
InterventionSpec make_gaussian_cls(NeuronRefs targets, double sigma, std::uint64_t seed);
InterventionSpec make_logit_bias(int target, double bias, double balanced_delta = 0.0);
InterventionSpec make_embedding_noise(double epsilon, std::uint64_t seed);
InterventionSpec make_fgsm(double epsilon);

/// Gradient of the cross-entropy with respect to the input embeddings, plus the loss.
struct EmbeddingGradient {
  Tensor2 embeddings;
  Tensor2 gradient;
  double loss = 0.0;
};
EmbeddingGradient embedding_gradient(const EncoderWeights& w, std::span<const int> tokens, int label);

/// emb + epsilon * sign(dCE/d emb). sign(0) is 0.
Tensor2 fgsm_perturb(const EncoderWeights& w, std::span<const int> tokens, int label, double epsilon);

/// Checks the embedding gradient against central differences on `coords`
/// random coordinates; throws NumericalError above `tolerance` relative error.
void fgsm_self_test(const EncoderWeights& w, std::span<const int> tokens, int label, int coords = 16,
                    double tolerance = 1e-5, std::uint64_t seed = 0);

/// Forward pass for sample `sample_index` under any spec, FGSM included.
ForwardTrace attacked_forward(const EncoderWeights& w, std::span<const int> tokens, int label,
                              std::uint64_t sample_index, const OptionalSpec& spec);

/// W[target, j] += delta for j in columns; balanced: other rows -= delta / (C - 1);
/// suppress s: W[s, j] -= delta as well.
struct BalancedPush {
  int target = 0;
  double delta = 0.0;
  std::vector<int> columns;
  bool balanced = true;
  std::optional<int> suppress;
};

/// b[target] += delta.
struct BiasOnly {
  int target = 0;
  double delta = 0.0;
};

using HeadEdit = std::variant<BalancedPush, BiasOnly>;

struct HeadBackup {
  Tensor2 weight;
  Tensor2 bias;
  std::uint64_t original_hash = 0;  // head before the edit
  std::uint64_t edited_hash = 0;    // head right after the edit
};

/// Applies the edit in place and returns the pre-edit copy.
HeadBackup apply_head_edit(EncoderWeights& w, const HeadEdit& edit);

/// Restores the backed-up head. Idempotent; throws RestoreError if the head
/// matches neither the edited nor the original state of this backup.
void restore_head(EncoderWeights& w, const HeadBackup& backup);

/// Distinct hidden dims of `refs`, in first-seen order, optionally truncated to `max_columns`.
std::vector<int> columns_from_refs(const NeuronRefs& refs, std::optional<std::size_t> max_columns = std::nullopt);

nlohmann::json to_json(const NeuronRef& r);
NeuronRef neuron_ref_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InterventionSpec& spec);
InterventionSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HeadEdit& edit);
HeadEdit head_edit_from_json(const nlohmann::json& j);

}  // namespace synapse
