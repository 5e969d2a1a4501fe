#pragma once

// Declarative description of a single inference-time perturbation. The
// encoder interprets these during the forward pass; nothing here touches weights.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "synapse/neuron_ref.hpp"

namespace synapse {

/// Zero the targeted [CLS] coordinates after their blocks.
struct Silence {
  NeuronRefs targets;
  friend bool operator==(const Silence&, const Silence&) = default;
};

/// Add N(0, sigma^2) to the targeted [CLS] coordinates after their blocks.
struct GaussianCls {
  NeuronRefs targets;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const GaussianCls&, const GaussianCls&) = default;
};

/// logits[target] += bias; logits[other] -= balanced_delta.
struct LogitBias {
  int target = 0;
  double bias = 0.0;
  double balanced_delta = 0.0;
  friend bool operator==(const LogitBias&, const LogitBias&) = default;
};

/// Every embedding coordinate += epsilon * N(0, 1) before block 0.
struct EmbeddingNoise {
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const EmbeddingNoise&, const EmbeddingNoise&) = default;
};

/// One signed-gradient step on the input embeddings.
struct Fgsm {
  double epsilon = 0.0;
  friend bool operator==(const Fgsm&, const Fgsm&) = default;
};

using InterventionSpec = std::variant<Silence, GaussianCls, LogitBias, EmbeddingNoise, Fgsm>;
using OptionalSpec = std::optional<InterventionSpec>;

/// Discriminator string used in JSON ("silence", "gaussian_cls", ...).
std::string variant_name(const InterventionSpec& spec);

}  // namespace synapse
