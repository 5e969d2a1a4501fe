#pragma once

// Post-norm Transformer encoder with a linear classification head.
//
// The forward pass exposes the post-block [CLS] row of every layer and
// applies an optional InterventionSpec in the residual stream: a targeted
// layer's [CLS] output is modified before the next block consumes it.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "synapse/intervention_spec.hpp"
#include "synapse/numerics.hpp"
#include "synapse/tape.hpp"

namespace synapse {

/// Token id reserved for [CLS]; every sequence starts with it.
inline constexpr int kClsToken = 0;

struct ModelConfig {
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int ffn = 128;
  int vocab = 64;
  int max_seq = 32;
  int classes = 5;

  /// Throws ConfigError unless hidden % heads == 0, everything is positive and max_seq >= 2.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerParams {
  T wq, bq, wk, bk, wv, bv, wo, bo;
  T ln1_gamma, ln1_beta;
  T w1, b1, w2, b2;
  T ln2_gamma, ln2_beta;

  /// Visits every parameter in file order.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("wq", p.wq); f("bq", p.bq); f("wk", p.wk); f("bk", p.bk);
    f("wv", p.wv); f("bv", p.bv); f("wo", p.wo); f("bo", p.bo);
    f("ln1_gamma", p.ln1_gamma); f("ln1_beta", p.ln1_beta);
    f("w1", p.w1); f("b1", p.b1); f("w2", p.w2); f("b2", p.b2);
    f("ln2_gamma", p.ln2_gamma); f("ln2_beta", p.ln2_beta);
  }
};

/// Learnable state of the encoder. Instantiated with Tensor2 for storage and
/// ad::Var for a tape binding; both share the same visiting order.
template <typename T>
struct EncoderParams {
  ModelConfig config;
  T token_embedding;     // V x H
  T position_embedding;  // S_max x H
  std::vector<LayerParams<T>> layers;
  T head_weight;         // C x H
  T head_bias;           // 1 x C

  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      LayerParams<T>::visit(self.layers[l], [&](const char* name, auto& p) { f(prefix + name, p); });
    }
    f(std::string("head_weight"), self.head_weight);
    f(std::string("head_bias"), self.head_bias);
  }
};

using EncoderWeights = EncoderParams<Tensor2>;
using EncoderVars = EncoderParams<ad::Var>;

/// Scaled normal init (std 0.02) for matrices and embeddings; gains 1, biases 0.
EncoderWeights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Same shapes as `like`, all zeros.
EncoderWeights zeros_like(const EncoderWeights& like);

/// FNV-1a over config and every parameter in file order.
std::uint64_t fingerprint(const EncoderWeights& w);
/// FNV-1a over head weight and bias only.
std::uint64_t head_fingerprint(const EncoderWeights& w);

void save_weights(const EncoderWeights& w, const std::filesystem::path& path);
EncoderWeights load_weights(const std::filesystem::path& path);

using Tokens = std::vector<int>;

/// token_embedding[id_s] + position_embedding[s] for each position s.
Tensor2 embed(const EncoderWeights& w, std::span<const int> tokens);

struct ForwardContext {
  /// Keys the per-sample noise streams of stochastic interventions.
  std::uint64_t sample = 0;
};

struct ForwardTrace {
  Tensor2 cls_per_layer;  // L x H, post-block (and post-intervention) [CLS]
  RowVectorXd logits;     // length C, after any output-stage intervention
  int prediction = 0;     // argmax, lowest index on ties
};

/// Rejects specs that reference layers/dims outside the model or carry invalid magnitudes.
void validate_spec(const InterventionSpec& spec, const ModelConfig& config);

ForwardTrace forward_from_embeddings(const EncoderWeights& w, const Tensor2& embeddings,
                                     const OptionalSpec& spec = std::nullopt, ForwardContext ctx = {});
ForwardTrace forward(const EncoderWeights& w, std::span<const int> tokens,
                     const OptionalSpec& spec = std::nullopt, ForwardContext ctx = {});

// Tape-level building blocks, shared by training and gradient attacks.

/// Registers every parameter on the tape, as variables when `trainable`.
EncoderVars bind(ad::Tape& tape, const EncoderWeights& w, bool trainable);
ad::Var embed(ad::Tape& tape, const EncoderVars& vars, std::span<const int> tokens);

struct EncoderNodes {
  std::vector<ad::Var> cls;  // 1 x H per layer
  ad::Var logits;            // 1 x C
};

/// The additive embedding perturbation for one sample, keyed by (seed, sample, position, dim).
Tensor2 embedding_noise(const EmbeddingNoise& n, Eigen::Index rows, Eigen::Index cols, std::uint64_t sample);

EncoderNodes encode(ad::Tape& tape, const EncoderVars& vars, ad::Var embeddings, const OptionalSpec& spec,
                    ForwardContext ctx);

}  // namespace synapse
