#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "synapse/data.hpp"
#include "synapse/encoder.hpp"
#include "synapse/eval.hpp"

namespace synapse {

struct TrainHyper {
  double lr = 1e-3;
  int epochs = 15;
  int batch = 32;
  std::uint64_t seed = 0;
};

struct TrainResult {
  EncoderWeights weights;
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) on cross-entropy, no dropout.
/// Throws TrainingError if the loss becomes non-finite.
TrainResult train_encoder(const ModelConfig& config, const Dataset& train, const TrainHyper& hyper);

/// Same, starting from the given weights.
TrainResult train_encoder(EncoderWeights initial, const Dataset& train, const TrainHyper& hyper);

/// Cross-entropy of one sample; adds d(loss)/d(param) into `grad_accum`.
double loss_and_gradient(const EncoderWeights& w, std::span<const int> tokens, int label, EncoderWeights& grad_accum);

/// Cross-entropy of one sample without gradients.
double sample_loss(const EncoderWeights& w, std::span<const int> tokens, int label);

/// Predictions for every sample under `spec`. The sample index keys noise streams.
std::vector<int> predict(const EncoderWeights& w, const Dataset& ds, const OptionalSpec& spec = std::nullopt);

MetricsReport evaluate(const EncoderWeights& w, const Dataset& ds, const OptionalSpec& spec = std::nullopt);

}  // namespace synapse
