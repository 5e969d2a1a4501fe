#pragma once

// Shared fixtures for the test binaries: small models, hand-rolled
// generators and scratch directories.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "synapse/data.hpp"
#include "synapse/encoder.hpp"
#include "synapse/random.hpp"
#include "synapse/trainer.hpp"

namespace synapse::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab = 16;
  c.max_seq = 8;
  c.classes = 3;
  return c;
}

/// Weights with every entry perturbed by `scale` * N(0,1) so that gains,
/// biases and attention all carry gradient signal.
inline EncoderWeights random_weights(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  EncoderWeights w = init_weights(c, seed);
  CounterRng rng(hash_keys(seed, {17}));
  w.for_each([&](const std::string&, Tensor2& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += scale * rng.normal();
  });
  return w;
}

inline Tokens random_tokens(const ModelConfig& c, int length, CounterRng& rng) {
  Tokens t(static_cast<std::size_t>(length));
  t[0] = kClsToken;
  for (int i = 1; i < length; ++i) t[static_cast<std::size_t>(i)] = 1 + static_cast<int>(rng.below(c.vocab - 1));
  return t;
}

inline Tensor2 random_matrix(Eigen::Index r, Eigen::Index c, CounterRng& rng, double scale = 1.0) {
  Tensor2 m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline GenSpec small_gen_spec() {
  GenSpec g;
  g.classes = 3;
  g.vocab = 24;
  g.seq_len = 12;
  g.motif_len = 3;
  g.noise_rate = 0.1;
  g.per_class = 80;
  g.seed = 7;
  return g;
}

inline ModelConfig small_model_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab = 24;
  c.max_seq = 12;
  c.classes = 3;
  return c;
}

struct SmallWorld {
  DatasetSplits splits;
  EncoderWeights weights;
};

/// A small encoder trained once per test binary on the small synthetic task.
inline const SmallWorld& small_world() {
  static const SmallWorld world = [] {
    SmallWorld sw;
    sw.splits = split(generate(small_gen_spec()), SplitFractions{}, 3);
    TrainHyper h;
    h.lr = 5e-3;
    h.epochs = 20;
    h.batch = 16;
    h.seed = 1;
    sw.weights = train_encoder(small_model_config(), sw.splits.train, h).weights;
    return sw;
  }();
  return world;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("synapse_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace synapse::testing
