#pragma once

// Synthetic sequence classification: each class owns a motif of distinct
// tokens that is planted, with optional corruption, into uniform background.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "synapse/encoder.hpp"

namespace synapse {

struct GenSpec {
  int classes = 5;
  int vocab = 64;
  int seq_len = 32;  // including the leading [CLS]
  int motif_len = 5;
  double noise_rate = 0.1;
  int per_class = 200;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the motifs cannot be planted.
  void validate() const;

  /// Token id of position `i` of class `c`'s motif. Motif ids start right after [CLS].
  int motif_token(int c, int i) const { return 1 + c * motif_len + i; }
  int first_background_token() const { return 1 + classes * motif_len; }
};

struct Dataset {
  int classes = 0;
  int vocab = 0;
  int seq_len = 0;
  std::vector<Tokens> sequences;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::vector<int> class_counts() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset generate(const GenSpec& spec);

struct SplitFractions {
  double train = 0.6;
  double probe = 0.2;
  double test = 0.2;
};

struct DatasetSplits {
  Dataset train;
  Dataset probe;
  Dataset test;
};

/// Stratified, disjoint split. Within each split samples keep their original order.
DatasetSplits split(const Dataset& ds, SplitFractions fractions, std::uint64_t seed);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace synapse
