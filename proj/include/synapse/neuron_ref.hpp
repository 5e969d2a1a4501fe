#pragma once

#include <cstddef>
#include <vector>

namespace synapse {

/// One [CLS] coordinate in the flattened L*H index space.
struct NeuronRef {
  int global_index = 0;
  int layer = 0;
  int dim = 0;
  double score = 0.0;

  /// Maps a global index to (layer, dim) by integer division and modulo with `hidden`.
  static NeuronRef from_global(int global_index, int hidden, double score = 0.0) {
    return NeuronRef{global_index, global_index / hidden, global_index % hidden, score};
  }

  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

using NeuronRefs = std::vector<NeuronRef>;

}  // namespace synapse
