#pragma once

#include <string>
#include <vector>

#include "agar/geometry.hpp"
#include "agar/tensor.hpp"

namespace agar {

/**
 * Static-geometry message passing over a coordinate kNN graph. Each round h
 * computes, per edge (target i, source j):
 *
 *   message = W_h * [feature_{h-1} ; p_i ; (p_j - p_i)] + b_h
 *
 * and pools messages per target with an element-wise max (the only
 * non-linearity). Round 0 features are empty, so round 1 consumes geometry
 * only. `message_uses_source_feature` switches the carried feature from the
 * target's own (the default) to the source's.
 */
struct SsgnnConfig {
  std::vector<Index> widths = {64, 128, 128};  // one entry per round
  int k = 8;  // coordinate-graph degree, self edge included
  bool message_uses_source_feature = false;
};

// Registers one weight group per round: "<prefix><h>.W" / ".b" (h from 1).
void register_ssgnn(ParameterStore& store, const SsgnnConfig& config,
                    const std::string& prefix = "spatial.round");

// Same-frame coordinate graph: k nearest by coordinates, self edge included.
EdgeSet build_coordinate_graph(const PointSet& frame, int k);

// Runs all rounds; returns the N x widths.back() spatial feature matrix.
Var ssgnn_forward(Tape& tape, ParameterStore& store, const PointSet& frame,
                  const EdgeSet& graph, const SsgnnConfig& config,
                  const std::string& prefix = "spatial.round");

}  // namespace agar
