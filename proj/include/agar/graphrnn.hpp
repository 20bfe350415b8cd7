#pragma once

#include <string>
#include <vector>

#include "agar/geometry.hpp"
#include "agar/tensor.hpp"

namespace agar {

// Recurrent carry of one hierarchy level: the previous frame's coordinates,
// spatial features and dynamic features at that level's resolution. `valid`
// is false before the first frame; consumers then substitute a virtual past
// (current coordinates and spatial features, zero dynamics). Values are
// stored as plain matrices; the Vars additionally carry the gradient chain,
// but are safe to dereference only while the tape that wrote them lives.
struct LevelState {
  Matrix prev_coords;
  Matrix prev_features_value;
  Matrix prev_dynamic_value;
  Var prev_features;  // gradient-carrying: dynamics backpropagate across frames
  Var prev_dynamic;
  std::vector<Index> segments;  // row extents per stacked sequence
  bool valid = false;
};

/**
 * Dynamic-feature cell configuration. The spatio-temporal graph links each
 * point to k_present neighbors in the current frame (self edge included) and
 * k_past neighbors in the previous frame, ranked by spatial-feature distance
 * unless `coordinate_graph` asks for coordinates. `temporal_only` drops the
 * present edges and doubles k_past, keeping the degree constant.
 */
struct CellConfig {
  Index dynamic_width = 128;
  int k_present = 8;
  int k_past = 8;
  bool temporal_only = false;
  bool coordinate_graph = false;
  bool spatial_deltas = true;  // false: feature-delta message block forced to zero
};

// Registers "<group>.W" / ".b" with input rows
//   [input dynamic | source dynamic | coord delta | feature delta | frame offset]
void register_cell(ParameterStore& store, const std::string& group,
                   Index dynamic_width, Index spatial_width);

// Builds the merged present+past edge set (per target: present run first).
EdgeSet build_st_graph(const PointSet& frame, const PointSet& past,
                       const CellConfig& config);

/**
 * One recurrent update: per edge, the message is an affine map of the
 * concatenated (target input dynamic, source dynamic, coordinate delta,
 * spatial-feature delta, frame offset); per target, the new dynamic feature
 * is the element-wise max over its messages. Past edges read the source
 * dynamic and spatial rows from the previous frame.
 */
Var cell_forward(Tape& tape, ParameterStore& store, const std::string& group,
                 Var input_dynamic, Var spatial, Var past_spatial,
                 Var past_dynamic, const EdgeSet& graph,
                 const CellConfig& config);

// One hierarchy level's output for a frame. When several sequences are
// stacked into one row space, `segments` bounds each sequence's rows at this
// level's resolution (empty means a single sequence spanning all rows).
struct LevelOutput {
  Matrix coords;               // M x 3
  Var spatial;                 // M x d_s
  Var dynamic;                 // M x d_d
  std::vector<Index> sample;   // indices into the previous level (level 1: empty)
  std::vector<Index> segments;
};

struct DePhaseConfig {
  int levels = 3;
  int downsample_factor = 2;
  std::vector<int> k_present;  // per level
  std::vector<int> k_past;
  CellConfig cell;             // width/ablation template shared by levels
  std::string group_prefix = "dynamic.level";
};

/**
 * Downsample-and-extract pass: level 1 consumes the full frame with zero
 * input dynamics; before each deeper level, coordinates, spatial features
 * and the previous level's output are subsampled by farthest-point sampling
 * at the configured factor. States update to the current frame per level.
 * `forced_samples` (one index list per level >= 2) overrides the sampling,
 * which keeps permutation tests well-defined.
 *
 * `carry` controls the recurrent gradient chain: true reuses the state Vars
 * (every frame of the unroll must then share `tape`); false re-wraps the
 * stored state values as constants on `tape`, cutting gradients at the frame
 * boundary — required when states cross tapes, as in evaluation rollouts.
 *
 * `segments` stacks several independent sequences into one pass: sequence s
 * occupies frame rows [(*segments)[s], (*segments)[s+1]). Sampling, graphs
 * and states are built per sequence and spliced, so nothing leaks across
 * sequence boundaries; the level outputs carry the per-level row extents.
 * Forced samples are only supported for a single sequence.
 */
std::vector<LevelOutput> de_phase(
    Tape& tape, ParameterStore& store, const Matrix& frame_coords, Var spatial,
    std::vector<LevelState>& states, const DePhaseConfig& config,
    const std::vector<std::vector<Index>>* forced_samples = nullptr,
    bool carry = true, const std::vector<Index>* segments = nullptr);

}  // namespace agar
