#pragma once

#include <string>
#include <vector>

#include "agar/combine.hpp"
#include "agar/graphrnn.hpp"
#include "agar/ssgnn.hpp"
#include "agar/tensor.hpp"

namespace agar {

/**
 * Full predictor configuration: per-frame spatial features, a hierarchy of
 * recurrent dynamic-feature cells over spatio-temporal graphs, feature
 * fusion, and an affine motion head. `no_spatial_features` zeroes the
 * spatial-feature deltas (block shape preserved) and builds every graph on
 * coordinates; `temporal_only_graph` drops present-frame edges and doubles
 * the past degree.
 */
struct ModelConfig {
  int levels = 3;
  std::vector<Index> ssgnn_widths = {64, 128, 128};
  int k_coordinate = 8;          // coordinate-graph degree (spatial features)
  Index dynamic_width = 128;
  Index fused_width = 128;
  std::vector<int> k_present;    // per level; empty = 8 everywhere
  std::vector<int> k_past;
  int downsample_factor = 2;
  Fusion fusion = Fusion::adaptive;
  Activation activation = Activation::relu;  // refine / fuse / propagate
  Activation attention_activation = Activation::sigmoid;
  bool no_spatial_features = false;
  bool temporal_only_graph = false;
  bool st_coordinate_graph = false;  // rank st-graph neighbors by coordinates
  bool ssgnn_source_feature = false;  // message carries source's feature
};

// Throws ConfigError naming the offending field.
void validate_model(const ModelConfig& config);

// Sub-configurations implied by a validated ModelConfig.
SsgnnConfig ssgnn_config(const ModelConfig& config);
DePhaseConfig de_phase_config(const ModelConfig& config);
CombineConfig combine_config(const ModelConfig& config);

// Registers every parameter group the configured model uses, in a fixed
// order (spatial rounds, per-level cells, fusion groups, motion head).
void register_model(ParameterStore& store, const ModelConfig& config);

// One fresh (invalid) recurrent state per hierarchy level.
std::vector<LevelState> initial_states(const ModelConfig& config);

struct StepResult {
  Var prediction;  // N x 3: input coordinates plus predicted motion
  Var motion;      // N x 3
  std::vector<LevelOutput> levels;
  Matrix alphas;   // N x L gates (empty in classic fusion)
};

/**
 * One prediction step: spatial features for the frame, the hierarchy of
 * recurrent cells (updating `states` to this frame), fusion, and the motion
 * head. `forced_alpha` / `forced_samples` are test hooks forwarded to the
 * fusion and sampling stages. `carry_state` keeps the recurrent gradient
 * chain alive across frames and requires every step of the unroll to share
 * `tape`; pass false when each frame gets its own tape (evaluation).
 *
 * `segments` runs several independent sequences through one step on shared
 * weights: sequence s occupies frame rows [(*segments)[s], (*segments)[s+1])
 * and every graph, sampling and interpolation stage is built per sequence,
 * so predictions match the per-sequence results while the matrix work is
 * batched. The prediction rows follow the input stacking.
 */
StepResult model_step(Tape& tape, ParameterStore& store, const Matrix& frame,
                      std::vector<LevelState>& states,
                      const ModelConfig& config,
                      const Matrix* forced_alpha = nullptr,
                      const std::vector<std::vector<Index>>* forced_samples =
                          nullptr,
                      bool carry_state = true,
                      const std::vector<Index>* segments = nullptr);

// Runs a step on a throwaway tape and decomposes the predicted motion into
// per-level contributions (gates frozen at their full-input values).
MotionBreakdown explain_step(ParameterStore& store, const Matrix& frame,
                             std::vector<LevelState>& states,
                             const ModelConfig& config);

}  // namespace agar
