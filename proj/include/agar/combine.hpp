#pragma once

#include <optional>
#include <string>
#include <vector>

#include "agar/graphrnn.hpp"
#include "agar/tensor.hpp"

namespace agar {

enum class Fusion { classic, adaptive };
Fusion parse_fusion(const std::string& name);
const char* to_string(Fusion mode);

/**
 * Fusion of the per-level dynamic features into one feature row per level-1
 * point.
 *
 * classic: iterates from the coarsest level down, interpolating the carried
 * features onto the next finer level's points, concatenating that level's own
 * features (skip link) and applying an affine map plus activation.
 *
 * adaptive: interpolates every level directly onto level-1 points, refines
 * each level independently, gates each refined row by a learned per-point
 * scalar (bounded activation over the concatenation of all refined rows) and
 * fuses the gated rows with a final affine map plus activation.
 */
struct CombineConfig {
  int levels = 3;
  Index dynamic_width = 128;
  Index fused_width = 128;
  Fusion fusion = Fusion::adaptive;
  Activation refine_activation = Activation::relu;
  Activation attention_activation = Activation::sigmoid;
  Activation fuse_activation = Activation::relu;
  Activation fp_activation = Activation::relu;
};

// Registers the groups used by the configured fusion mode plus the motion
// head ("motion").
void register_combine(ParameterStore& store, const CombineConfig& config);

// Classic hierarchical propagation; returns an N1 x fused_width feature.
Var classic_fp(Tape& tape, ParameterStore& store,
               const std::vector<LevelOutput>& levels,
               const CombineConfig& config);

struct CombineResult {
  Var fused;      // N1 x fused_width
  Matrix alphas;  // N1 x L gate values (empty in classic mode)
};

// Attention-gated combine. `forced_alpha` (N1 x L) bypasses the learned gate
// entirely; used by the motion decomposition and by tests.
CombineResult adaptive_combine(Tape& tape, ParameterStore& store,
                               const std::vector<LevelOutput>& levels,
                               const CombineConfig& config,
                               const Matrix* forced_alpha = nullptr);

// Dispatches on config.fusion.
CombineResult combine_levels(Tape& tape, ParameterStore& store,
                             const std::vector<LevelOutput>& levels,
                             const CombineConfig& config,
                             const Matrix* forced_alpha = nullptr);

// Per-point motion row from the fused features (affine head, no activation).
Var predict_motion(Tape& tape, ParameterStore& store, Var fused);

// P_hat = frame coords + motion.
Var predict_next(Tape& tape, const Matrix& frame_coords, Var motion);

// Value-level snapshot of one level (for re-running the fusion path).
struct LevelSnapshot {
  Matrix coords;
  Matrix dynamic;
};
std::vector<LevelSnapshot> snapshot_levels(const std::vector<LevelOutput>& levels);

/**
 * Per-level motion decomposition: reruns the fusion + prediction path once
 * with everything zeroed (bias baseline), then once per level with only that
 * level's features present, holding the gates at their full-input values in
 * adaptive mode. Level l's motion is its lone-level result minus the
 * baseline, so shared bias terms are not multiply-counted.
 */
struct MotionBreakdown {
  Matrix coords;                      // N1 x 3
  Matrix alphas;                      // N1 x L (all ones in classic mode)
  std::vector<Matrix> level_motions;  // L entries of N1 x 3
  Matrix motion_sum;                  // sum of level motions
  Matrix baseline;                    // all-levels-zero motion
  Matrix total_motion;                // full-input motion
};

MotionBreakdown disentangle_motions(ParameterStore& store,
                                    const std::vector<LevelSnapshot>& levels,
                                    const CombineConfig& config);

// CSV export: index, coordinates, per-level gates, per-level motions, total
// motion; one header line.
void write_attention_report(const std::filesystem::path& path,
                            const MotionBreakdown& breakdown);

}  // namespace agar
