#include "agar/model.hpp"

#include <string>

namespace agar {

void validate_model(const ModelConfig& config) {
  if (config.levels < 1) throw ConfigError("levels must be at least 1");
  if (config.ssgnn_widths.empty())
    throw ConfigError("ssgnn_widths must name at least one round");
  for (Index w : config.ssgnn_widths)
    if (w < 1) throw ConfigError("ssgnn_widths entries must be positive");
  if (config.k_coordinate < 1)
    throw ConfigError("k_coordinate must be positive");
  if (config.dynamic_width < 1)
    throw ConfigError("dynamic_width must be positive");
  if (config.fused_width < 1) throw ConfigError("fused_width must be positive");
  if (config.downsample_factor < 1)
    throw ConfigError("downsample_factor must be positive");
  auto check_k = [&](const std::vector<int>& k, const char* name) {
    if (k.size() > 1 && int(k.size()) != config.levels)
      throw ConfigError(std::string(name) +
                        " must list one entry per level, a single shared "
                        "entry, or be empty");
    for (int v : k)
      if (v < 1) throw ConfigError(std::string(name) + " entries must be positive");
  };
  check_k(config.k_present, "k_present");
  check_k(config.k_past, "k_past");
}

namespace {

std::vector<int> per_level(const std::vector<int>& k, int levels) {
  if (int(k.size()) == levels) return k;
  // A single entry is shared by every level; empty means the reference
  // degree of 8.
  return std::vector<int>(std::size_t(levels), k.empty() ? 8 : k.front());
}

}  // namespace

SsgnnConfig ssgnn_config(const ModelConfig& config) {
  SsgnnConfig out;
  out.widths = config.ssgnn_widths;
  out.k = config.k_coordinate;
  out.message_uses_source_feature = config.ssgnn_source_feature;
  return out;
}

DePhaseConfig de_phase_config(const ModelConfig& config) {
  DePhaseConfig out;
  out.levels = config.levels;
  out.downsample_factor = config.downsample_factor;
  out.k_present = per_level(config.k_present, config.levels);
  out.k_past = per_level(config.k_past, config.levels);
  out.cell.dynamic_width = config.dynamic_width;
  out.cell.temporal_only = config.temporal_only_graph;
  // Without spatial features there is nothing to rank neighbors by; both
  // graphs fall back to coordinates and the feature deltas are all zero.
  out.cell.coordinate_graph =
      config.no_spatial_features || config.st_coordinate_graph;
  out.cell.spatial_deltas = true;
  return out;
}

CombineConfig combine_config(const ModelConfig& config) {
  CombineConfig out;
  out.levels = config.levels;
  out.dynamic_width = config.dynamic_width;
  out.fused_width = config.fused_width;
  out.fusion = config.fusion;
  out.refine_activation = config.activation;
  out.attention_activation = config.attention_activation;
  out.fuse_activation = config.activation;
  out.fp_activation = config.activation;
  return out;
}

void register_model(ParameterStore& store, const ModelConfig& config) {
  validate_model(config);
  if (!config.no_spatial_features)
    register_ssgnn(store, ssgnn_config(config));
  const Index spatial_width = config.ssgnn_widths.back();
  for (int l = 1; l <= config.levels; ++l)
    register_cell(store, "dynamic.level" + std::to_string(l),
                  config.dynamic_width, spatial_width);
  register_combine(store, combine_config(config));
}

std::vector<LevelState> initial_states(const ModelConfig& config) {
  return std::vector<LevelState>(std::size_t(config.levels));
}

StepResult model_step(Tape& tape, ParameterStore& store, const Matrix& frame,
                      std::vector<LevelState>& states,
                      const ModelConfig& config, const Matrix* forced_alpha,
                      const std::vector<std::vector<Index>>* forced_samples,
                      bool carry_state, const std::vector<Index>* segments) {
  validate_model(config);
  if (frame.cols() != 3)
    throw DimensionError("model_step: frames must be N x 3");
  if (frame.rows() < 1) throw CardinalityError("model_step: empty frame");
  if (!frame.allFinite())
    throw NumericError("model_step: frame coordinates must be finite");
  if (segments) {
    if (segments->size() < 2 || segments->front() != 0 ||
        segments->back() != frame.rows())
      throw DimensionError("model_step: segments must cover the frame rows");
    for (std::size_t s = 1; s < segments->size(); ++s)
      if ((*segments)[s] <= (*segments)[s - 1])
        throw DimensionError(
            "model_step: segments must be ascending and non-empty");
  }
  const bool stacked = segments && segments->size() > 2;

  Var spatial;
  if (config.no_spatial_features) {
    spatial = tape.constant(
        Matrix::Zero(frame.rows(), config.ssgnn_widths.back()));
  } else {
    PointSet ps;
    ps.coords = frame;
    EdgeSet graph;
    if (stacked) {
      // One coordinate graph per sequence, spliced into the stacked rows.
      std::vector<EdgeSet> parts;
      parts.reserve(segments->size() - 1);
      for (std::size_t s = 0; s + 1 < segments->size(); ++s) {
        PointSet part;
        part.coords = frame.middleRows(
            (*segments)[s], (*segments)[s + 1] - (*segments)[s]);
        parts.push_back(build_coordinate_graph(part, config.k_coordinate));
      }
      graph = splice_edge_sets(parts, *segments, *segments, *segments);
    } else {
      graph = build_coordinate_graph(ps, config.k_coordinate);
    }
    spatial = ssgnn_forward(tape, store, ps, graph, ssgnn_config(config));
  }

  StepResult out;
  out.levels = de_phase(tape, store, frame, spatial, states,
                        de_phase_config(config), forced_samples, carry_state,
                        segments);
  CombineResult fused = combine_levels(tape, store, out.levels,
                                       combine_config(config), forced_alpha);
  out.alphas = std::move(fused.alphas);
  out.motion = predict_motion(tape, store, fused.fused);
  out.prediction = predict_next(tape, frame, out.motion);
  return out;
}

MotionBreakdown explain_step(ParameterStore& store, const Matrix& frame,
                             std::vector<LevelState>& states,
                             const ModelConfig& config) {
  Tape tape;
  StepResult step = model_step(tape, store, frame, states, config,
                               /*forced_alpha=*/nullptr,
                               /*forced_samples=*/nullptr,
                               /*carry_state=*/false);
  return disentangle_motions(store, snapshot_levels(step.levels),
                             combine_config(config));
}

}  // namespace agar
