#include "agar/graphrnn.hpp"

namespace agar {

namespace {

// Row offsets into a cell weight matrix: target dynamic block, source
// dynamic block, coordinate delta (3), frame offset (1), spatial delta.
struct CellLayout {
  Index d_dynamic;
  Index d_spatial;
  Index input_at() const { return 0; }
  Index source_at() const { return d_dynamic; }
  Index dp_at() const { return 2 * d_dynamic; }
  Index dt_at() const { return 2 * d_dynamic + 3; }
  Index ds_at() const { return 2 * d_dynamic + 4; }
  Index total() const { return 2 * d_dynamic + 4 + d_spatial; }
};

}  // namespace

void register_cell(ParameterStore& store, const std::string& group,
                   Index dynamic_width, Index spatial_width) {
  const CellLayout layout{dynamic_width, spatial_width};
  store.add_group(group, layout.total(), dynamic_width);
}

EdgeSet build_st_graph(const PointSet& frame, const PointSet& past,
                       const CellConfig& config) {
  if (frame.size() == 0)
    throw EmptyReferenceError("build_st_graph: empty frame");
  const Metric metric =
      config.coordinate_graph ? Metric::coordinates : Metric::features;
  const int k_present = config.temporal_only ? 0 : config.k_present;
  const int k_past = config.temporal_only ? 2 * config.k_past : config.k_past;
  if (k_present < 1 && k_past < 1)
    throw ConfigError("build_st_graph: graph would have no edges");

  EdgeSet present, history;
  if (k_present > 0)
    present = knn(frame, frame, k_present, metric, /*include_self=*/true);
  if (k_past > 0)
    history = knn(frame, past, k_past, metric, /*include_self=*/false);

  const Index n = frame.size();
  const bool both = k_present > 0 && k_past > 0;
  if (!both) {
    EdgeSet& only = k_present > 0 ? present : history;
    if (k_present == 0)
      for (std::size_t e = 0; e < only.edges.size(); ++e) {
        only.edges[e].past = 1;
        only.dt(Index(e), 0) = 1.0;
      }
    return only;
  }

  // Merge per target: present run, then past run.
  EdgeSet merged;
  const Index total = present.edge_count() + history.edge_count();
  merged.offsets.assign(std::size_t(n) + 1, 0);
  merged.edges.reserve(std::size_t(total));
  merged.dp.resize(total, 3);
  const bool carry_ds = present.ds.size() > 0 && history.ds.size() > 0;
  if (carry_ds) merged.ds.resize(total, present.ds.cols());
  merged.dt.resize(total, 1);
  Index at = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index e = present.offsets[std::size_t(i)];
         e < present.offsets[std::size_t(i) + 1]; ++e) {
      merged.edges.push_back(present.edges[std::size_t(e)]);
      merged.dp.row(at) = present.dp.row(e);
      if (carry_ds) merged.ds.row(at) = present.ds.row(e);
      merged.dt(at, 0) = 0.0;
      ++at;
    }
    for (Index e = history.offsets[std::size_t(i)];
         e < history.offsets[std::size_t(i) + 1]; ++e) {
      EdgeSet::Edge edge = history.edges[std::size_t(e)];
      edge.past = 1;
      merged.edges.push_back(edge);
      merged.dp.row(at) = history.dp.row(e);
      if (carry_ds) merged.ds.row(at) = history.ds.row(e);
      merged.dt(at, 0) = 1.0;
      ++at;
    }
    merged.offsets[std::size_t(i) + 1] = at;
  }
  return merged;
}

Var cell_forward(Tape& tape, ParameterStore& store, const std::string& group,
                 Var input_dynamic, Var spatial, Var past_spatial,
                 Var past_dynamic, const EdgeSet& graph,
                 const CellConfig& config) {
  const Index n = input_dynamic.rows();
  if (graph.target_count() != n)
    throw DimensionError("cell_forward: graph does not match the frame");
  for (Index i = 0; i < n; ++i)
    if (graph.offsets[std::size_t(i) + 1] <= graph.offsets[std::size_t(i)])
      throw EmptyNeighborhoodError("cell_forward: point " + std::to_string(i) +
                                   " has no neighbors");
  const CellLayout layout{config.dynamic_width, spatial.cols()};
  Var w = tape.use(store.at(group + ".W"));
  Var b = tape.use(store.at(group + ".b"));
  if (w.rows() != layout.total() || w.cols() != config.dynamic_width)
    throw DimensionError("cell_forward: weight group '" + group +
                         "' does not match the configured widths");
  if (input_dynamic.cols() != config.dynamic_width)
    throw DimensionError("cell_forward: input dynamic width mismatch");

  std::vector<Index> edge_target(graph.edges.size());
  std::vector<std::pair<int, Index>> edge_source(graph.edges.size());
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    edge_target[e] = graph.edges[e].target;
    edge_source[e] = {graph.edges[e].past, graph.edges[e].source};
  }

  // The affine map distributes over the concatenated message, so the node
  // blocks are projected at node scale and the per-edge delta block inside
  // the fused reduction, which takes the per-target max without
  // materializing a dense row per edge. The bias is hoisted past the max (a
  // shared offset cannot change which edge wins a column).
  Var target_term = matmul_rows(input_dynamic, w, layout.input_at(),
                                layout.d_dynamic);
  Var source_present = matmul_rows(input_dynamic, w, layout.source_at(),
                                   layout.d_dynamic);
  Var source_past = matmul_rows(past_dynamic, w, layout.source_at(),
                                layout.d_dynamic);

  Matrix edge_data(graph.edge_count(), 4);
  edge_data.leftCols(3) = graph.dp;
  edge_data.col(3) = graph.dt.col(0);

  Var delta_present, delta_past;
  if (config.spatial_deltas && layout.d_spatial > 0) {
    delta_present = matmul_rows(spatial, w, layout.ds_at(), layout.d_spatial);
    delta_past =
        matmul_rows(past_spatial, w, layout.ds_at(), layout.d_spatial);
  }

  return edge_message_max(target_term, source_present, source_past,
                          delta_present, delta_past, std::move(edge_data), w,
                          layout.dp_at(), b, edge_target, edge_source,
                          graph.offsets);
}

std::vector<LevelOutput> de_phase(
    Tape& tape, ParameterStore& store, const Matrix& frame_coords, Var spatial,
    std::vector<LevelState>& states, const DePhaseConfig& config,
    const std::vector<std::vector<Index>>* forced_samples, bool carry,
    const std::vector<Index>* segments) {
  if (config.levels < 1) throw ConfigError("de_phase: levels must be >= 1");
  if (config.downsample_factor < 1)
    throw ConfigError("de_phase: downsample factor must be >= 1");
  if (int(states.size()) != config.levels)
    throw DimensionError("de_phase: expected one state per level");
  if (int(config.k_present.size()) != config.levels ||
      int(config.k_past.size()) != config.levels)
    throw ConfigError("de_phase: need k settings for every level");
  if (forced_samples && int(forced_samples->size()) != config.levels - 1)
    throw DimensionError("de_phase: forced samples must cover levels 2..L");

  std::vector<Index> level_seg{0, frame_coords.rows()};
  if (segments) {
    if (segments->size() < 2 || segments->front() != 0 ||
        segments->back() != frame_coords.rows())
      throw DimensionError("de_phase: segments must cover the frame rows");
    for (std::size_t s = 1; s < segments->size(); ++s)
      if ((*segments)[s] <= (*segments)[s - 1])
        throw DimensionError("de_phase: segments must be ascending and "
                             "non-empty");
    if (forced_samples && segments->size() > 2)
      throw ConfigError("de_phase: forced samples need a single sequence");
    level_seg = *segments;
  }
  const std::size_t n_seq = level_seg.size() - 1;

  std::vector<LevelOutput> levels;
  levels.reserve(std::size_t(config.levels));

  Matrix coords = frame_coords;
  Var level_spatial = spatial;
  Var input_dynamic = tape.constant(
      Matrix::Zero(frame_coords.rows(), config.cell.dynamic_width));

  for (int l = 1; l <= config.levels; ++l) {
    LevelOutput out;
    if (l > 1) {
      // Subsample each sequence's block independently; the stacked order is
      // preserved, so the new segment bounds follow from the sample counts.
      std::vector<Index> next_seg(n_seq + 1, 0);
      for (std::size_t s = 0; s < n_seq; ++s) {
        const Index rows = level_seg[s + 1] - level_seg[s];
        const Index target = rows / config.downsample_factor;
        if (target < 1)
          throw ConfigError("de_phase: level " + std::to_string(l) +
                            " would sample below one point");
        if (forced_samples) {
          out.sample = (*forced_samples)[std::size_t(l - 2)];
        } else {
          const std::vector<Index> local = farthest_point_sample(
              coords.middleRows(level_seg[s], rows), target);
          for (Index idx : local) out.sample.push_back(level_seg[s] + idx);
        }
        next_seg[s + 1] = Index(out.sample.size());
      }
      level_seg = std::move(next_seg);
      Matrix sub_coords(Index(out.sample.size()), 3);
      for (std::size_t r = 0; r < out.sample.size(); ++r)
        sub_coords.row(Index(r)) = coords.row(out.sample[r]);
      coords = std::move(sub_coords);
      level_spatial = gather_rows(level_spatial, out.sample);
      input_dynamic = gather_rows(input_dynamic, out.sample);
    }
    out.coords = coords;
    out.segments = level_seg;

    LevelState& state = states[std::size_t(l - 1)];
    Matrix past_coords;
    Var past_spatial, past_dynamic;
    std::vector<Index> past_seg;
    if (state.valid) {
      past_coords = state.prev_coords;
      past_seg = state.segments.empty()
                     ? std::vector<Index>{0, past_coords.rows()}
                     : state.segments;
      if (past_seg.size() != level_seg.size())
        throw DimensionError(
            "de_phase: carried state spans a different sequence count");
      if (carry) {
        past_spatial = state.prev_features;
        past_dynamic = state.prev_dynamic;
      } else {
        past_spatial = tape.constant(state.prev_features_value);
        past_dynamic = tape.constant(state.prev_dynamic_value);
      }
    } else {
      // Virtual past: the current frame standing still with zero dynamics.
      past_coords = coords;
      past_spatial = level_spatial;
      past_dynamic = tape.constant(
          Matrix::Zero(coords.rows(), config.cell.dynamic_width));
      past_seg = level_seg;
    }

    CellConfig cell = config.cell;
    cell.k_present = config.k_present[std::size_t(l - 1)];
    cell.k_past = config.k_past[std::size_t(l - 1)];
    EdgeSet graph;
    if (n_seq == 1) {
      PointSet frame_set{coords, level_spatial.value()};
      PointSet past_set{past_coords, past_spatial.value()};
      graph = build_st_graph(frame_set, past_set, cell);
    } else {
      // Per-sequence graphs spliced into the stacked row space: neighbors
      // never cross a sequence boundary.
      const Matrix& feat = level_spatial.value();
      const Matrix& past_feat = past_spatial.value();
      std::vector<EdgeSet> parts;
      parts.reserve(n_seq);
      for (std::size_t s = 0; s < n_seq; ++s) {
        const Index rows = level_seg[s + 1] - level_seg[s];
        const Index past_rows = past_seg[s + 1] - past_seg[s];
        PointSet frame_set{coords.middleRows(level_seg[s], rows),
                           feat.middleRows(level_seg[s], rows)};
        PointSet past_set{past_coords.middleRows(past_seg[s], past_rows),
                          past_feat.middleRows(past_seg[s], past_rows)};
        parts.push_back(build_st_graph(frame_set, past_set, cell));
      }
      graph = splice_edge_sets(parts, level_seg, level_seg, past_seg);
    }

    const std::string group = config.group_prefix + std::to_string(l);
    out.spatial = level_spatial;
    out.dynamic = cell_forward(tape, store, group, input_dynamic, level_spatial,
                               past_spatial, past_dynamic, graph, cell);

    state.prev_coords = coords;
    state.prev_features_value = level_spatial.value();
    state.prev_dynamic_value = out.dynamic.value();
    state.segments = level_seg;
    if (carry) {
      state.prev_features = level_spatial;
      state.prev_dynamic = out.dynamic;
    } else {
      // Never leave Vars pointing at a tape the caller is about to drop.
      state.prev_features = Var();
      state.prev_dynamic = Var();
    }
    state.valid = true;

    input_dynamic = out.dynamic;
    levels.push_back(out);
  }
  return levels;
}

}  // namespace agar
