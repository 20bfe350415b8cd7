#include "agar/ssgnn.hpp"

namespace agar {

namespace {

// Row layout of a round's weight matrix: previous feature block, then the
// target coordinates, then the coordinate delta.
struct RoundLayout {
  Index feature_rows;
  Index total() const { return feature_rows + 6; }
};

}  // namespace

void register_ssgnn(ParameterStore& store, const SsgnnConfig& config,
                    const std::string& prefix) {
  if (config.widths.empty())
    throw ConfigError("spatial network needs at least one round");
  Index prev = 0;
  for (std::size_t h = 0; h < config.widths.size(); ++h) {
    if (config.widths[h] < 1)
      throw ConfigError("spatial round widths must be positive");
    store.add_group(prefix + std::to_string(h + 1), prev + 6, config.widths[h]);
    prev = config.widths[h];
  }
}

EdgeSet build_coordinate_graph(const PointSet& frame, int k) {
  return knn(frame, frame, k, Metric::coordinates, /*include_self=*/true);
}

Var ssgnn_forward(Tape& tape, ParameterStore& store, const PointSet& frame,
                  const EdgeSet& graph, const SsgnnConfig& config,
                  const std::string& prefix) {
  const Index n = frame.size();
  if (graph.target_count() != n)
    throw DimensionError("ssgnn_forward: graph does not match the frame");
  for (Index i = 0; i < n; ++i)
    if (graph.offsets[std::size_t(i) + 1] <= graph.offsets[std::size_t(i)])
      throw EmptyNeighborhoodError("ssgnn_forward: point " + std::to_string(i) +
                                   " has no neighbors");

  std::vector<std::pair<int, Index>> edge_carrier(graph.edges.size());
  for (std::size_t e = 0; e < graph.edges.size(); ++e)
    edge_carrier[e] = {0, config.message_uses_source_feature
                              ? graph.edges[e].source
                              : graph.edges[e].target};
  std::vector<Index> edge_target(graph.edges.size());
  for (std::size_t e = 0; e < graph.edges.size(); ++e)
    edge_target[e] = graph.edges[e].target;

  Var coords = tape.constant(frame.coords);

  Var features;  // empty before the first round
  Index prev_width = 0;
  for (std::size_t h = 0; h < config.widths.size(); ++h) {
    const std::string group = prefix + std::to_string(h + 1);
    Var w = tape.use(store.at(group + ".W"));
    Var b = tape.use(store.at(group + ".b"));
    const RoundLayout layout{prev_width};
    if (w.rows() != layout.total() || w.cols() != config.widths[h])
      throw DimensionError("ssgnn_forward: weight group '" + group +
                           "' does not match the configured widths");

    // Project node features and coordinates once at node scale; the fused
    // reduction projects the per-edge coordinate delta internally, spreads
    // everything to edges, and pools per target. The bias is hoisted past
    // the max (a shared offset cannot change the winner).
    Var feature_term;  // skipped in the first round
    if (prev_width > 0) feature_term = matmul_rows(features, w, 0, prev_width);
    Var coord_term = matmul_rows(coords, w, prev_width, 3);
    features = edge_message_max(coord_term, feature_term, Var(), Var(), Var(),
                                graph.dp, w, prev_width + 3, b, edge_target,
                                edge_carrier, graph.offsets);
    prev_width = config.widths[h];
  }
  return features;
}

}  // namespace agar
