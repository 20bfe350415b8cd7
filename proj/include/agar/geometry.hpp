#pragma once

#include <vector>

#include "agar/tensor.hpp"
#include "agar/types.hpp"

namespace agar {

// Point cloud with optional per-point feature rows aligned to coords.
struct PointSet {
  Matrix coords;    // N x 3
  Matrix features;  // N x d, 0x0 when absent
  Index size() const { return coords.rows(); }
  bool has_features() const { return features.size() > 0; }
};

enum class Metric { coordinates, features };

/**
 * All pairwise squared distances: entry (i, j) holds |q_i - r_j|^2, computed
 * as |q_i|^2 - 2 q_i.r_j + |r_j|^2 so the cross terms come from one matrix
 * product. Entries are clamped at zero (cancellation can otherwise leave a
 * coincident pair epsilon-negative); inputs whose entries and products are
 * exactly representable give exact distances. Row blocks of a larger matrix
 * bind without copying.
 */
Matrix pairwise_sq_dists(const Eigen::Ref<const Matrix>& queries,
                         const Eigen::Ref<const Matrix>& references);

/**
 * Reusable nearest-k selection over one row of precomputed squared
 * distances: ascending (distance, index) with ties toward the lower index.
 * The internal buffer is reused across calls, so one selector serves a whole
 * scan; every neighbor-ranking routine routes through this so tie handling
 * cannot drift apart.
 */
class TopKSelector {
 public:
  explicit TopKSelector(int k);
  // Fills idx[0..count) from row[0..n), skipping candidate `skip` (-1 keeps
  // every candidate); returns count = min(k, candidates).
  int select(const double* row, Index n, Index skip, Index* idx);

 private:
  int k_;
  std::vector<double> bestd_;
};

/**
 * Directed neighbor edges grouped by target: the edges of target i occupy
 * [offsets[i], offsets[i+1]), present-frame edges before past-frame edges,
 * each run ordered by ascending (distance, source index). Deltas are cached
 * per edge as source minus target; feature deltas only on request.
 */
struct EdgeSet {
  struct Edge {
    Index target;
    Index source;
    int past;  // 0: same frame, 1: previous frame
  };
  std::vector<Edge> edges;
  std::vector<Index> offsets;  // size = target count + 1
  Matrix dp;                   // E x 3 coordinate delta
  Matrix ds;                   // E x d feature delta, 0x0 when unavailable
  Matrix dt;                   // E x 1 frame offset (0 or 1)
  Index edge_count() const { return Index(edges.size()); }
  Index target_count() const { return Index(offsets.size()) - 1; }
};

/**
 * Brute-force k nearest neighbors of every query point among the reference
 * points, ranked by squared distance with ties broken toward the lower
 * reference index. k is clamped to the number of available candidates.
 * include_self only matters when query and reference are the same point set
 * (same coords storage): when false, each point's own index is excluded.
 * Per-edge feature deltas (ds) are filled only when with_feature_deltas is
 * set and both sets carry features of equal width.
 */
EdgeSet knn(const PointSet& query, const PointSet& reference, int k,
            Metric metric, bool include_self, bool with_feature_deltas = false);

/**
 * Greedy farthest-point subsample: starts at index 0, then repeatedly takes
 * the point maximizing the distance to the chosen set (ties toward the lower
 * index). Returns the m chosen indices in selection order.
 */
std::vector<Index> farthest_point_sample(const Matrix& coords, Index m);

/**
 * Inverse-squared-distance interpolation weights from each target onto its
 * 3 nearest sources (all sources when fewer than 3). A source within 1e-10
 * of the target takes the whole weight, copying its row verbatim. Weights
 * are non-negative and sum to one per target.
 */
RowMixPlan interpolation_plan(const Matrix& target_coords,
                              const Matrix& source_coords);

// Value-level convenience: interpolate source features onto target points.
Matrix interpolate(const Matrix& target_coords, const Matrix& source_coords,
                   const Matrix& source_features);

/**
 * Segment bookkeeping for stacked point clouds: several independent clouds
 * share one row-stacked matrix, cloud s occupying rows
 * [segments[s], segments[s+1]). Graphs and interpolation plans are built per
 * cloud and spliced into the stacked row space, so no edge or weight ever
 * crosses a segment boundary.
 */

// Splices per-segment edge sets (parts[s] built on segment s's local rows)
// into one edge set over the stacked rows. Targets are shifted by
// target_segments; sources by source_segments or past_segments according to
// each edge's frame side.
EdgeSet splice_edge_sets(const std::vector<EdgeSet>& parts,
                         const std::vector<Index>& target_segments,
                         const std::vector<Index>& source_segments,
                         const std::vector<Index>& past_segments);

// Splices per-segment row-mix plans: target rows are concatenated in segment
// order, term sources shifted by source_segments.
RowMixPlan splice_row_mix_plans(const std::vector<RowMixPlan>& parts,
                                const std::vector<Index>& source_segments);

}  // namespace agar
