#include "agar/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace agar {

namespace {

const Matrix& metric_rows(const PointSet& set, Metric metric,
                          const char* side) {
  if (metric == Metric::coordinates) return set.coords;
  if (!set.has_features())
    throw DimensionError(std::string("knn: feature metric requested but the ") +
                         side + " set has no features");
  return set.features;
}

}  // namespace

Matrix pairwise_sq_dists(const Eigen::Ref<const Matrix>& qm,
                         const Eigen::Ref<const Matrix>& rm) {
  Matrix d2(qm.rows(), rm.rows());
  d2.noalias() = qm * rm.transpose();
  d2 *= -2.0;
  d2.colwise() += qm.rowwise().squaredNorm();
  d2.rowwise() += rm.rowwise().squaredNorm().transpose();
  d2 = d2.cwiseMax(0.0);
  return d2;
}

TopKSelector::TopKSelector(int k) : k_(k), bestd_(std::size_t(std::max(k, 1))) {
  if (k < 1) throw CountError("TopKSelector: k must be at least 1");
}

int TopKSelector::select(const double* row, Index n, Index skip, Index* idx) {
  // Running top-k by insertion: the ascending j scan plus insertion on
  // strict > keeps ties on the lower index.
  int filled = 0;
  for (Index j = 0; j < n; ++j) {
    if (j == skip) continue;
    const double d = row[j];
    if (filled == k_ && d >= bestd_[std::size_t(k_ - 1)]) continue;
    int p = filled < k_ ? filled : k_ - 1;
    while (p > 0 && bestd_[std::size_t(p - 1)] > d) {
      bestd_[std::size_t(p)] = bestd_[std::size_t(p - 1)];
      idx[p] = idx[p - 1];
      --p;
    }
    bestd_[std::size_t(p)] = d;
    idx[p] = j;
    if (filled < k_) ++filled;
  }
  return filled;
}

EdgeSet knn(const PointSet& query, const PointSet& reference, int k,
            Metric metric, bool include_self, bool with_feature_deltas) {
  if (reference.size() == 0)
    throw EmptyReferenceError("knn: empty reference set");
  if (k < 1) throw CountError("knn: k must be at least 1");
  const Matrix& qm = metric_rows(query, metric, "query");
  const Matrix& rm = metric_rows(reference, metric, "reference");
  if (metric == Metric::features && qm.cols() != rm.cols())
    throw DimensionError("knn: feature widths differ between sets");

  const bool same_set = query.coords.data() == reference.coords.data();
  const bool carry_features =
      with_feature_deltas && query.has_features() &&
      reference.has_features() &&
      query.features.cols() == reference.features.cols();

  const Index nq = query.size();
  const Index nr = reference.size();

  EdgeSet out;
  out.offsets.assign(std::size_t(nq) + 1, 0);

  const Matrix dists = pairwise_sq_dists(qm, rm);
  std::vector<Index> chosen(std::size_t(nq) * std::size_t(k));
  std::vector<int> counts(std::size_t(nq));
  TopKSelector selector(k);
  Index total = 0;
  for (Index i = 0; i < nq; ++i) {
    const int filled =
        selector.select(dists.data() + i * nr, nr,
                        same_set && !include_self ? i : Index(-1),
                        chosen.data() + std::size_t(i) * std::size_t(k));
    if (filled == 0)
      throw EmptyReferenceError("knn: no candidates for query point " +
                                std::to_string(i));
    counts[std::size_t(i)] = filled;
    total += filled;
    out.offsets[std::size_t(i) + 1] = total;
  }

  out.edges.reserve(std::size_t(total));
  out.dp.resize(total, 3);
  if (carry_features) out.ds.resize(total, query.features.cols());
  out.dt = Matrix::Zero(total, 1);
  Index e = 0;
  for (Index i = 0; i < nq; ++i) {
    const Index* row = chosen.data() + std::size_t(i) * std::size_t(k);
    for (int c = 0; c < counts[std::size_t(i)]; ++c) {
      const Index j = row[c];
      out.edges.push_back({i, j, 0});
      out.dp.row(e) = reference.coords.row(j) - query.coords.row(i);
      if (carry_features)
        out.ds.row(e) = reference.features.row(j) - query.features.row(i);
      ++e;
    }
  }
  return out;
}

std::vector<Index> farthest_point_sample(const Matrix& coords, Index m) {
  const Index n = coords.rows();
  if (n == 0) throw EmptyReferenceError("farthest_point_sample: empty set");
  if (m < 1 || m > n)
    throw CountError("farthest_point_sample: requested " + std::to_string(m) +
                     " of " + std::to_string(n) + " points");
  std::vector<Index> picked;
  picked.reserve(std::size_t(m));
  picked.push_back(0);
  std::vector<double> min_d2(std::size_t(n),
                             std::numeric_limits<double>::infinity());
  for (Index step = 1; step < m; ++step) {
    const Index last = picked.back();
    Index best = -1;
    double best_d2 = -1.0;
    for (Index i = 0; i < n; ++i) {
      const double d2 = (coords.row(i) - coords.row(last)).squaredNorm();
      if (d2 < min_d2[std::size_t(i)]) min_d2[std::size_t(i)] = d2;
      // Strict > keeps the lower index on ties.
      if (min_d2[std::size_t(i)] > best_d2) {
        best_d2 = min_d2[std::size_t(i)];
        best = i;
      }
    }
    picked.push_back(best);
    min_d2[std::size_t(best)] = 0.0;
  }
  return picked;
}

RowMixPlan interpolation_plan(const Matrix& target_coords,
                              const Matrix& source_coords) {
  const Index ns = source_coords.rows();
  if (ns == 0)
    throw EmptyReferenceError("interpolation_plan: empty source set");
  constexpr double kExactHit = 1e-10;  // distance below which a row is copied

  RowMixPlan plan;
  plan.source_rows = ns;
  plan.rows.resize(std::size_t(target_coords.rows()));
  const Matrix dists = pairwise_sq_dists(target_coords, source_coords);
  std::vector<std::pair<double, Index>> ranked(static_cast<std::size_t>(ns));
  for (Index t = 0; t < target_coords.rows(); ++t) {
    for (Index j = 0; j < ns; ++j)
      ranked[std::size_t(j)] = {dists(t, j), j};
    const std::size_t keep = std::min<std::size_t>(ranked.size(), 3);
    std::partial_sort(ranked.begin(), ranked.begin() + std::ptrdiff_t(keep),
                      ranked.end());
    auto& terms = plan.rows[std::size_t(t)];
    terms.reserve(keep);
    if (std::sqrt(ranked[0].first) <= kExactHit) {
      terms.push_back({ranked[0].second, 1.0});
      continue;
    }
    double total = 0.0;
    for (std::size_t c = 0; c < keep; ++c) total += 1.0 / ranked[c].first;
    for (std::size_t c = 0; c < keep; ++c)
      terms.push_back({ranked[c].second, (1.0 / ranked[c].first) / total});
  }
  return plan;
}

Matrix interpolate(const Matrix& target_coords, const Matrix& source_coords,
                   const Matrix& source_features) {
  if (source_coords.rows() != source_features.rows())
    throw DimensionError("interpolate: source coords and features disagree");
  return apply_row_mix(interpolation_plan(target_coords, source_coords),
                       source_features);
}

namespace {

void check_segments(const std::vector<Index>& segments, const char* who) {
  if (segments.size() < 2 || segments.front() != 0)
    throw DimensionError(std::string(who) +
                         ": segments must start at 0 and bound each cloud");
  for (std::size_t s = 1; s < segments.size(); ++s)
    if (segments[s] < segments[s - 1])
      throw DimensionError(std::string(who) + ": segments must be ascending");
}

}  // namespace

EdgeSet splice_edge_sets(const std::vector<EdgeSet>& parts,
                         const std::vector<Index>& target_segments,
                         const std::vector<Index>& source_segments,
                         const std::vector<Index>& past_segments) {
  check_segments(target_segments, "splice_edge_sets");
  check_segments(source_segments, "splice_edge_sets");
  check_segments(past_segments, "splice_edge_sets");
  if (parts.size() + 1 != target_segments.size() ||
      parts.size() + 1 != source_segments.size() ||
      parts.size() + 1 != past_segments.size())
    throw DimensionError("splice_edge_sets: one edge set per segment");

  Index total_edges = 0, ds_cols = 0;
  bool carry_ds = !parts.empty();
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const EdgeSet& part = parts[s];
    if (part.target_count() !=
        target_segments[s + 1] - target_segments[s])
      throw DimensionError("splice_edge_sets: part " + std::to_string(s) +
                           " does not cover its target segment");
    total_edges += part.edge_count();
    if (part.ds.size() == 0 || (ds_cols > 0 && part.ds.cols() != ds_cols))
      carry_ds = false;
    else
      ds_cols = part.ds.cols();
  }

  EdgeSet out;
  out.edges.reserve(std::size_t(total_edges));
  out.offsets.assign(std::size_t(target_segments.back()) + 1, 0);
  out.dp.resize(total_edges, 3);
  out.dt.resize(total_edges, 1);
  if (carry_ds) out.ds.resize(total_edges, ds_cols);
  Index at = 0;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const EdgeSet& part = parts[s];
    const Index tgt0 = target_segments[s];
    const Index src0 = source_segments[s];
    const Index pst0 = past_segments[s];
    for (Index i = 0; i < part.target_count(); ++i) {
      for (Index e = part.offsets[std::size_t(i)];
           e < part.offsets[std::size_t(i) + 1]; ++e) {
        EdgeSet::Edge edge = part.edges[std::size_t(e)];
        edge.target += tgt0;
        edge.source += edge.past ? pst0 : src0;
        out.edges.push_back(edge);
        out.dp.row(at) = part.dp.row(e);
        out.dt(at, 0) = part.dt(e, 0);
        if (carry_ds) out.ds.row(at) = part.ds.row(e);
        ++at;
      }
      out.offsets[std::size_t(tgt0 + i) + 1] = at;
    }
  }
  return out;
}

RowMixPlan splice_row_mix_plans(const std::vector<RowMixPlan>& parts,
                                const std::vector<Index>& source_segments) {
  check_segments(source_segments, "splice_row_mix_plans");
  if (parts.size() + 1 != source_segments.size())
    throw DimensionError("splice_row_mix_plans: one plan per segment");
  RowMixPlan out;
  out.source_rows = source_segments.back();
  std::size_t total_rows = 0;
  for (const RowMixPlan& part : parts) total_rows += part.rows.size();
  out.rows.reserve(total_rows);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const RowMixPlan& part = parts[s];
    if (part.source_rows != source_segments[s + 1] - source_segments[s])
      throw DimensionError("splice_row_mix_plans: part " + std::to_string(s) +
                           " does not cover its source segment");
    for (const auto& terms : part.rows) {
      std::vector<RowMixPlan::Term> shifted = terms;
      for (RowMixPlan::Term& term : shifted)
        term.source += source_segments[s];
      out.rows.push_back(std::move(shifted));
    }
  }
  return out;
}

}  // namespace agar
