#include "agar/loss_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "agar/geometry.hpp"

namespace agar {

namespace {

void check_cloud(const Matrix& m, const char* name) {
  if (m.rows() == 0)
    throw CardinalityError(std::string(name) + ": empty point cloud");
  if (m.cols() != 3)
    throw DimensionError(std::string(name) + ": expected Nx3 coordinates");
}

// Nearest neighbor per row of a pairwise squared-distance matrix; ties keep
// the lower index.
void nearest_per_row(const Matrix& dists, std::vector<double>& d2,
                     std::vector<Index>& nn) {
  d2.assign(std::size_t(dists.rows()), 0.0);
  nn.assign(std::size_t(dists.rows()), 0);
  for (Index i = 0; i < dists.rows(); ++i) {
    Index best_j = 0;
    d2[std::size_t(i)] = dists.row(i).minCoeff(&best_j);
    nn[std::size_t(i)] = best_j;
  }
}

}  // namespace

ChamferBreakdown chamfer(const Matrix& p, const Matrix& q) {
  check_cloud(p, "chamfer");
  check_cloud(q, "chamfer");
  ChamferBreakdown out;
  const Matrix dists = pairwise_sq_dists(p, q);
  nearest_per_row(dists, out.forward_sq, out.forward_nn);
  nearest_per_row(dists.transpose(), out.backward_sq, out.backward_nn);
  double fwd = 0.0, bwd = 0.0;
  for (double d : out.forward_sq) fwd += d;
  for (double d : out.backward_sq) bwd += d;
  out.value = fwd / double(p.rows()) + bwd / double(q.rows());
  return out;
}

double chamfer_tail(const ChamferBreakdown& breakdown, double fraction) {
  std::vector<double> pooled;
  pooled.reserve(breakdown.forward_sq.size() + breakdown.backward_sq.size());
  pooled.insert(pooled.end(), breakdown.forward_sq.begin(),
                breakdown.forward_sq.end());
  pooled.insert(pooled.end(), breakdown.backward_sq.begin(),
                breakdown.backward_sq.end());
  const std::size_t keep = std::size_t(
      std::ceil(fraction * double(pooled.size())));
  const std::size_t count = std::max<std::size_t>(1, keep);
  std::partial_sort(pooled.begin(), pooled.begin() + std::ptrdiff_t(count),
                    pooled.end(), std::greater<double>());
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) total += pooled[i];
  return total / double(count);
}

AssignmentResult min_cost_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols())
    throw DimensionError("min_cost_assignment: cost matrix must be square");
  const Index n = cost.rows();
  if (n == 0) throw CardinalityError("min_cost_assignment: empty cost matrix");
  if (n == 1) {
    AssignmentResult out;
    out.assign = {0};
    out.cost = cost(0, 0);
    return out;
  }

  // Column reduction and reduction transfer settle many rows outright
  // (near-aligned clouds give almost-diagonal costs, so the prepass does
  // much of the work); the remaining free rows are matched by shortest
  // augmenting paths over column potentials. Comparisons are exact, so the
  // result is the true optimum; which of several equal-cost assignments
  // comes back is an implementation detail.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t un = std::size_t(n);
  std::vector<Index> rowsol(un, -1), colsol(un, -1);
  std::vector<double> v(un);
  std::vector<Index> matches(un, 0), free_rows(un);

  // Column reduction, scanning columns backwards.
  for (Index j = n - 1; j >= 0; --j) {
    double min = cost(0, j);
    Index imin = 0;
    for (Index i = 1; i < n; ++i)
      if (cost(i, j) < min) {
        min = cost(i, j);
        imin = i;
      }
    v[std::size_t(j)] = min;
    if (++matches[std::size_t(imin)] == 1) {
      rowsol[std::size_t(imin)] = j;
      colsol[std::size_t(j)] = imin;
    }
  }

  // Reduction transfer from single-match rows.
  Index numfree = 0;
  for (Index i = 0; i < n; ++i) {
    if (matches[std::size_t(i)] == 0) {
      free_rows[std::size_t(numfree++)] = i;
    } else if (matches[std::size_t(i)] == 1) {
      const Index j1 = rowsol[std::size_t(i)];
      double min = kInf;
      for (Index j = 0; j < n; ++j)
        if (j != j1 && cost(i, j) - v[std::size_t(j)] < min)
          min = cost(i, j) - v[std::size_t(j)];
      v[std::size_t(j1)] -= min;
    }
  }

  // Shortest augmenting path for each still-free row. collist is split into
  // ready [0, low), to-scan-at-min [low, up), and untouched [up, n).
  std::vector<double> d(un);
  std::vector<Index> pred(un), collist(un);
  for (Index f = 0; f < numfree; ++f) {
    const Index freerow = free_rows[std::size_t(f)];
    for (Index j = 0; j < n; ++j) {
      d[std::size_t(j)] = cost(freerow, j) - v[std::size_t(j)];
      pred[std::size_t(j)] = freerow;
      collist[std::size_t(j)] = j;
    }
    Index low = 0, up = 0, last = 0, endofpath = -1;
    double min = 0.0;
    bool found = false;
    do {
      if (up == low) {
        last = low - 1;
        min = d[std::size_t(collist[std::size_t(up)])];
        ++up;
        for (Index k = up; k < n; ++k) {
          const Index j = collist[std::size_t(k)];
          const double h = d[std::size_t(j)];
          if (h <= min) {
            if (h < min) {
              up = low;
              min = h;
            }
            collist[std::size_t(k)] = collist[std::size_t(up)];
            collist[std::size_t(up++)] = j;
          }
        }
        for (Index k = low; k < up; ++k)
          if (colsol[std::size_t(collist[std::size_t(k)])] < 0) {
            endofpath = collist[std::size_t(k)];
            found = true;
            break;
          }
      }
      if (!found) {
        const Index j1 = collist[std::size_t(low++)];
        const Index i = colsol[std::size_t(j1)];
        const double h = cost(i, j1) - v[std::size_t(j1)] - min;
        for (Index k = up; k < n; ++k) {
          const Index j = collist[std::size_t(k)];
          const double v2 = cost(i, j) - v[std::size_t(j)] - h;
          if (v2 < d[std::size_t(j)]) {
            pred[std::size_t(j)] = i;
            if (v2 == min) {
              if (colsol[std::size_t(j)] < 0) {
                endofpath = j;
                found = true;
                break;
              }
              collist[std::size_t(k)] = collist[std::size_t(up)];
              collist[std::size_t(up++)] = j;
            }
            d[std::size_t(j)] = v2;
          }
        }
      }
    } while (!found);
    for (Index k = 0; k <= last; ++k) {
      const Index j1 = collist[std::size_t(k)];
      v[std::size_t(j1)] += d[std::size_t(j1)] - min;
    }
    Index jp = endofpath;
    for (;;) {
      const Index i = pred[std::size_t(jp)];
      colsol[std::size_t(jp)] = i;
      std::swap(rowsol[std::size_t(i)], jp);
      if (i == freerow) break;
    }
  }

  AssignmentResult out;
  out.assign = std::move(rowsol);
  for (Index i = 0; i < n; ++i) out.cost += cost(i, out.assign[std::size_t(i)]);
  return out;
}

EmdBreakdown emd(const Matrix& p, const Matrix& q) {
  check_cloud(p, "emd");
  check_cloud(q, "emd");
  if (p.rows() != q.rows())
    throw CardinalityError("emd: clouds hold " + std::to_string(p.rows()) +
                           " and " + std::to_string(q.rows()) +
                           " points; a bijection needs equal counts");
  if (p.rows() > 512)
    throw ScaleError("emd: exact solver bounded at 512 points, got " +
                     std::to_string(p.rows()));
  AssignmentResult best = min_cost_assignment(pairwise_sq_dists(p, q));
  EmdBreakdown out;
  out.value = best.cost;
  out.assignment = std::move(best.assign);
  return out;
}

MetricReport evaluate_pair(const Matrix& p, const Matrix& q) {
  const ChamferBreakdown cd = chamfer(p, q);
  MetricReport report;
  report.cd = cd.value;
  report.cd_tail = chamfer_tail(cd);
  report.emd = emd(p, q).value;
  return report;
}

Var chamfer_loss(Var pred, const Matrix& target) {
  Tape* tape = pred.owner();
  const Matrix pv = pred.value();
  const ChamferBreakdown breakdown = chamfer(pv, target);
  Matrix value(1, 1);
  value(0, 0) = breakdown.value;
  const double np = double(pv.rows());
  const double nq = double(target.rows());
  return tape->custom(
      std::move(value), {pred},
      [pred, target, breakdown, np, nq](Tape& tp, const Matrix& g) {
        const double outer = g(0, 0);
        const Matrix& pv = pred.value();
        Matrix gp = Matrix::Zero(pv.rows(), pv.cols());
        for (Index i = 0; i < pv.rows(); ++i) {
          const Index j = breakdown.forward_nn[std::size_t(i)];
          gp.row(i) += (outer * 2.0 / np) * (pv.row(i) - target.row(j));
        }
        for (Index j = 0; j < target.rows(); ++j) {
          const Index i = breakdown.backward_nn[std::size_t(j)];
          gp.row(i) += (outer * 2.0 / nq) * (pv.row(i) - target.row(j));
        }
        tp.accumulate(pred, std::move(gp));
      });
}

Var emd_loss(Var pred, const Matrix& target) {
  Tape* tape = pred.owner();
  const Matrix pv = pred.value();
  const EmdBreakdown breakdown = emd(pv, target);
  Matrix value(1, 1);
  value(0, 0) = breakdown.value;
  return tape->custom(std::move(value), {pred},
                      [pred, target, breakdown](Tape& tp, const Matrix& g) {
                        const double outer = g(0, 0);
                        const Matrix& pv = pred.value();
                        Matrix gp(pv.rows(), pv.cols());
                        for (Index i = 0; i < pv.rows(); ++i) {
                          const Index j = breakdown.assignment[std::size_t(i)];
                          gp.row(i) = (outer * 2.0) * (pv.row(i) - target.row(j));
                        }
                        tp.accumulate(pred, std::move(gp));
                      });
}

Var combined_loss(Var pred, const Matrix& target) {
  return add(chamfer_loss(pred, target), emd_loss(pred, target));
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write metrics file '" + path.string() + "'");
  os << "sequence,frame,cd,emd,cd_tail\n";
  os.precision(17);
  for (const MetricRow& row : rows)
    os << row.sequence << ',' << row.frame << ',' << row.metrics.cd << ','
       << row.metrics.emd << ',' << row.metrics.cd_tail << '\n';
}

}  // namespace agar
