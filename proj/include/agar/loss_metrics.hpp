#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "agar/tensor.hpp"
#include "agar/types.hpp"

namespace agar {

/**
 * Symmetric squared-distance coverage between two clouds: the mean squared
 * nearest-neighbor distance from p to q plus the same from q to p. Keeps the
 * per-point squared distances and nearest indices for tail metrics and for
 * the differentiable wrapper.
 */
struct ChamferBreakdown {
  double value = 0.0;
  std::vector<double> forward_sq;   // |p| entries: min_j |p_i - q_j|^2
  std::vector<double> backward_sq;  // |q| entries
  std::vector<Index> forward_nn;
  std::vector<Index> backward_nn;
};

ChamferBreakdown chamfer(const Matrix& p, const Matrix& q);

// Mean of the largest ceil(fraction * (|p|+|q|)) pooled directional squared
// distances; the tail statistic that exposes worst-covered points.
double chamfer_tail(const ChamferBreakdown& breakdown, double fraction = 0.05);

// Exact minimum-cost assignment of a square cost matrix (O(n^3) shortest
// augmenting paths with potentials). assign[row] = chosen column.
struct AssignmentResult {
  double cost = 0.0;
  std::vector<Index> assign;
};
AssignmentResult min_cost_assignment(const Matrix& cost);

/**
 * Exact earth mover's distance under squared euclidean ground cost: the
 * minimum over bijections of the summed squared distances. Requires equal
 * cardinality (else CardinalityError) and at most 512 points (else
 * ScaleError).
 */
struct EmdBreakdown {
  double value = 0.0;
  std::vector<Index> assignment;  // p row -> q row
};
EmdBreakdown emd(const Matrix& p, const Matrix& q);

struct MetricReport {
  double cd = 0.0;
  double emd = 0.0;
  double cd_tail = 0.0;  // worst-5% coverage statistic
};
MetricReport evaluate_pair(const Matrix& p, const Matrix& q);

// Differentiable wrappers: gradients flow to `pred` through the assignment
// fixed in the forward pass.
Var chamfer_loss(Var pred, const Matrix& target);
Var emd_loss(Var pred, const Matrix& target);
Var combined_loss(Var pred, const Matrix& target);  // chamfer + emd

// CSV export: "sequence,frame,cd,emd,cd_tail" with one header line.
struct MetricRow {
  std::string sequence;
  int frame = 0;
  MetricReport metrics;
};
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricRow>& rows);

}  // namespace agar
