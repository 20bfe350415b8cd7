#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "agar/types.hpp"

namespace agar {

enum class Activation { identity, relu, sigmoid };

Activation parse_activation(const std::string& name);
const char* to_string(Activation kind);

// ---------------------------------------------------------------------------
// Parameters

// One named trainable matrix with its gradient and Adam moment buffers.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix moment1;
  Matrix moment2;
};

/**
 * Ordered collection of named parameters. A weight group "<g>" registers two
 * entries: "<g>.W" (in x out, uniform init over +/- sqrt(6/(in+out))) and
 * "<g>.b" (1 x out, zeros). Initialization draws from a generator seeded at
 * construction, so a store built in a fixed registration order is
 * reproducible from its seed alone.
 */
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed);

  Parameter& add_matrix(const std::string& name, Index rows, Index cols,
                        bool uniform_init);
  void add_group(const std::string& group, Index in, Index out);

  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  const std::vector<Parameter*>& ordered() const { return order_; }
  void zero_grads();
  std::uint64_t seed() const { return seed_; }
  std::int64_t steps() const { return steps_; }

 private:
  friend struct AdamConfig;
  friend void optimizer_step(ParameterStore&, const struct AdamConfig&);

  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::int64_t steps_ = 0;
  std::deque<Parameter> params_;  // deque keeps addresses stable
  std::vector<Parameter*> order_;
  std::map<std::string, Parameter*> by_name_;
};

// Adam update with per-element gradient clamping applied before the moment
// update. Throws NumericError (and leaves the store untouched) if any
// gradient entry is non-finite.
struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip = 5.0;  // gradients clamped to [-clip, +clip]
};

void optimizer_step(ParameterStore& store, const AdamConfig& config);

// Binary parameter container: magic "AGARCKPT", a version byte, then one
// record per parameter (name, shape, row-major little-endian 64-bit floats).
// Round trips are bit-exact.
void save_checkpoint(const ParameterStore& store,
                     const std::filesystem::path& path);
void load_checkpoint(ParameterStore& store, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Reverse-mode tape

class Tape;

// Cheap handle to a tape node.
class Var {
 public:
  Var() = default;
  bool defined() const { return tape_ != nullptr; }
  Tape* owner() const { return tape_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Sparse plan combining source rows into output rows; output row t is the
// weighted sum of its term rows. Used for interpolation between point sets.
struct RowMixPlan {
  struct Term {
    Index source;
    double weight;
  };
  std::vector<std::vector<Term>> rows;
  Index source_rows = 0;
};

Matrix apply_row_mix(const RowMixPlan& plan, const Matrix& source);

/**
 * Reverse-mode differentiation tape over dense matrices. Operations append
 * nodes holding the forward value and a pull-back closure; backward() seeds
 * the output gradient with 1 and walks nodes in reverse creation order,
 * accumulating into parameter gradient buffers at the leaves. Replay is
 * deterministic: the same inputs produce bit-identical values and gradients.
 */
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);            // no gradient tracking
  Var leaf(Matrix value);                // gradient-tracked input
  Var use(Parameter& param);             // parameter leaf (cached per tape)

  const Matrix& value(Var v) const;
  // Gradient of the last backward() output with respect to node v; an empty
  // matrix means the node was never reached.
  const Matrix& grad(Var v) const;

  // Runs reverse accumulation from a 1x1 output node.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }

  // Extension point for operations with bespoke pull-backs (losses etc.).
  using PullBack = std::function<void(Tape&, const Matrix& out_grad)>;
  Var custom(Matrix value, const std::vector<Var>& inputs, PullBack pull);

  bool requires_grad(Var v) const;
  void accumulate(Var v, Matrix contribution);  // by value: moved in when fresh
  // Adds into rows [row0, row0 + contribution.rows()) of v's gradient only,
  // zero-filling the buffer on first touch; avoids materializing a full-size
  // contribution when an op feeds a single row block.
  void accumulate_block(Var v, Index row0, const Matrix& contribution);

 private:
  friend class Var;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    PullBack pull;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var emit(Matrix value, bool requires_grad, PullBack pull);

  std::deque<Node> nodes_;
  std::map<const Parameter*, Var> param_cache_;
};

// ---------------------------------------------------------------------------
// Operations

// y = x * W + b with b (1 x out) broadcast over rows.
Var affine(Var x, Var w, Var b);
Var matmul(Var a, Var b);
// y = x * W.middleRows(row0, rows); gradients reach only that row block.
// Lets one weight group serve a concatenated input without materializing the
// concatenation per edge.
Var matmul_rows(Var x, Var w, Index row0, Index rows);
Var add(Var a, Var b);
Var add_n(const std::vector<Var>& terms);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var add_rowvec(Var x, Var row);  // row: 1 x d broadcast over rows of x
Var activate(Var x, Activation kind);
Var relu(Var x);
Var sigmoid(Var x);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var x, const std::vector<Index>& rows);
// Contiguous row block [row0, row0 + rows) of x.
Var slice_rows(Var x, Index row0, Index rows);
// Row r of the result copies rows from a (selector 0) or b (selector 1).
Var gather_rows2(Var a, Var b,
                 const std::vector<std::pair<int, Index>>& plan);
// Per-column max over all rows -> 1 x d. Gradient flows to the first row
// attaining each column maximum.
Var max_pool_rows(Var x);
// Per-column max within each row segment [offsets[s], offsets[s+1]).
Var segment_max_rows(Var x, const std::vector<Index>& offsets);
/**
 * Fused edge-message construction and per-target max. Edge e (one of segment
 * i's rows [offsets[i], offsets[i+1])) carries the implicit message
 *   m_e = edge_data.row(e) * w[w_row0 : w_row0+p, :]
 *       [+ target_term.row(edge_target[e])]
 *       [+ source.row(edge_source[e].second)]
 *       [+ delta_source.row(src) - delta_present.row(tgt)]
 * where p = edge_data.cols() and source/delta_source read the *_present
 * input when edge_source[e].first is 0 and the *_past input when it is 1.
 * Result row i is the column-wise max of i's messages (ties keep the
 * earliest edge) plus the shared bias row (added after the max, where it
 * cannot change the winner). edge_data holds raw per-edge values (no
 * gradient); its projection through the w row block happens inside the op,
 * so the backward pass scatters straight into w's block instead of
 * materializing an edge-sized gradient. Bracketed contributions are skipped
 * when their Var is left default-constructed; source_past may be omitted
 * when no edge has side 1. Equivalent to gathers + matmul_rows + add_n +
 * segment_max_rows + add_rowvec without edge-sized intermediates.
 */
Var edge_message_max(Var target_term, Var source_present, Var source_past,
                     Var delta_present, Var delta_past, Matrix edge_data,
                     Var w, Index w_row0, Var bias,
                     const std::vector<Index>& edge_target,
                     const std::vector<std::pair<int, Index>>& edge_source,
                     const std::vector<Index>& offsets);
// y.row(i) = x.row(i) * s(i, 0); broadcasts a per-row scalar across columns.
Var row_scale(Var x, Var s);
Var mix_rows(Var source, const RowMixPlan& plan);
Var sum_all(Var x);  // 1x1 sum of all entries

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckOptions {
  double step = 1e-5;          // central-difference step
  int samples_per_matrix = 64;  // coordinates checked per parameter matrix
  std::uint64_t seed = 7;
  // Test hook: mutates gradient buffers between reverse pass and comparison.
  std::function<void(ParameterStore&)> corrupt;
};

struct GradCheckEntry {
  std::string parameter;
  Index index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  int checked = 0;
  bool pass(double tolerance) const { return max_rel_error <= tolerance; }
};

// Builds the scalar (1x1) output whose gradient is being verified. Must be a
// deterministic function of the store contents.
using ScalarFn = std::function<Var(Tape&)>;

/**
 * Compares reverse-mode gradients against central finite differences
 * ((f(w+h) - f(w-h)) / 2h) on a seeded sample of coordinates from every
 * registered parameter. Relative error uses max(1, |analytic|, |numeric|)
 * as the denominator. Throws NumericError if the loss is non-finite.
 */
GradCheckReport grad_check(const ScalarFn& f, ParameterStore& store,
                           const GradCheckOptions& options = {});

}  // namespace agar
