#include "agar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace agar {

namespace {

// Reverse-mode graphs allocate and free many ~100KB-1MB matrices per step.
// glibc serves those from fresh mmap regions by default, which turns the
// training loop into a page-fault benchmark; raising the thresholds keeps
// the buffers on the reusable heap.
struct AllocatorTuning {
  AllocatorTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
#endif
  }
};
const AllocatorTuning allocator_tuning;

}  // namespace

namespace {

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

}  // namespace

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + name + "'");
}

const char* to_string(Activation kind) {
  switch (kind) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ParameterStore

ParameterStore::ParameterStore(std::uint64_t seed) : seed_(seed), rng_(seed) {}

Parameter& ParameterStore::add_matrix(const std::string& name, Index rows,
                                      Index cols, bool uniform_init) {
  if (by_name_.count(name) > 0)
    throw ConfigError("parameter '" + name + "' registered twice");
  if (rows < 1 || cols < 1)
    throw DimensionError("parameter '" + name + "' must have positive shape");
  params_.emplace_back();
  Parameter& p = params_.back();
  p.name = name;
  p.value = Matrix::Zero(rows, cols);
  if (uniform_init) {
    const double bound = std::sqrt(6.0 / double(rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) p.value(r, c) = dist(rng_);
  }
  p.grad = Matrix::Zero(rows, cols);
  p.moment1 = Matrix::Zero(rows, cols);
  p.moment2 = Matrix::Zero(rows, cols);
  order_.push_back(&p);
  by_name_[name] = &p;
  return p;
}

void ParameterStore::add_group(const std::string& group, Index in, Index out) {
  add_matrix(group + ".W", in, out, /*uniform_init=*/true);
  add_matrix(group + ".b", 1, out, /*uniform_init=*/false);
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end())
    throw ConfigError("unknown parameter '" + name + "'");
  return *it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end())
    throw ConfigError("unknown parameter '" + name + "'");
  return *it->second;
}

void ParameterStore::zero_grads() {
  for (Parameter* p : order_) p->grad.setZero();
}

void optimizer_step(ParameterStore& store, const AdamConfig& config) {
  for (const Parameter* p : store.order_) {
    if (!all_finite(p->grad))
      throw NumericError("non-finite gradient in '" + p->name +
                         "'; step aborted");
  }
  store.steps_ += 1;
  const double t = double(store.steps_);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (Parameter* p : store.order_) {
    Matrix g = p->grad.cwiseMax(-config.clip).cwiseMin(config.clip);
    p->moment1 = config.beta1 * p->moment1 + (1.0 - config.beta1) * g;
    p->moment2 =
        config.beta2 * p->moment2 + (1.0 - config.beta2) * g.cwiseProduct(g);
    const Matrix m_hat = p->moment1 / correction1;
    const Matrix v_hat = p->moment2 / correction2;
    p->value.array() -= config.learning_rate * m_hat.array() /
                        (v_hat.array().sqrt() + config.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'G', 'A', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(buf), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char buf[4];
  if (!is.read(reinterpret_cast<char*>(buf), 4))
    throw CheckpointError("truncated checkpoint '" + path + "'");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[i]) << (8 * i);
  return v;
}

void write_f64_le(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = (bits >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(buf), 8);
}

double read_f64_le(std::istream& is, const std::string& path) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8))
    throw CheckpointError("truncated checkpoint '" + path + "'");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(buf[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_checkpoint(const ParameterStore& store,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, 8);
  os.put(char(kCheckpointVersion));
  write_u32(os, std::uint32_t(store.ordered().size()));
  for (const Parameter* p : store.ordered()) {
    write_u32(os, std::uint32_t(p->name.size()));
    os.write(p->name.data(), std::streamsize(p->name.size()));
    write_u32(os, std::uint32_t(p->value.rows()));
    write_u32(os, std::uint32_t(p->value.cols()));
    for (Index r = 0; r < p->value.rows(); ++r)
      for (Index c = 0; c < p->value.cols(); ++c)
        write_f64_le(os, p->value(r, c));
  }
  if (!os)
    throw CheckpointError("failed writing checkpoint '" + path.string() + "'");
}

void load_checkpoint(ParameterStore& store,
                     const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("bad magic in checkpoint '" + path.string() + "'");
  const int version = is.get();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version in '" +
                          path.string() + "'");
  const std::uint32_t count = read_u32(is, path.string());
  if (count != store.ordered().size())
    throw CheckpointError("checkpoint '" + path.string() + "' holds " +
                          std::to_string(count) + " parameters, model expects " +
                          std::to_string(store.ordered().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(is, path.string());
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw CheckpointError("truncated checkpoint '" + path.string() + "'");
    const Index rows = Index(read_u32(is, path.string()));
    const Index cols = Index(read_u32(is, path.string()));
    if (!store.has(name))
      throw CheckpointError("checkpoint parameter '" + name +
                            "' is not registered in the model");
    Parameter& p = store.at(name);
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            ", model expects " + shape_of(p.value));
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) p.value(r, c) = read_f64_le(is, path.string());
  }
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const {
  if (!defined()) throw DimensionError("use of an undefined tape handle");
  return tape_->value(*this);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this)
    throw DimensionError("tape handle used with a different tape");
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this)
    throw DimensionError("tape handle used with a different tape");
  return nodes_[v.id_];
}

Var Tape::emit(Matrix value, bool requires_grad, PullBack pull) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.pull = std::move(pull);
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) { return emit(std::move(value), false, {}); }

Var Tape::leaf(Matrix value) { return emit(std::move(value), true, {}); }

Var Tape::use(Parameter& param) {
  auto it = param_cache_.find(&param);
  if (it != param_cache_.end()) return it->second;
  Var v = emit(param.value, true, {});
  nodes_[v.id_].param = &param;
  param_cache_.emplace(&param, v);
  return v;
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad(Var v) const {
  static const Matrix empty;
  const Node& n = node(v);
  return n.grad.size() > 0 ? n.grad : empty;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::accumulate(Var v, Matrix contribution) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.value.rows() != contribution.rows() ||
      n.value.cols() != contribution.cols())
    throw DimensionError("gradient contribution shape mismatch");
  if (n.grad.size() == 0)
    n.grad = std::move(contribution);
  else
    n.grad += contribution;
}

void Tape::accumulate_block(Var v, Index row0, const Matrix& contribution) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (row0 < 0 || row0 + contribution.rows() > n.value.rows() ||
      n.value.cols() != contribution.cols())
    throw DimensionError("gradient block does not fit the node");
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.grad.middleRows(row0, contribution.rows()) += contribution;
}

Var Tape::custom(Matrix value, const std::vector<Var>& inputs, PullBack pull) {
  bool needs = false;
  for (Var in : inputs) needs = needs || requires_grad(in);
  return emit(std::move(value), needs, needs ? std::move(pull) : PullBack{});
}

void Tape::backward(Var output) {
  Node& out = node(output);
  if (out.value.rows() != 1 || out.value.cols() != 1)
    throw DimensionError("backward requires a 1x1 output node");
  if (!out.requires_grad) return;
  out.grad = Matrix::Ones(1, 1);
  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr)
      n.param->grad += n.grad;
    else if (n.pull)
      n.pull(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

Tape* tape_of(Var v) {
  if (!v.defined()) throw DimensionError("operation on an undefined handle");
  return v.owner();
}

}  // namespace

Var affine(Var x, Var w, Var b) {
  Var xw = matmul(x, w);
  return add_rowvec(xw, b);
}

Var matmul(Var a, Var b) {
  Tape* t = tape_of(a);
  require(a.cols() == b.rows(), "matmul: inner dimensions " + shape_of(a.value()) +
                                    " * " + shape_of(b.value()) + " differ");
  Matrix y = a.value() * b.value();
  return t->custom(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * b.value().transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_rows(Var x, Var w, Index row0, Index rows) {
  Tape* t = tape_of(x);
  require(row0 >= 0 && rows >= 1 && row0 + rows <= w.rows(),
          "matmul_rows: row block outside weight matrix");
  require(x.cols() == rows, "matmul_rows: input width does not match block");
  Matrix y = x.value() * w.value().middleRows(row0, rows);
  return t->custom(std::move(y), {x, w},
                   [x, w, row0, rows](Tape& tp, const Matrix& g) {
                     if (tp.requires_grad(x))
                       tp.accumulate(
                           x, g * w.value().middleRows(row0, rows).transpose());
                     if (tp.requires_grad(w))
                       tp.accumulate_block(w, row0,
                                           x.value().transpose() * g);
                   });
}

Var add(Var a, Var b) { return add_n({a, b}); }

Var add_n(const std::vector<Var>& terms) {
  if (terms.empty()) throw DimensionError("add_n: no terms");
  Tape* t = tape_of(terms[0]);
  Matrix y = terms[0].value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require(terms[i].rows() == y.rows() && terms[i].cols() == y.cols(),
            "add_n: operand shapes differ");
    y += terms[i].value();
  }
  return t->custom(std::move(y), terms, [terms](Tape& tp, const Matrix& g) {
    for (Var v : terms)
      if (tp.requires_grad(v)) tp.accumulate(v, g);
  });
}

Var sub(Var a, Var b) {
  Tape* t = tape_of(a);
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "sub: operand shapes differ");
  Matrix y = a.value() - b.value();
  return t->custom(std::move(y), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g);
    if (tp.requires_grad(b)) tp.accumulate(b, -g);
  });
}

Var scale(Var a, double s) {
  Tape* t = tape_of(a);
  Matrix y = s * a.value();
  return t->custom(std::move(y), {a}, [a, s](Tape& tp, const Matrix& g) {
    tp.accumulate(a, s * g);
  });
}

Var add_rowvec(Var x, Var row) {
  Tape* t = tape_of(x);
  require(row.rows() == 1 && row.cols() == x.cols(),
          "add_rowvec: expected a 1x" + std::to_string(x.cols()) + " row");
  Matrix y = x.value();
  y.rowwise() += Eigen::RowVectorXd(row.value().row(0));
  return t->custom(std::move(y), {x, row}, [x, row](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate(x, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var activate(Var x, Activation kind) {
  switch (kind) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  throw ConfigError("unknown activation kind");
}

Var relu(Var x) {
  Tape* t = tape_of(x);
  Matrix y = x.value().cwiseMax(0.0);
  return t->custom(std::move(y), {x}, [x](Tape& tp, const Matrix& g) {
    // Subgradient 0 at the kink.
    Matrix gx =
        (x.value().array() > 0.0).select(g.array(), 0.0).matrix();
    tp.accumulate(x, std::move(gx));
  });
}

namespace {

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Var sigmoid(Var x) {
  Tape* t = tape_of(x);
  Matrix y = x.value().unaryExpr([](double z) { return stable_sigmoid(z); });
  Var out = t->custom(Matrix(y), {x}, [x, y](Tape& tp, const Matrix& g) {
    Matrix gx = g.array() * y.array() * (1.0 - y.array());
    tp.accumulate(x, std::move(gx));
  });
  return out;
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  Tape* t = tape_of(parts[0]);
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (Var p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Index at = 0;
  for (Var p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t->custom(std::move(y), parts, [parts](Tape& tp, const Matrix& g) {
    Index at = 0;
    for (Var p : parts) {
      if (tp.requires_grad(p))
        tp.accumulate(p, g.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var gather_rows(Var x, const std::vector<Index>& rows) {
  Tape* t = tape_of(x);
  Matrix y(Index(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < x.rows(), "gather_rows: index out of range");
    y.row(Index(r)) = x.value().row(rows[r]);
  }
  // shared_ptr keeps the closure small instead of copying the index list.
  auto idx = std::make_shared<std::vector<Index>>(rows);
  return t->custom(std::move(y), {x}, [x, idx](Tape& tp, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t r = 0; r < idx->size(); ++r)
      gx.row((*idx)[r]) += g.row(Index(r));
    tp.accumulate(x, std::move(gx));
  });
}

Var slice_rows(Var x, Index row0, Index rows) {
  Tape* t = tape_of(x);
  require(rows >= 0 && row0 >= 0 && row0 + rows <= x.rows(),
          "slice_rows: block out of range");
  Matrix y = x.value().middleRows(row0, rows);
  return t->custom(std::move(y), {x}, [x, row0](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate_block(x, row0, g);
  });
}

Var gather_rows2(Var a, Var b,
                 const std::vector<std::pair<int, Index>>& plan) {
  Tape* t = tape_of(a);
  require(a.cols() == b.cols(), "gather_rows2: column widths differ");
  Matrix y(Index(plan.size()), a.cols());
  for (std::size_t r = 0; r < plan.size(); ++r) {
    const auto& [sel, row] = plan[r];
    const Matrix& src = sel == 0 ? a.value() : b.value();
    require(row >= 0 && row < src.rows(), "gather_rows2: index out of range");
    y.row(Index(r)) = src.row(row);
  }
  auto shared = std::make_shared<std::vector<std::pair<int, Index>>>(plan);
  return t->custom(std::move(y), {a, b},
                   [a, b, shared](Tape& tp, const Matrix& g) {
    const bool need_a = tp.requires_grad(a);
    const bool need_b = tp.requires_grad(b);
    Matrix ga, gb;
    if (need_a) ga = Matrix::Zero(a.rows(), a.cols());
    if (need_b) gb = Matrix::Zero(b.rows(), b.cols());
    for (std::size_t r = 0; r < shared->size(); ++r) {
      const auto& [sel, row] = (*shared)[r];
      if (sel == 0 && need_a) ga.row(row) += g.row(Index(r));
      if (sel == 1 && need_b) gb.row(row) += g.row(Index(r));
    }
    if (need_a) tp.accumulate(a, std::move(ga));
    if (need_b) tp.accumulate(b, std::move(gb));
  });
}

namespace {

// Shared max-with-argmax scan; first row attaining the maximum wins.
void segment_column_max(const Matrix& x, Index begin, Index end,
                        Eigen::RowVectorXd& out_max,
                        std::vector<Index>& out_argmax) {
  const Index cols = x.cols();
  out_max = x.row(begin);
  out_argmax.assign(std::size_t(cols), begin);
  for (Index r = begin + 1; r < end; ++r)
    for (Index c = 0; c < cols; ++c)
      if (x(r, c) > out_max(c)) {
        out_max(c) = x(r, c);
        out_argmax[std::size_t(c)] = r;
      }
}

}  // namespace

Var max_pool_rows(Var x) {
  if (x.rows() == 0)
    throw EmptyNeighborhoodError("max_pool_rows: no rows to pool");
  std::vector<Index> offsets = {0, x.rows()};
  return segment_max_rows(x, offsets);
}

Var segment_max_rows(Var x, const std::vector<Index>& offsets) {
  Tape* t = tape_of(x);
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.rows())
    throw DimensionError("segment_max_rows: invalid offsets");
  const Index segments = Index(offsets.size()) - 1;
  const Index cols = x.cols();
  Matrix y(segments, cols);
  // argmax row per (segment, column) for the pull-back
  auto argmax = std::make_shared<std::vector<Index>>(
      std::size_t(segments * cols));
  Eigen::RowVectorXd seg_max;
  std::vector<Index> seg_arg;
  for (Index s = 0; s < segments; ++s) {
    const Index begin = offsets[std::size_t(s)];
    const Index end = offsets[std::size_t(s) + 1];
    if (end <= begin)
      throw EmptyNeighborhoodError(
          "segment_max_rows: segment " + std::to_string(s) + " is empty");
    segment_column_max(x.value(), begin, end, seg_max, seg_arg);
    y.row(s) = seg_max;
    for (Index c = 0; c < cols; ++c)
      (*argmax)[std::size_t(s * cols + c)] = seg_arg[std::size_t(c)];
  }
  return t->custom(std::move(y), {x},
                   [x, argmax, segments, cols](Tape& tp, const Matrix& g) {
                     Matrix gx = Matrix::Zero(x.rows(), x.cols());
                     for (Index s = 0; s < segments; ++s)
                       for (Index c = 0; c < cols; ++c)
                         gx((*argmax)[std::size_t(s * cols + c)], c) += g(s, c);
                     tp.accumulate(x, std::move(gx));
                   });
}

Var edge_message_max(Var target_term, Var source_present, Var source_past,
                     Var delta_present, Var delta_past, Matrix edge_data,
                     Var w, Index w_row0, Var bias,
                     const std::vector<Index>& edge_target,
                     const std::vector<std::pair<int, Index>>& edge_source,
                     const std::vector<Index>& offsets) {
  Tape* t = tape_of(w);
  const Index cols = w.cols();
  const Index edges = edge_data.rows();
  const Index block = edge_data.cols();
  const bool with_target = target_term.defined();
  const bool with_source = source_present.defined();
  const bool with_past = source_past.defined();
  const bool with_deltas = delta_present.defined();
  require(block >= 1 && w_row0 >= 0 && w_row0 + block <= w.rows(),
          "edge_message_max: edge block outside weight matrix");
  require(bias.rows() == 1 && bias.cols() == cols,
          "edge_message_max: bias must be 1 x w.cols()");
  if (with_target)
    require(target_term.cols() == cols,
            "edge_message_max: target term width disagrees");
  if (with_source)
    require(source_present.cols() == cols &&
                (!with_past || source_past.cols() == cols),
            "edge_message_max: source term width disagrees");
  if (with_deltas)
    require(with_target && with_source && delta_past.defined() &&
                delta_present.cols() == cols && delta_past.cols() == cols &&
                delta_present.rows() == target_term.rows(),
            "edge_message_max: delta shapes disagree");
  require(!with_target || Index(edge_target.size()) == edges,
          "edge_message_max: edge target list does not match edge_data");
  require(!with_source || Index(edge_source.size()) == edges,
          "edge_message_max: edge source list does not match edge_data");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != edges)
    throw DimensionError("edge_message_max: invalid offsets");
  if (with_source && !with_past)
    for (const auto& entry : edge_source)
      if (entry.first != 0)
        throw DimensionError(
            "edge_message_max: past-side edge without a past source term");

  const Index segments = Index(offsets.size()) - 1;
  const Matrix eterm = edge_data * w.value().middleRows(w_row0, block);
  const Matrix* tt = with_target ? &target_term.value() : nullptr;
  const Matrix* sp = with_source ? &source_present.value() : nullptr;
  const Matrix* sq = with_past ? &source_past.value() : nullptr;
  const Matrix* dpm = with_deltas ? &delta_present.value() : nullptr;
  const Matrix* dqm = with_deltas ? &delta_past.value() : nullptr;

  Matrix y(segments, cols);
  auto argmax =
      std::make_shared<std::vector<Index>>(std::size_t(segments * cols));
  Eigen::RowVectorXd msg(cols);
  for (Index s = 0; s < segments; ++s) {
    const Index begin = offsets[std::size_t(s)];
    const Index end = offsets[std::size_t(s) + 1];
    if (end <= begin)
      throw EmptyNeighborhoodError(
          "edge_message_max: segment " + std::to_string(s) + " is empty");
    for (Index e = begin; e < end; ++e) {
      msg = eterm.row(e);
      const Index tgt = with_target ? edge_target[std::size_t(e)] : 0;
      if (with_target) msg += tt->row(tgt);
      if (with_source) {
        const int side = edge_source[std::size_t(e)].first;
        const Index src = edge_source[std::size_t(e)].second;
        msg += side ? sq->row(src) : sp->row(src);
        if (with_deltas)
          msg += (side ? dqm->row(src) : dpm->row(src)) - dpm->row(tgt);
      }
      if (e == begin) {
        y.row(s) = msg;
        for (Index c = 0; c < cols; ++c)
          (*argmax)[std::size_t(s * cols + c)] = e;
      } else {
        for (Index c = 0; c < cols; ++c)
          if (msg(c) > y(s, c)) {
            y(s, c) = msg(c);
            (*argmax)[std::size_t(s * cols + c)] = e;
          }
      }
    }
  }

  y.rowwise() += bias.value().row(0);

  auto ed = std::make_shared<const Matrix>(std::move(edge_data));
  auto tgts = std::make_shared<std::vector<Index>>(edge_target);
  auto srcs =
      std::make_shared<std::vector<std::pair<int, Index>>>(edge_source);
  std::vector<Var> inputs = {w, bias};
  if (with_target) inputs.push_back(target_term);
  if (with_source) inputs.push_back(source_present);
  if (with_past) inputs.push_back(source_past);
  if (with_deltas) {
    inputs.push_back(delta_present);
    inputs.push_back(delta_past);
  }
  return t->custom(
      std::move(y), inputs,
      [target_term, source_present, source_past, delta_present, delta_past, w,
       w_row0, block, bias, ed, tgts, srcs, argmax, segments, cols,
       with_target, with_source, with_past,
       with_deltas](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
        const bool need_tt = with_target && tp.requires_grad(target_term);
        const bool need_sp = with_source && tp.requires_grad(source_present);
        const bool need_sq = with_past && tp.requires_grad(source_past);
        const bool need_w = tp.requires_grad(w);
        const bool need_dp = with_deltas && tp.requires_grad(delta_present);
        const bool need_dq = with_deltas && tp.requires_grad(delta_past);
        Matrix g_tt, g_sp, g_sq, g_wb, g_dp, g_dq;
        if (need_tt) g_tt = Matrix::Zero(target_term.rows(), cols);
        if (need_sp) g_sp = Matrix::Zero(source_present.rows(), cols);
        if (need_sq) g_sq = Matrix::Zero(source_past.rows(), cols);
        if (need_w) g_wb = Matrix::Zero(block, cols);
        if (need_dp) g_dp = Matrix::Zero(delta_present.rows(), cols);
        if (need_dq) g_dq = Matrix::Zero(delta_past.rows(), cols);
        for (Index s = 0; s < segments; ++s)
          for (Index c = 0; c < cols; ++c) {
            const Index e = (*argmax)[std::size_t(s * cols + c)];
            const double gv = g(s, c);
            if (need_w)
              for (Index r = 0; r < block; ++r)
                g_wb(r, c) += gv * (*ed)(e, r);
            if (with_target) {
              const Index tgt = (*tgts)[std::size_t(e)];
              if (need_tt) g_tt(tgt, c) += gv;
              if (need_dp) g_dp(tgt, c) -= gv;
            }
            if (with_source) {
              const int side = (*srcs)[std::size_t(e)].first;
              const Index src = (*srcs)[std::size_t(e)].second;
              if (side ? need_sq : need_sp)
                (side ? g_sq : g_sp)(src, c) += gv;
              if (side ? need_dq : need_dp)
                (side ? g_dq : g_dp)(src, c) += gv;
            }
          }
        if (need_tt) tp.accumulate(target_term, std::move(g_tt));
        if (need_sp) tp.accumulate(source_present, std::move(g_sp));
        if (need_sq) tp.accumulate(source_past, std::move(g_sq));
        if (need_w) tp.accumulate_block(w, w_row0, g_wb);
        if (need_dp) tp.accumulate(delta_present, std::move(g_dp));
        if (need_dq) tp.accumulate(delta_past, std::move(g_dq));
      });
}

Var row_scale(Var x, Var s) {
  Tape* t = tape_of(x);
  require(s.rows() == x.rows() && s.cols() == 1,
          "row_scale: scale must be " + std::to_string(x.rows()) + "x1");
  Matrix y = x.value().array().colwise() * s.value().col(0).array();
  return t->custom(std::move(y), {x, s}, [x, s](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) {
      Matrix gx = g.array().colwise() * s.value().col(0).array();
      tp.accumulate(x, std::move(gx));
    }
    if (tp.requires_grad(s)) {
      Matrix gs = (g.array() * x.value().array()).rowwise().sum();
      tp.accumulate(s, std::move(gs));
    }
  });
}

Matrix apply_row_mix(const RowMixPlan& plan, const Matrix& source) {
  if (source.rows() != plan.source_rows)
    throw DimensionError("row mix plan built for " +
                         std::to_string(plan.source_rows) + " source rows, got " +
                         std::to_string(source.rows()));
  Matrix y = Matrix::Zero(Index(plan.rows.size()), source.cols());
  for (std::size_t r = 0; r < plan.rows.size(); ++r)
    for (const RowMixPlan::Term& term : plan.rows[r])
      y.row(Index(r)) += term.weight * source.row(term.source);
  return y;
}

Var mix_rows(Var source, const RowMixPlan& plan) {
  Tape* t = tape_of(source);
  Matrix y = apply_row_mix(plan, source.value());
  auto shared = std::make_shared<RowMixPlan>(plan);
  return t->custom(std::move(y), {source},
                   [source, shared](Tape& tp, const Matrix& g) {
                     Matrix gs = Matrix::Zero(source.rows(), source.cols());
                     for (std::size_t r = 0; r < shared->rows.size(); ++r)
                       for (const RowMixPlan::Term& term : shared->rows[r])
                         gs.row(term.source) += term.weight * g.row(Index(r));
                     tp.accumulate(source, std::move(gs));
                   });
}

Var sum_all(Var x) {
  Tape* t = tape_of(x);
  Matrix y(1, 1);
  y(0, 0) = x.value().sum();
  return t->custom(std::move(y), {x}, [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

// ---------------------------------------------------------------------------
// Gradient verification

GradCheckReport grad_check(const ScalarFn& f, ParameterStore& store,
                           const GradCheckOptions& options) {
  const auto eval_value = [&]() {
    Tape tape;
    Var out = f(tape);
    if (out.rows() != 1 || out.cols() != 1)
      throw DimensionError("grad_check: output must be 1x1");
    const double v = out.value()(0, 0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  // Reverse pass once for analytic gradients.
  store.zero_grads();
  {
    Tape tape;
    Var out = f(tape);
    if (out.rows() != 1 || out.cols() != 1)
      throw DimensionError("grad_check: output must be 1x1");
    if (!std::isfinite(out.value()(0, 0)))
      throw NumericError("grad_check: non-finite loss");
    tape.backward(out);
  }
  if (options.corrupt) options.corrupt(store);
  std::map<std::string, Matrix> analytic;
  for (const Parameter* p : store.ordered()) analytic[p->name] = p->grad;
  const double base = eval_value();

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (Parameter* p : store.ordered()) {
    const Index total = p->value.size();
    std::vector<Index> indices(static_cast<std::size_t>(total));
    std::iota(indices.begin(), indices.end(), Index(0));
    const Index sample = std::min<Index>(total, options.samples_per_matrix);
    // Partial Fisher-Yates: the first `sample` entries become the draw.
    for (Index i = 0; i < sample; ++i) {
      std::uniform_int_distribution<Index> pick(i, total - 1);
      std::swap(indices[std::size_t(i)], indices[std::size_t(pick(rng))]);
    }
    double* data = p->value.data();
    const double* grad_data = analytic[p->name].data();
    for (Index i = 0; i < sample; ++i) {
      const Index at = indices[std::size_t(i)];
      const double saved = data[at];
      data[at] = saved + options.step;
      const double up = eval_value();
      data[at] = saved - options.step;
      const double down = eval_value();
      data[at] = saved;
      const double exact = grad_data[at];
      // Max-style selections make the objective piecewise smooth: when a
      // winner flips inside [x-h, x+h], the central difference blends two
      // slopes while the reverse pass reports the exact one-sided derivative
      // at x. Score the analytic value against the central and both
      // one-sided estimates and keep the closest; a wrong gradient matches
      // none of them.
      const double candidates[3] = {(up - down) / (2.0 * options.step),
                                    (up - base) / options.step,
                                    (base - down) / options.step};
      double rel = std::numeric_limits<double>::infinity();
      double numeric = candidates[0];
      for (const double c : candidates) {
        const double r = std::abs(exact - c) /
                         std::max({1.0, std::abs(exact), std::abs(c)});
        if (r < rel) {
          rel = r;
          numeric = c;
        }
      }
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {p->name, at, exact, numeric, rel};
      }
    }
  }
  return report;
}

}  // namespace agar
