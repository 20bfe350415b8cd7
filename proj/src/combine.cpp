#include "agar/combine.hpp"

#include <fstream>

namespace agar {

Fusion parse_fusion(const std::string& name) {
  if (name == "classic") return Fusion::classic;
  if (name == "adaptive") return Fusion::adaptive;
  throw ConfigError("unknown fusion mode '" + name + "'");
}

const char* to_string(Fusion mode) {
  return mode == Fusion::classic ? "classic" : "adaptive";
}

void register_combine(ParameterStore& store, const CombineConfig& config) {
  if (config.levels < 1) throw ConfigError("combine: levels must be >= 1");
  const Index d = config.dynamic_width;
  if (config.fusion == Fusion::classic) {
    if (config.levels == 1) {
      store.add_group("propagate.level1", d, config.fused_width);
    } else {
      // One group per propagation step, finest first.
      for (int l = 1; l < config.levels; ++l) {
        const Index carried = l == config.levels - 1 ? d : config.fused_width;
        store.add_group("propagate.level" + std::to_string(l), d + carried,
                        config.fused_width);
      }
    }
  } else {
    for (int l = 1; l <= config.levels; ++l)
      store.add_group("refine.level" + std::to_string(l), d, d);
    for (int l = 1; l <= config.levels; ++l)
      store.add_group("gate.level" + std::to_string(l),
                      Index(config.levels) * d, 1);
    store.add_group("fuse", Index(config.levels) * d, config.fused_width);
  }
  store.add_group("motion", config.fused_width, 3);
}

namespace {

void check_levels(const std::vector<LevelOutput>& levels,
                  const CombineConfig& config) {
  if (int(levels.size()) != config.levels)
    throw DimensionError("combine: expected " + std::to_string(config.levels) +
                         " levels, got " + std::to_string(levels.size()));
}

// Interpolation weights from a coarser level onto a finer one. Stacked
// sequences (segment lists with more than one span) are interpolated per
// sequence and spliced, so no weight reaches across a sequence boundary.
RowMixPlan level_plan(const LevelOutput& target, const LevelOutput& source) {
  const bool multi = target.segments.size() > 2 || source.segments.size() > 2;
  if (!multi) return interpolation_plan(target.coords, source.coords);
  if (target.segments.size() != source.segments.size())
    throw DimensionError("combine: level segment counts disagree");
  const std::vector<Index>& ts = target.segments;
  const std::vector<Index>& ss = source.segments;
  std::vector<RowMixPlan> parts;
  parts.reserve(ts.size() - 1);
  for (std::size_t s = 0; s + 1 < ts.size(); ++s)
    parts.push_back(interpolation_plan(
        target.coords.middleRows(ts[s], ts[s + 1] - ts[s]),
        source.coords.middleRows(ss[s], ss[s + 1] - ss[s])));
  return splice_row_mix_plans(parts, ss);
}

}  // namespace

Var classic_fp(Tape& tape, ParameterStore& store,
               const std::vector<LevelOutput>& levels,
               const CombineConfig& config) {
  check_levels(levels, config);
  if (config.levels == 1) {
    Var w = tape.use(store.at("propagate.level1.W"));
    Var b = tape.use(store.at("propagate.level1.b"));
    return activate(affine(levels[0].dynamic, w, b), config.fp_activation);
  }
  Var carried = levels[std::size_t(config.levels - 1)].dynamic;
  for (int l = config.levels - 1; l >= 1; --l) {
    const RowMixPlan plan =
        level_plan(levels[std::size_t(l - 1)], levels[std::size_t(l)]);
    Var lifted = mix_rows(carried, plan);
    Var joined = concat_cols({levels[std::size_t(l - 1)].dynamic, lifted});
    const std::string group = "propagate.level" + std::to_string(l);
    Var w = tape.use(store.at(group + ".W"));
    Var b = tape.use(store.at(group + ".b"));
    carried = activate(affine(joined, w, b), config.fp_activation);
  }
  return carried;
}

CombineResult adaptive_combine(Tape& tape, ParameterStore& store,
                               const std::vector<LevelOutput>& levels,
                               const CombineConfig& config,
                               const Matrix* forced_alpha) {
  check_levels(levels, config);
  const Index n1 = levels[0].coords.rows();
  if (forced_alpha && (forced_alpha->rows() != n1 ||
                       forced_alpha->cols() != Index(config.levels)))
    throw DimensionError("adaptive_combine: forced gate matrix must be " +
                         std::to_string(n1) + "x" +
                         std::to_string(config.levels));

  // Lift every level onto the level-1 points, then refine independently.
  std::vector<Var> refined(static_cast<std::size_t>(config.levels));
  for (int l = 1; l <= config.levels; ++l) {
    Var lifted = levels[std::size_t(l - 1)].dynamic;
    if (l > 1) {
      const RowMixPlan plan =
          level_plan(levels[0], levels[std::size_t(l - 1)]);
      lifted = mix_rows(lifted, plan);
    }
    const std::string group = "refine.level" + std::to_string(l);
    Var w = tape.use(store.at(group + ".W"));
    Var b = tape.use(store.at(group + ".b"));
    refined[std::size_t(l - 1)] =
        activate(affine(lifted, w, b), config.refine_activation);
  }

  // One bounded gate scalar per point and level, computed from all levels.
  Var stacked = concat_cols(refined);
  CombineResult out;
  out.alphas.resize(n1, config.levels);
  std::vector<Var> gated(static_cast<std::size_t>(config.levels));
  for (int l = 1; l <= config.levels; ++l) {
    Var alpha;
    if (forced_alpha) {
      alpha = tape.constant(forced_alpha->col(l - 1));
    } else {
      const std::string group = "gate.level" + std::to_string(l);
      Var w = tape.use(store.at(group + ".W"));
      Var b = tape.use(store.at(group + ".b"));
      alpha = activate(affine(stacked, w, b), config.attention_activation);
    }
    out.alphas.col(l - 1) = alpha.value().col(0);
    gated[std::size_t(l - 1)] = row_scale(refined[std::size_t(l - 1)], alpha);
  }

  Var w = tape.use(store.at("fuse.W"));
  Var b = tape.use(store.at("fuse.b"));
  out.fused =
      activate(affine(concat_cols(gated), w, b), config.fuse_activation);
  return out;
}

CombineResult combine_levels(Tape& tape, ParameterStore& store,
                             const std::vector<LevelOutput>& levels,
                             const CombineConfig& config,
                             const Matrix* forced_alpha) {
  if (config.fusion == Fusion::classic) {
    CombineResult out;
    out.fused = classic_fp(tape, store, levels, config);
    return out;
  }
  return adaptive_combine(tape, store, levels, config, forced_alpha);
}

Var predict_motion(Tape& tape, ParameterStore& store, Var fused) {
  Var w = tape.use(store.at("motion.W"));
  Var b = tape.use(store.at("motion.b"));
  return affine(fused, w, b);
}

Var predict_next(Tape& tape, const Matrix& frame_coords, Var motion) {
  if (motion.rows() != frame_coords.rows() || motion.cols() != 3)
    throw DimensionError("predict_next: motion rows must match the frame");
  return add(tape.constant(frame_coords), motion);
}

std::vector<LevelSnapshot> snapshot_levels(
    const std::vector<LevelOutput>& levels) {
  std::vector<LevelSnapshot> out;
  out.reserve(levels.size());
  for (const LevelOutput& level : levels)
    out.push_back({level.coords, level.dynamic.value()});
  return out;
}

namespace {

// Rebuilds LevelOutput views over constant snapshots. keep = -1 passes every
// level through, keep = 0 zeroes them all, keep = l (1-based) zeroes every
// level except l.
std::vector<LevelOutput> masked_levels(Tape& tape,
                                       const std::vector<LevelSnapshot>& snaps,
                                       int keep) {
  std::vector<LevelOutput> levels(snaps.size());
  for (std::size_t l = 0; l < snaps.size(); ++l) {
    levels[l].coords = snaps[l].coords;
    const bool real = keep == -1 || int(l) + 1 == keep;
    levels[l].dynamic =
        real ? tape.constant(snaps[l].dynamic)
             : tape.constant(Matrix::Zero(snaps[l].dynamic.rows(),
                                          snaps[l].dynamic.cols()));
  }
  return levels;
}

Matrix run_motion(ParameterStore& store,
                  const std::vector<LevelSnapshot>& snaps, int keep,
                  const CombineConfig& config, const Matrix* forced_alpha,
                  Matrix* alphas_out = nullptr) {
  Tape tape;
  std::vector<LevelOutput> levels = masked_levels(tape, snaps, keep);
  CombineResult combined =
      combine_levels(tape, store, levels, config, forced_alpha);
  if (alphas_out) *alphas_out = combined.alphas;
  return predict_motion(tape, store, combined.fused).value();
}

}  // namespace

MotionBreakdown disentangle_motions(ParameterStore& store,
                                    const std::vector<LevelSnapshot>& levels,
                                    const CombineConfig& config) {
  if (levels.empty()) throw DimensionError("disentangle_motions: no levels");
  MotionBreakdown out;
  out.coords = levels[0].coords;
  const int n_levels = int(levels.size());

  // Full-input pass records the true motion and, in adaptive mode, the gate
  // values that stay frozen for the per-level reruns.
  Matrix alphas;
  out.total_motion = run_motion(store, levels, -1, config, nullptr, &alphas);
  const bool adaptive = config.fusion == Fusion::adaptive;
  out.alphas = adaptive ? alphas
                        : Matrix::Ones(levels[0].coords.rows(), n_levels);
  const Matrix* frozen = adaptive ? &out.alphas : nullptr;

  out.baseline = run_motion(store, levels, 0, config, frozen);
  out.level_motions.resize(std::size_t(n_levels));
  out.motion_sum = Matrix::Zero(out.total_motion.rows(), 3);
  for (int l = 1; l <= n_levels; ++l) {
    Matrix lone = run_motion(store, levels, l, config, frozen);
    out.level_motions[std::size_t(l - 1)] = lone - out.baseline;
    out.motion_sum += out.level_motions[std::size_t(l - 1)];
  }
  return out;
}

void write_attention_report(const std::filesystem::path& path,
                            const MotionBreakdown& breakdown) {
  std::ofstream os(path);
  if (!os)
    throw FormatError("cannot write attention report '" + path.string() + "'");
  const int n_levels = int(breakdown.level_motions.size());
  os << "index,x,y,z";
  for (int l = 1; l <= n_levels; ++l) os << ",alpha_" << l;
  for (int l = 1; l <= n_levels; ++l)
    os << ",m" << l << "_x,m" << l << "_y,m" << l << "_z";
  os << ",m_x,m_y,m_z\n";
  os.precision(17);
  for (Index i = 0; i < breakdown.coords.rows(); ++i) {
    os << i << ',' << breakdown.coords(i, 0) << ',' << breakdown.coords(i, 1)
       << ',' << breakdown.coords(i, 2);
    for (int l = 0; l < n_levels; ++l) os << ',' << breakdown.alphas(i, l);
    for (int l = 0; l < n_levels; ++l) {
      const Matrix& m = breakdown.level_motions[std::size_t(l)];
      os << ',' << m(i, 0) << ',' << m(i, 1) << ',' << m(i, 2);
    }
    os << ',' << breakdown.total_motion(i, 0) << ','
       << breakdown.total_motion(i, 1) << ',' << breakdown.total_motion(i, 2)
       << '\n';
  }
}

}  // namespace agar
