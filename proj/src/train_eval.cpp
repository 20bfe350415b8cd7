#include "agar/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace agar {

namespace {

// ---------------------------------------------------------------------------
// Config text form

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + value + "' is not an integer");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + value +
                      "' is not a non-negative integer");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + value + "' is not a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("key '" + key + "': '" + value +
                    "' is not a boolean (use true/false)");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw ConfigError("key '" + key + "': empty list entry");
    out.push_back(T(parse_int(key, item)));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::string> run_config_keys() {
  return {"levels",
          "ssgnn_widths",
          "k_coordinate",
          "dynamic_width",
          "fused_width",
          "k_present",
          "k_past",
          "downsample_factor",
          "fusion",
          "activation",
          "attention_activation",
          "no_spatial_features",
          "temporal_only_graph",
          "st_coordinate_graph",
          "ssgnn_source_feature",
          "lr",
          "clip",
          "iterations",
          "batch_size",
          "seed",
          "emd_scale",
          "gen_generator",
          "gen_points",
          "gen_frames",
          "gen_train_count",
          "gen_test_count",
          "gen_glyph_count"};
}

void apply_override(RunConfig& config, const std::string& key,
                    const std::string& value) {
  ModelConfig& m = config.model;
  if (key == "levels") m.levels = parse_int(key, value);
  else if (key == "ssgnn_widths") m.ssgnn_widths = parse_list<Index>(key, value);
  else if (key == "k_coordinate") m.k_coordinate = parse_int(key, value);
  else if (key == "dynamic_width") m.dynamic_width = parse_int(key, value);
  else if (key == "fused_width") m.fused_width = parse_int(key, value);
  else if (key == "k_present") m.k_present = parse_list<int>(key, value);
  else if (key == "k_past") m.k_past = parse_list<int>(key, value);
  else if (key == "downsample_factor")
    m.downsample_factor = parse_int(key, value);
  else if (key == "fusion") m.fusion = parse_fusion(value);
  else if (key == "activation") m.activation = parse_activation(value);
  else if (key == "attention_activation")
    m.attention_activation = parse_activation(value);
  else if (key == "no_spatial_features")
    m.no_spatial_features = parse_bool(key, value);
  else if (key == "temporal_only_graph")
    m.temporal_only_graph = parse_bool(key, value);
  else if (key == "st_coordinate_graph")
    m.st_coordinate_graph = parse_bool(key, value);
  else if (key == "ssgnn_source_feature")
    m.ssgnn_source_feature = parse_bool(key, value);
  else if (key == "lr") config.lr = parse_double(key, value);
  else if (key == "clip") config.clip = parse_double(key, value);
  else if (key == "iterations") config.iterations = parse_int(key, value);
  else if (key == "batch_size") config.batch_size = parse_int(key, value);
  else if (key == "seed") config.seed = parse_u64(key, value);
  else if (key == "emd_scale") config.emd_scale = parse_double(key, value);
  else if (key == "gen_generator") config.gen_generator = value;
  else if (key == "gen_points") config.gen_points = parse_int(key, value);
  else if (key == "gen_frames") config.gen_frames = parse_int(key, value);
  else if (key == "gen_train_count")
    config.gen_train_count = parse_int(key, value);
  else if (key == "gen_test_count")
    config.gen_test_count = parse_int(key, value);
  else if (key == "gen_glyph_count")
    config.gen_glyph_count = parse_int(key, value);
  else
    throw ConfigError("unknown configuration key '" + key + "'");
}

namespace {

std::string config_value(const RunConfig& config, const std::string& key) {
  const ModelConfig& m = config.model;
  if (key == "levels") return std::to_string(m.levels);
  if (key == "ssgnn_widths") return join_list(m.ssgnn_widths);
  if (key == "k_coordinate") return std::to_string(m.k_coordinate);
  if (key == "dynamic_width") return std::to_string(m.dynamic_width);
  if (key == "fused_width") return std::to_string(m.fused_width);
  if (key == "k_present")
    return join_list(m.k_present.empty()
                         ? std::vector<int>(std::size_t(m.levels), 8)
                         : m.k_present);
  if (key == "k_past")
    return join_list(m.k_past.empty()
                         ? std::vector<int>(std::size_t(m.levels), 8)
                         : m.k_past);
  if (key == "downsample_factor") return std::to_string(m.downsample_factor);
  if (key == "fusion") return to_string(m.fusion);
  if (key == "activation") return to_string(m.activation);
  if (key == "attention_activation") return to_string(m.attention_activation);
  if (key == "no_spatial_features")
    return m.no_spatial_features ? "true" : "false";
  if (key == "temporal_only_graph")
    return m.temporal_only_graph ? "true" : "false";
  if (key == "st_coordinate_graph")
    return m.st_coordinate_graph ? "true" : "false";
  if (key == "ssgnn_source_feature")
    return m.ssgnn_source_feature ? "true" : "false";
  if (key == "lr") return format_double(config.lr);
  if (key == "clip") return format_double(config.clip);
  if (key == "iterations") return std::to_string(config.iterations);
  if (key == "batch_size") return std::to_string(config.batch_size);
  if (key == "seed") return std::to_string(config.seed);
  if (key == "emd_scale") return format_double(config.emd_scale);
  if (key == "gen_generator") return config.gen_generator;
  if (key == "gen_points") return std::to_string(config.gen_points);
  if (key == "gen_frames") return std::to_string(config.gen_frames);
  if (key == "gen_train_count") return std::to_string(config.gen_train_count);
  if (key == "gen_test_count") return std::to_string(config.gen_test_count);
  if (key == "gen_glyph_count") return std::to_string(config.gen_glyph_count);
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
  RunConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config file '" + path.string() + "' line " +
                        std::to_string(line_no) + ": expected key = value");
    apply_override(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

void save_run_config(const RunConfig& config,
                     const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os)
    throw ConfigError("cannot write config file '" + path.string() + "'");
  for (const std::string& key : run_config_keys())
    os << key << " = " << config_value(config, key) << "\n";
}

void validate_run_config(const RunConfig& config) {
  validate_model(config.model);
  if (!(config.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(config.clip > 0.0)) throw ConfigError("clip must be positive");
  if (config.iterations < 0) throw ConfigError("iterations must be >= 0");
  if (config.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(config.emd_scale > 0.0)) throw ConfigError("emd_scale must be positive");
  if (config.gen_generator != "rigid" && config.gen_generator != "articulated")
    throw ConfigError("gen_generator must be rigid or articulated");
  if (config.gen_points < 2) throw ConfigError("gen_points must be >= 2");
  if (config.gen_frames < 2) throw ConfigError("gen_frames must be >= 2");
  if (config.gen_train_count < 0 || config.gen_test_count < 0)
    throw ConfigError("generation counts must be >= 0");
  if (config.gen_train_count + config.gen_test_count < 1)
    throw ConfigError("nothing to generate: both split counts are zero");
  if (config.gen_glyph_count < 1 || config.gen_glyph_count > 2)
    throw ConfigError("gen_glyph_count must be 1 or 2");
}

std::vector<std::filesystem::path> generate_dataset(
    const RunConfig& config, const std::filesystem::path& out_dir) {
  validate_run_config(config);
  std::vector<std::filesystem::path> manifests;
  const int total = config.gen_train_count + config.gen_test_count;
  for (int i = 0; i < total; ++i) {
    const std::uint64_t seed = config.seed + std::uint64_t(i);
    SequenceData seq;
    if (config.gen_generator == "rigid") {
      RigidConfig rc;
      rc.points = config.gen_points;
      rc.frames = config.gen_frames;
      rc.glyph_count = config.gen_glyph_count;
      seq = gen_rigid(rc, seed);
    } else {
      ArticulatedConfig ac;
      ac.points = config.gen_points;
      ac.frames = config.gen_frames;
      seq = gen_articulated(ac, seed);
    }
    seq.split = i < config.gen_train_count ? "train" : "test";
    const std::filesystem::path dir = out_dir / seq.name;
    save_sequence(seq, dir);
    manifests.push_back(dir / "manifest.json");
  }
  return manifests;
}

std::vector<SequenceData> load_split(const std::filesystem::path& root,
                                     const std::string& split) {
  std::vector<SequenceData> out;
  for (const std::filesystem::path& manifest : find_manifests(root)) {
    SequenceData seq = load_sequence(manifest);
    if (split.empty() || seq.split == split) out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

void write_curve_csv(const std::filesystem::path& path,
                     const std::vector<CurvePoint>& curve) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write loss curve '" + path.string() + "'");
  os << "iteration,loss,cd,emd\n";
  for (const CurvePoint& p : curve)
    os << p.iteration << ',' << format_double(p.loss) << ','
       << format_double(p.cd) << ',' << format_double(p.emd) << "\n";
}

}  // namespace

TrainResult train(const RunConfig& config,
                  const std::vector<SequenceData>& data,
                  const std::filesystem::path& run_dir) {
  validate_run_config(config);
  if (data.empty()) throw ConfigError("train: no training sequences");
  for (const SequenceData& seq : data)
    if (seq.length() < 2)
      throw ConfigError("train: sequence '" + seq.name +
                        "' has fewer than two frames");

  std::filesystem::create_directories(run_dir);
  save_run_config(config, run_dir / "config.txt");

  ParameterStore store(config.seed);
  register_model(store, config.model);

  AdamConfig adam;
  adam.learning_rate = config.lr;
  adam.clip = config.clip;

  TrainResult result;
  result.checkpoint = run_dir / "checkpoint.bin";
  result.curve_csv = run_dir / "curve.csv";

  // Batch sampling gets its own stream so it cannot collide with the
  // initialization draws.
  std::mt19937_64 batch_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  for (int iteration = 1; iteration <= config.iterations; ++iteration) {
    store.zero_grads();
    double loss_sum = 0.0, cd_sum = 0.0, emd_sum = 0.0;

    // Draw every batch member first (one draw per member, in batch order),
    // then stack members of equal frame count into one tape so the matrix
    // work of the whole batch runs at batch scale instead of per sequence.
    std::vector<const SequenceData*> members(std::size_t(config.batch_size));
    for (const SequenceData*& member : members)
      member = &data[std::size_t(batch_rng() % std::uint64_t(data.size()))];
    std::map<int, std::vector<const SequenceData*>> by_length;
    for (const SequenceData* member : members)
      by_length[member->length()].push_back(member);

    for (const auto& [length, group] : by_length) {
      const int steps = length - 1;
      const std::size_t n_seq = group.size();
      std::vector<Index> segments(n_seq + 1, 0);
      for (std::size_t s = 0; s < n_seq; ++s)
        segments[s + 1] = segments[s] + group[s]->frames[0].rows();

      Tape tape;
      std::vector<LevelState> states = initial_states(config.model);
      std::vector<std::vector<Var>> frame_losses(n_seq);
      for (auto& losses : frame_losses) losses.reserve(std::size_t(steps));
      std::vector<double> cd_seq(n_seq, 0.0), emd_seq(n_seq, 0.0);

      for (int t = 0; t < steps; ++t) {
        Matrix input(segments.back(), 3);
        for (std::size_t s = 0; s < n_seq; ++s)
          input.middleRows(segments[s], segments[s + 1] - segments[s]) =
              group[s]->frames[std::size_t(t)];
        StepResult step =
            model_step(tape, store, input, states, config.model,
                       /*forced_alpha=*/nullptr, /*forced_samples=*/nullptr,
                       /*carry_state=*/true, n_seq > 1 ? &segments : nullptr);
        for (std::size_t s = 0; s < n_seq; ++s) {
          Var prediction =
              n_seq > 1 ? slice_rows(step.prediction, segments[s],
                                     segments[s + 1] - segments[s])
                        : step.prediction;
          const Matrix& target = group[s]->frames[std::size_t(t + 1)];
          Var cd = chamfer_loss(prediction, target);
          Var em = emd_loss(prediction, target);
          cd_seq[s] += cd.value()(0, 0);
          emd_seq[s] += em.value()(0, 0);
          frame_losses[s].push_back(add(cd, em));
        }
      }

      // Mean over predicted frames, then over the batch: scale before
      // backward so gradients of all members simply accumulate.
      std::vector<Var> contributions;
      contributions.reserve(n_seq);
      for (std::size_t s = 0; s < n_seq; ++s) {
        Var seq_loss = scale(add_n(frame_losses[s]), 1.0 / double(steps));
        contributions.push_back(
            scale(seq_loss, 1.0 / double(config.batch_size)));
        loss_sum += seq_loss.value()(0, 0) / double(config.batch_size);
        cd_sum += cd_seq[s] / double(steps) / double(config.batch_size);
        emd_sum += emd_seq[s] / double(steps) / double(config.batch_size);
      }
      tape.backward(n_seq == 1 ? contributions.front() : add_n(contributions));
    }

    if (!std::isfinite(loss_sum)) {
      // Parameters have not been touched this iteration; they are the last
      // state that produced a finite loss.
      save_checkpoint(store, result.checkpoint);
      throw NumericError("train: non-finite loss at iteration " +
                         std::to_string(iteration) +
                         "; last good checkpoint saved");
    }
    try {
      optimizer_step(store, adam);
    } catch (const NumericError& e) {
      save_checkpoint(store, result.checkpoint);
      throw NumericError(std::string(e.what()) + " at iteration " +
                         std::to_string(iteration) +
                         "; last good checkpoint saved");
    }

    if (iteration == 1 || iteration % 100 == 0 ||
        iteration == config.iterations)
      result.curve.push_back({iteration, loss_sum, cd_sum, emd_sum});
  }

  save_checkpoint(store, result.checkpoint);
  write_curve_csv(result.curve_csv, result.curve);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

MetricReport mean_metrics(const std::vector<MetricRow>& rows) {
  MetricReport mean;
  if (rows.empty()) return mean;
  for (const MetricRow& row : rows) {
    mean.cd += row.metrics.cd;
    mean.emd += row.metrics.emd;
    mean.cd_tail += row.metrics.cd_tail;
  }
  mean.cd /= double(rows.size());
  mean.emd /= double(rows.size());
  mean.cd_tail /= double(rows.size());
  return mean;
}

}  // namespace

EvalReport eval_short_term(ParameterStore& store, const RunConfig& config,
                           const std::vector<SequenceData>& data) {
  validate_run_config(config);
  if (data.empty()) throw ConfigError("eval: no sequences");
  EvalReport report;
  for (const SequenceData& seq : data) {
    std::vector<LevelState> states = initial_states(config.model);
    std::string sources;
    for (int t = 0; t + 1 < seq.length(); ++t) {
      const Matrix& input = seq.frames[std::size_t(t)];
      const Matrix& target = seq.frames[std::size_t(t + 1)];
      Tape tape;
      StepResult step =
          model_step(tape, store, input, states, config.model,
                     /*forced_alpha=*/nullptr, /*forced_samples=*/nullptr,
                     /*carry_state=*/false);
      sources += 'g';
      report.model_rows.push_back(
          {seq.name, t + 2, evaluate_pair(step.prediction.value(), target)});
      report.baseline_rows.push_back(
          {seq.name, t + 2, evaluate_pair(input, target)});
    }
    report.input_sources.push_back(std::move(sources));
  }
  report.summary.model = mean_metrics(report.model_rows);
  report.summary.baseline = mean_metrics(report.baseline_rows);
  report.summary.frames = int(report.model_rows.size());
  return report;
}

EvalReport eval_long_term(ParameterStore& store, const RunConfig& config,
                          const std::vector<SequenceData>& data) {
  validate_run_config(config);
  if (data.empty()) throw ConfigError("eval: no sequences");
  EvalReport report;
  for (const SequenceData& seq : data) {
    const int half = seq.length() / 2;
    if (half < 1)
      throw ConfigError("eval_long_term: sequence '" + seq.name +
                        "' is too short to split");
    std::vector<LevelState> states = initial_states(config.model);
    const Matrix frozen = seq.frames[std::size_t(half - 1)];
    Matrix fed_back;  // the previous step's prediction
    std::string sources;
    for (int t = 0; t + 1 < seq.length(); ++t) {
      const bool teacher = t < half;
      const Matrix& input = teacher ? seq.frames[std::size_t(t)] : fed_back;
      sources += teacher ? 'g' : 'p';
      Tape tape;
      StepResult step =
          model_step(tape, store, input, states, config.model,
                     /*forced_alpha=*/nullptr, /*forced_samples=*/nullptr,
                     /*carry_state=*/false);
      Matrix prediction = step.prediction.value();
      if (!prediction.allFinite())
        throw NumericError("eval_long_term: non-finite rollout output for '" +
                           seq.name + "' at frame " + std::to_string(t + 2));
      if (t + 1 >= half) {
        const Matrix& target = seq.frames[std::size_t(t + 1)];
        report.model_rows.push_back(
            {seq.name, t + 2, evaluate_pair(prediction, target)});
        report.baseline_rows.push_back(
            {seq.name, t + 2, evaluate_pair(frozen, target)});
      }
      fed_back = std::move(prediction);
    }
    report.input_sources.push_back(std::move(sources));
  }
  report.summary.model = mean_metrics(report.model_rows);
  report.summary.baseline = mean_metrics(report.baseline_rows);
  report.summary.frames = int(report.model_rows.size());
  return report;
}

void write_eval_report(const EvalReport& report, const RunConfig& config,
                       const std::string& protocol,
                       const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_metrics_csv(out_dir / ("metrics_model_" + protocol + ".csv"),
                    report.model_rows);
  write_metrics_csv(out_dir / ("metrics_baseline_" + protocol + ".csv"),
                    report.baseline_rows);
  std::ofstream os(out_dir / ("summary_" + protocol + ".txt"));
  if (!os) throw ConfigError("cannot write eval summary");
  auto line = [&](const char* who, const MetricReport& m) {
    os << who << " cd " << format_double(m.cd) << " emd "
       << format_double(m.emd) << " (x" << format_double(config.emd_scale)
       << " = " << format_double(m.emd * config.emd_scale) << ") cd_tail "
       << format_double(m.cd_tail) << "\n";
  };
  os << "protocol " << protocol << "\n";
  os << "frames " << report.summary.frames << "\n";
  line("model", report.summary.model);
  line("baseline", report.summary.baseline);
}

}  // namespace agar
