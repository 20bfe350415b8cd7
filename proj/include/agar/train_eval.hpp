#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "agar/data_synth.hpp"
#include "agar/loss_metrics.hpp"
#include "agar/model.hpp"

namespace agar {

/**
 * Everything a reproducible run needs: the model architecture, the training
 * schedule, and the data-generation recipe. Serialized as `key = value`
 * lines; command-line overrides use the same keys. Unknown keys are
 * rejected.
 */
struct RunConfig {
  // Runs default to desk scale (widths a quarter of the reference
  // architecture, k halved) so the full suite stays CPU-friendly; the
  // reference-scale values are plain overrides.
  RunConfig() {
    model.ssgnn_widths = {16, 32, 32};
    model.dynamic_width = 32;
    model.fused_width = 32;
    model.k_coordinate = 4;
    model.k_present = {4};
    model.k_past = {4};
  }

  ModelConfig model;

  double lr = 1e-4;
  double clip = 5.0;
  int iterations = 2000;
  int batch_size = 4;
  std::uint64_t seed = 1;
  double emd_scale = 1.0;  // display multiplier for EMD in summaries

  // gen-data recipe
  std::string gen_generator = "rigid";  // rigid | articulated
  Index gen_points = 128;
  int gen_frames = 20;
  int gen_train_count = 8;
  int gen_test_count = 4;
  int gen_glyph_count = 1;
};

// The known override keys, in serialization order.
std::vector<std::string> run_config_keys();

// Sets one field from its textual form; ConfigError names unknown keys and
// unparseable values.
void apply_override(RunConfig& config, const std::string& key,
                    const std::string& value);

// Reads a `key = value` file ('#' comments, blank lines ignored).
RunConfig load_run_config(const std::filesystem::path& path);

// Writes every key so a run directory replays bit-identically.
void save_run_config(const RunConfig& config,
                     const std::filesystem::path& path);

// Field-level validation (model fields included).
void validate_run_config(const RunConfig& config);

// Generates gen_train_count + gen_test_count sequences (seeds seed, seed+1,
// ...; the tail gets split "test") and writes one manifest directory each.
std::vector<std::filesystem::path> generate_dataset(
    const RunConfig& config, const std::filesystem::path& out_dir);

// Loads every manifest under `root` with the given split ("" = all).
std::vector<SequenceData> load_split(const std::filesystem::path& root,
                                     const std::string& split);

struct CurvePoint {
  int iteration = 0;
  double loss = 0.0;
  double cd = 0.0;
  double emd = 0.0;
};

struct TrainResult {
  std::vector<CurvePoint> curve;  // iteration 1, every 100th, and the last
  std::filesystem::path checkpoint;
  std::filesystem::path curve_csv;
};

/**
 * Self-supervised training: per iteration, sample a batch of sequences,
 * reset recurrent states, unroll teacher-forced prediction over frames
 * 1..T-1 on one tape, average the per-frame combined loss over frames then
 * over the batch, backpropagate through time, and take one clipped Adam
 * step. Writes config, loss curve and checkpoint into run_dir. A non-finite
 * loss or gradient aborts with NumericError after saving the last good
 * checkpoint.
 */
TrainResult train(const RunConfig& config,
                  const std::vector<SequenceData>& data,
                  const std::filesystem::path& run_dir);

struct EvalSummary {
  MetricReport model;     // mean over frames and sequences
  MetricReport baseline;  // copy-last (short term) / copy-frozen (long term)
  int frames = 0;
};

struct EvalReport {
  std::vector<MetricRow> model_rows;
  std::vector<MetricRow> baseline_rows;
  EvalSummary summary;
  // One entry per prediction step per sequence: 'g' if the step consumed a
  // ground-truth frame, 'p' if it consumed a fed-back prediction.
  std::vector<std::string> input_sources;
};

// Teacher-forced evaluation: every step consumes the ground-truth frame;
// metrics for each predicted frame 2..T against its target. Baseline:
// copy-last-input.
EvalReport eval_short_term(ParameterStore& store, const RunConfig& config,
                           const std::vector<SequenceData>& data);

// Rollout evaluation: ground-truth inputs through frame T/2, then the
// model's own predictions are fed back; metrics over predicted frames
// T/2+1..T. Baseline: the frozen frame T/2. Non-finite rollout output is a
// NumericError.
EvalReport eval_long_term(ParameterStore& store, const RunConfig& config,
                          const std::vector<SequenceData>& data);

// metrics_model.csv, metrics_baseline.csv and summary.txt under out_dir.
void write_eval_report(const EvalReport& report, const RunConfig& config,
                       const std::string& protocol,
                       const std::filesystem::path& out_dir);

}  // namespace agar
