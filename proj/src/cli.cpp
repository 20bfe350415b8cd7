#include "agar/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "agar/combine.hpp"
#include "agar/train_eval.hpp"

namespace agar {

namespace {

// Loads --config if given (defaults otherwise) and applies key=value
// overrides in order.
RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  RunConfig config;
  if (!config_path.empty()) config = load_run_config(config_path);
  for (const std::string& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + item + "' is not of the form key=value");
    apply_override(config, item.substr(0, eq), item.substr(eq + 1));
  }
  validate_run_config(config);
  return config;
}

std::filesystem::path require_dir(const std::string& value, const char* flag) {
  if (value.empty())
    throw ConfigError(std::string(flag) + " is required for this command");
  return value;
}

void print_metric_line(const char* who, const MetricReport& m, double scale) {
  std::printf("  %-9s  CD %-12.6g EMD %-12.6g (x%g: %-10.6g) CD tail %-12.6g\n",
              who, m.cd, m.emd, scale, m.emd * scale, m.cd_tail);
}

int cmd_gen_data(const RunConfig& config, const std::string& out) {
  const auto manifests =
      generate_dataset(config, require_dir(out, "--out"));
  std::printf("wrote %zu sequences under %s\n", manifests.size(), out.c_str());
  return 0;
}

int cmd_train(const RunConfig& config, const std::string& data,
              const std::string& run) {
  const auto data_dir = require_dir(data, "--data");
  const auto run_dir = require_dir(run, "--run");
  const std::vector<SequenceData> split = load_split(data_dir, "train");
  TrainResult result = train(config, split, run_dir);
  if (!result.curve.empty()) {
    const CurvePoint& first = result.curve.front();
    const CurvePoint& last = result.curve.back();
    std::printf("iterations %d  loss %.6g -> %.6g\n", last.iteration,
                first.loss, last.loss);
  }
  std::printf("checkpoint %s\n", result.checkpoint.string().c_str());
  return 0;
}

// Shared model loading for eval/explain: the run directory supplies the
// persisted config and checkpoint unless explicit paths override them.
RunConfig load_run(const std::string& run, const std::string& config_path,
                   const std::string& checkpoint,
                   const std::vector<std::string>& overrides,
                   ParameterStore& store) {
  std::filesystem::path cfg =
      config_path.empty() ? std::filesystem::path(require_dir(run, "--run")) /
                                "config.txt"
                          : std::filesystem::path(config_path);
  RunConfig config;
  config = load_run_config(cfg);
  for (const std::string& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + item + "' is not of the form key=value");
    apply_override(config, item.substr(0, eq), item.substr(eq + 1));
  }
  validate_run_config(config);
  register_model(store, config.model);
  const std::filesystem::path ckpt =
      checkpoint.empty()
          ? std::filesystem::path(require_dir(run, "--run")) / "checkpoint.bin"
          : std::filesystem::path(checkpoint);
  load_checkpoint(store, ckpt);
  return config;
}

int cmd_eval(const std::string& run, const std::string& config_path,
             const std::string& checkpoint, const std::string& data,
             const std::string& out,
             const std::vector<std::string>& overrides) {
  ParameterStore store(0);
  const RunConfig config =
      load_run(run, config_path, checkpoint, overrides, store);
  const std::vector<SequenceData> split =
      load_split(require_dir(data, "--data"), "test");
  const std::filesystem::path out_dir =
      out.empty() ? std::filesystem::path(run) : std::filesystem::path(out);

  EvalReport short_term = eval_short_term(store, config, split);
  write_eval_report(short_term, config, "short_term", out_dir);
  EvalReport long_term = eval_long_term(store, config, split);
  write_eval_report(long_term, config, "long_term", out_dir);

  std::printf("short-term (%d frames)\n", short_term.summary.frames);
  print_metric_line("model", short_term.summary.model, config.emd_scale);
  print_metric_line("copy-last", short_term.summary.baseline, config.emd_scale);
  std::printf("long-term (%d frames)\n", long_term.summary.frames);
  print_metric_line("model", long_term.summary.model, config.emd_scale);
  print_metric_line("copy-frozen", long_term.summary.baseline,
                    config.emd_scale);
  return 0;
}

int cmd_explain(const std::string& run, const std::string& config_path,
                const std::string& checkpoint, const std::string& data,
                const std::string& out,
                const std::vector<std::string>& overrides) {
  ParameterStore store(0);
  const RunConfig config =
      load_run(run, config_path, checkpoint, overrides, store);
  const std::vector<SequenceData> split =
      load_split(require_dir(data, "--data"), "test");
  if (split.empty()) throw ConfigError("explain: no test sequences");
  const std::filesystem::path out_dir =
      out.empty() ? std::filesystem::path(run) / "explain"
                  : std::filesystem::path(out);
  std::filesystem::create_directories(out_dir);
  int written = 0;
  for (const SequenceData& seq : split) {
    std::vector<LevelState> states = initial_states(config.model);
    for (int t = 0; t + 1 < seq.length(); ++t) {
      MotionBreakdown breakdown = explain_step(
          store, seq.frames[std::size_t(t)], states, config.model);
      char name[64];
      std::snprintf(name, sizeof(name), "attention_%s_f%03d.csv",
                    seq.name.c_str(), t + 2);
      write_attention_report(out_dir / name, breakdown);
      ++written;
    }
  }
  std::printf("wrote %d attention reports under %s\n", written,
              out_dir.string().c_str());
  return 0;
}

int cmd_grad_check(const RunConfig& config) {
  ParameterStore store(config.seed);
  register_model(store, config.model);

  // Deterministic toy: a small rigid sequence, two prediction steps, the
  // training loss — exercising every parameter group end to end.
  RigidConfig rc;
  rc.points = 8;
  rc.frames = 3;
  const SequenceData toy = gen_rigid(rc, config.seed);
  const ModelConfig model = config.model;

  ScalarFn fn = [&](Tape& tape) {
    std::vector<LevelState> states = initial_states(model);
    std::vector<Var> losses;
    for (int t = 0; t + 1 < toy.length(); ++t) {
      StepResult step = model_step(tape, store, toy.frames[std::size_t(t)],
                                   states, model);
      losses.push_back(
          combined_loss(step.prediction, toy.frames[std::size_t(t + 1)]));
    }
    return scale(add_n(losses), 1.0 / double(toy.length() - 1));
  };

  GradCheckOptions options;
  GradCheckReport report = grad_check(fn, store, options);
  std::printf("max relative error %.3e over %d sampled coordinates\n",
              report.max_rel_error, report.checked);
  if (!report.pass(1e-4)) {
    std::printf("worst entry: %s[%lld]\n", report.worst.parameter.c_str(),
                (long long)report.worst.index);
    return 2;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Point-cloud sequence motion prediction"};
  app.require_subcommand(1);

  std::string config_path, run_dir, data_dir, checkpoint, out_dir;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* cmd, bool with_config = true) {
    if (with_config)
      cmd->add_option("--config", config_path, "configuration file");
    cmd->add_option("overrides", overrides, "key=value overrides");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "write synthetic sequences");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory")->required();

  CLI::App* tr = app.add_subcommand("train", "train a model");
  add_common(tr);
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--run", run_dir, "run directory for outputs")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--run", run_dir, "run directory (config + checkpoint)");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--out", out_dir, "output directory (default: run dir)");

  CLI::App* ex = app.add_subcommand("explain", "export attention reports");
  add_common(ex);
  ex->add_option("--run", run_dir, "run directory (config + checkpoint)");
  ex->add_option("--checkpoint", checkpoint, "checkpoint file");
  ex->add_option("--data", data_dir, "dataset directory")->required();
  ex->add_option("--out", out_dir, "output directory");

  CLI::App* gc = app.add_subcommand("grad-check",
                                    "verify gradients against finite "
                                    "differences on a toy problem");
  add_common(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(resolve_config(config_path, overrides), out_dir);
    if (tr->parsed())
      return cmd_train(resolve_config(config_path, overrides), data_dir,
                       run_dir);
    if (ev->parsed())
      return cmd_eval(run_dir, config_path, checkpoint, data_dir, out_dir,
                      overrides);
    if (ex->parsed())
      return cmd_explain(run_dir, config_path, checkpoint, data_dir, out_dir,
                         overrides);
    if (gc->parsed())
      return cmd_grad_check(resolve_config(config_path, overrides));
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace agar
