// SPDX-License-Identifier: Apache-2.0
// seqlidar: synth, train, sample, edit and eval from the command line.
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "seqlidar/errors.hpp"
#include "seqlidar/pipeline.hpp"

namespace fs = std::filesystem;
using namespace seqlidar;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kIngestion = 3, kTraining = 4 };

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "Run configuration file");
  cmd->add_option("--set", c.overrides, "Override one key, e.g. --set train.lr=1e-3")->allow_extra_args(false);
}

// --config, else `fallback`'s config.txt (or its parent's), else defaults; then --set.
RunConfig build_config(const Common& c, const std::optional<fs::path>& fallback = std::nullopt) {
  RunConfig cfg;
  if (!c.config_file.empty()) {
    cfg = RunConfig::load(resolve_data_path(c.config_file));
  } else if (fallback && (fs::exists(*fallback / "config.txt") || fs::exists(fallback->parent_path() / "config.txt"))) {
    cfg = find_run_config(*fallback);
  }
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential LiDAR scene generation with a 4D diffusion model"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "seqlidar 0.1.0");

  // config
  Common config_opts;
  auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
  add_common(config_cmd, config_opts);

  // synth
  Common synth_opts;
  std::string synth_out;
  std::size_t synth_count = 8;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Simulate a dataset of sequences");
  add_common(synth, synth_opts);
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--count", synth_count, "Number of sequences")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Dataset seed")->capture_default_str();

  // train
  Common train_opts;
  std::string train_data, train_out;
  std::size_t log_every = 100;
  auto* train = app.add_subcommand("train", "Train or resume a model on a dataset");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "Dataset directory (with manifest.txt)")->required();
  train->add_option("--out", train_out, "Run directory; resumes from its latest checkpoint")->required();
  train->add_option("--log-every", log_every, "Print the loss every N steps (0 = quiet)")->capture_default_str();

  // sample
  std::string ckpt, cond_dir, sample_out;
  std::uint64_t sample_seed = 0;
  std::optional<int> sample_steps;
  bool raw_weights = false;
  auto* sample = app.add_subcommand("sample", "Generate sequences for condition bundles");
  sample->add_option("--checkpoint", ckpt, "Run directory or checkpoint directory")->required();
  sample->add_option("--conditions", cond_dir, "Sequence directory or dataset directory")->required();
  sample->add_option("--out", sample_out, "Output directory")->required();
  sample->add_option("--seed", sample_seed, "Sampler seed")->capture_default_str();
  sample->add_option("--steps", sample_steps, "Sampler steps (default from the checkpoint config)");
  sample->add_flag("--raw-weights", raw_weights, "Use the raw weights instead of the EMA weights");

  // edit
  Common edit_opts;
  std::string edit_sample, edit_script, edit_out;
  auto* edit = app.add_subcommand("edit", "Apply an edit script to a sequence's conditions");
  add_common(edit, edit_opts);
  edit->add_option("--sample", edit_sample, "Sequence directory")->required();
  edit->add_option("--script", edit_script, "Edit script")->required();
  edit->add_option("--out", edit_out, "Output directory (must not exist or be empty)")->required();

  // eval
  std::string gen_dir, ref_dir, eval_out = "metrics.txt";
  auto* eval = app.add_subcommand("eval", "Compare generated and reference runs");
  eval->add_option("--gen", gen_dir, "Generated run directory")->required();
  eval->add_option("--ref", ref_dir, "Reference run directory")->required();
  eval->add_option("--out", eval_out, "Report file")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*config_cmd) {
      std::cout << build_config(config_opts).to_text();
    } else if (*synth) {
      const RunConfig cfg = build_config(synth_opts);
      const fs::path out = resolve_data_path(synth_out);
      cmd_synth(cfg, out, synth_count, synth_seed);
      std::cout << "wrote " << synth_count << " sequences to " << out.string() << "\n";
    } else if (*train) {
      const fs::path data = resolve_data_path(train_data);
      const fs::path out = resolve_data_path(train_out);
      const RunConfig cfg = build_config(train_opts, data);
      const TrainResult r = cmd_train(cfg, data, out, [&](const TrainRecord& rec) {
        if (log_every && rec.step % log_every == 0) std::cout << "step " << rec.step << " loss " << rec.loss << std::endl;
        return true;
      });
      std::cout << "trained steps " << r.first_step << ".." << r.last_step << "; log in " << (out / "train.log").string()
                << "\n";
    } else if (*sample) {
      SampleOverrides o;
      o.steps = sample_steps;
      if (raw_weights) o.use_ema = false;
      const fs::path out = resolve_data_path(sample_out);
      cmd_sample(resolve_data_path(ckpt), resolve_data_path(cond_dir), out, sample_seed, o);
      std::cout << "wrote samples to " << out.string() << "\n";
    } else if (*edit) {
      const fs::path src = resolve_data_path(edit_sample);
      std::optional<SensorConfig> sensor;
      if (!edit_opts.config_file.empty() || !edit_opts.overrides.empty()) sensor = build_config(edit_opts, src).sensor;
      cmd_edit(src, resolve_data_path(edit_script), resolve_data_path(edit_out), sensor);
      std::cout << "wrote edited sequence to " << resolve_data_path(edit_out).string() << "\n";
    } else if (*eval) {
      const EvalReport r = cmd_eval(resolve_data_path(gen_dir), resolve_data_path(ref_dir), resolve_data_path(eval_out));
      std::cout << r.to_table();
    }
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIngestion;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
