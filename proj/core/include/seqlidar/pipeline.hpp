// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "seqlidar/diffusion.hpp"
#include "seqlidar/equirect.hpp"
#include "seqlidar/lidar4dnet.hpp"
#include "seqlidar/metrics.hpp"
#include "seqlidar/scene.hpp"

namespace seqlidar {

struct DataConfig {
  std::size_t frames = 4;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct TrainConfig {
  std::size_t batch = 2;
  std::size_t steps = 20000;
  double lr = 2e-4;
  // Cosine decay from lr to lr_min over the first lr_decay_steps; 0 keeps lr constant.
  std::size_t lr_decay_steps = 0;
  double lr_min = 0.0;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;
  std::size_t keep_checkpoints = 3;  // older checkpoints are pruned
  double t_floor = kDefaultTFloor;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct SampleConfig {
  int steps = 256;
  std::uint64_t seed = 0;
  bool clip_denoised = true;
  bool use_ema = true;
  double min_range = 1.0;  // metres; generated bins closer than this are dropped
  friend bool operator==(const SampleConfig&, const SampleConfig&) = default;
};

struct EvalSection {
  std::uint64_t extractor_seed = 0;
  std::size_t clip_frames = 5;
  std::size_t bev_grid = 64;
  double bev_radius = 40.0;
  friend bool operator==(const EvalSection&, const EvalSection&) = default;
};

/// Everything a command needs. The text form is `key = value` lines under
/// `[section]` headers; unknown keys are rejected.
struct RunConfig {
  SensorConfig sensor;
  WorldParams world;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  SampleConfig sample;
  EvalSection eval;

  RunConfig();
  void validate() const;
  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Applies one `section.key=value` override.
  void set(const std::string& dotted_key, const std::string& value);
  EvalConfig eval_config() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Learning rate for a 1-based optimizer step.
double learning_rate(const TrainConfig& train, std::size_t step);

/// Directory holding the data root when a path is relative: $SEQLIDAR_DATA_ROOT.
std::filesystem::path resolve_data_path(const std::filesystem::path& p);

// ---- synth ------------------------------------------------------------------

/// Writes `count` sequences (seed_i = mix_seed(seed, i)) under out_dir/<seed_i>/
/// plus manifest.txt, config.txt and seed.txt.
void cmd_synth(const RunConfig& cfg, const std::filesystem::path& out_dir, std::size_t count, std::uint64_t seed);

// ---- train ------------------------------------------------------------------

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::size_t first_step = 0;  // 1 on a fresh run, k + 1 after resuming at k
  std::size_t last_step = 0;
  std::vector<TrainRecord> records;  // this invocation only
};

/// Called after every optimizer step; returning false stops training after the
/// step has been logged.
using TrainObserver = std::function<bool(const TrainRecord&)>;

/// Trains on every sequence listed in data_dir/manifest.txt. Writes
/// out_dir/train.log and checkpoints under out_dir/checkpoints/, and resumes
/// from the latest checkpoint when one exists.
TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                      const TrainObserver& observer = {});

/// Directory of the most recent checkpoint of a run, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);

/// Model with weights from a checkpoint directory (EMA weights when requested).
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Lidar4DNet<float>> net;
  std::size_t step = 0;
};
LoadedModel load_checkpoint(const std::filesystem::path& checkpoint, bool use_ema);

// ---- sample -----------------------------------------------------------------

/// Per-sequence conditions in model layout ([F,2,H,W] sketch and prior).
struct ConditionBundle {
  Tensor<float> sketch;
  Tensor<float> prior;
  std::vector<std::int32_t> caption;
  std::size_t frames() const { return sketch.dim(0); }
};
ConditionBundle bundle_of(const SequenceSample& s);

/// Generated channels [F,2,H,W] for one bundle.
Tensor<float> generate(const Lidar4DNet<float>& net, const ConditionBundle& cond, const SensorConfig& sensor,
                       const SamplerConfig& sampler);

struct SampleOverrides {
  std::optional<int> steps;
  std::optional<bool> use_ema;
};

/// `checkpoint` may be a run directory (latest checkpoint) or a checkpoint
/// directory; `conditions_dir` a sequence directory or a dataset root.
/// Writes out_dir/<name>/{frame,mask}_k.l4dt, cloud_k.ply, bev_k.pgm.
void cmd_sample(const std::filesystem::path& checkpoint, const std::filesystem::path& conditions_dir,
                const std::filesystem::path& out_dir, std::uint64_t seed, const SampleOverrides& overrides = {});

// ---- edit ---------------------------------------------------------------------

struct EditOp {
  enum class Kind { kAddBox, kRemoveBox, kSetCaptionToken, kRegeneratePrior };
  Kind kind = Kind::kAddBox;
  ObjectCondition object;       // add_box
  std::vector<int> frames;      // add_box; empty = every frame
  // Angles (theta, phi, heading) are radians.
  int box_id = -1;              // remove_box, regenerate_prior
  CaptionSlot slot = CaptionSlot::kTime;
  std::string token;            // set_caption_token
  std::size_t line = 0;
  std::string text;
};

struct EditScript {
  std::vector<EditOp> ops;
  static EditScript parse(const std::string& text);
};

struct EditOutcome {
  SequenceSample sample;
  std::vector<bool> frame_touched;  // sketch or prior re-rendered
  bool caption_changed = false;
  bool boxes_changed = false;
};

/// Throws EditError naming the offending line.
EditOutcome apply_edits(const SequenceSample& sample, const EditScript& script, const SensorConfig& sensor);

/// Copies sample_dir to out_dir, then rewrites only what the script touches.
/// Without a sensor the one from find_run_config(sample_dir) is used.
void cmd_edit(const std::filesystem::path& sample_dir, const std::filesystem::path& script_file,
              const std::filesystem::path& out_dir, const std::optional<SensorConfig>& sensor = std::nullopt);

// ---- eval ---------------------------------------------------------------------

/// Evaluates with the configuration found beside the runs and writes the
/// key=value report to out_file.
EvalReport cmd_eval(const std::filesystem::path& gen_dir, const std::filesystem::path& ref_dir,
                    const std::filesystem::path& out_file);

/// config.txt in `dir` or its parent.
RunConfig find_run_config(const std::filesystem::path& dir);

}  // namespace seqlidar
