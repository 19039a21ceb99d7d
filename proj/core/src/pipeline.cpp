// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/pipeline.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <type_traits>

#include "seqlidar/autograd.hpp"
#include "seqlidar/errors.hpp"
#include "seqlidar/optim.hpp"

namespace seqlidar {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string fmt(double v) {
  std::array<char, 32> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}
std::string fmt(bool v) { return v ? "true" : "false"; }
template <typename I>
  requires std::is_integral_v<I>
std::string fmt(I v) {
  return std::to_string(v);
}
template <std::size_t N>
std::string fmt(const std::array<double, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + fmt(a[i]);
  return s;
}

template <typename V>
bool parse_number(const std::string& s, V& out) {
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, out);
  return r.ec == std::errc() && r.ptr == end;
}

void parse(const std::string& s, double& out, const std::string& key) {
  if (!parse_number(s, out)) throw ConfigError(key + ": not a number: '" + s + "'");
}
void parse(const std::string& s, bool& out, const std::string& key) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError(key + ": not a boolean: '" + s + "'");
}
template <typename I>
  requires std::is_integral_v<I>
void parse(const std::string& s, I& out, const std::string& key) {
  if (!parse_number(s, out)) throw ConfigError(key + ": not an integer: '" + s + "'");
}
template <std::size_t N>
void parse(const std::string& s, std::array<double, N>& out, const std::string& key) {
  const auto parts = split(s, ',');
  if (parts.size() != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
  for (std::size_t i = 0; i < N; ++i) parse(parts[i], out[i], key);
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename S, typename M>
Field field(const char* section, const char* key, S RunConfig::*sub, M S::*member) {
  const std::string name = std::string(section) + "." + key;
  return {section, key, [=](const RunConfig& c) { return fmt(c.*sub.*member); },
          [=](RunConfig& c, const std::string& v) { parse(v, c.*sub.*member, name); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using R = RunConfig;
    return std::vector<Field>{
        field("sensor", "H", &R::sensor, &SensorConfig::H),
        field("sensor", "W", &R::sensor, &SensorConfig::W),
        field("sensor", "elev_min", &R::sensor, &SensorConfig::elev_min),
        field("sensor", "elev_max", &R::sensor, &SensorConfig::elev_max),
        field("sensor", "d_max", &R::sensor, &SensorConfig::d_max),
        field("sensor", "has_reflectance", &R::sensor, &SensorConfig::has_reflectance),
        field("world", "min_agents", &R::world, &WorldParams::min_agents),
        field("world", "max_agents", &R::world, &WorldParams::max_agents),
        field("world", "min_props", &R::world, &WorldParams::min_props),
        field("world", "max_props", &R::world, &WorldParams::max_props),
        field("world", "time_weights", &R::world, &WorldParams::time_weights),
        field("world", "weather_weights", &R::world, &WorldParams::weather_weights),
        field("world", "background_weights", &R::world, &WorldParams::background_weights),
        field("world", "category_weights", &R::world, &WorldParams::category_weights),
        field("world", "max_agent_speed", &R::world, &WorldParams::max_agent_speed),
        field("world", "max_ego_speed", &R::world, &WorldParams::max_ego_speed),
        field("world", "sensor_height", &R::world, &WorldParams::sensor_height),
        field("world", "spawn_radius", &R::world, &WorldParams::spawn_radius),
        field("data", "frames", &R::data, &DataConfig::frames),
        field("model", "scales", &R::model, &ModelConfig::scales),
        field("model", "channels", &R::model, &ModelConfig::channels),
        field("model", "fourier_k", &R::model, &ModelConfig::fourier_k),
        field("model", "heads", &R::model, &ModelConfig::heads),
        field("model", "blocks", &R::model, &ModelConfig::blocks),
        field("model", "vocab", &R::model, &ModelConfig::vocab),
        field("model", "time_dim", &R::model, &ModelConfig::time_dim),
        field("model", "control", &R::model, &ModelConfig::control),
        field("model", "init_seed", &R::model, &ModelConfig::init_seed),
        field("train", "batch", &R::train, &TrainConfig::batch),
        field("train", "steps", &R::train, &TrainConfig::steps),
        field("train", "lr", &R::train, &TrainConfig::lr),
        field("train", "lr_decay_steps", &R::train, &TrainConfig::lr_decay_steps),
        field("train", "lr_min", &R::train, &TrainConfig::lr_min),
        field("train", "ema_decay", &R::train, &TrainConfig::ema_decay),
        field("train", "seed", &R::train, &TrainConfig::seed),
        field("train", "checkpoint_every", &R::train, &TrainConfig::checkpoint_every),
        field("train", "keep_checkpoints", &R::train, &TrainConfig::keep_checkpoints),
        field("train", "t_floor", &R::train, &TrainConfig::t_floor),
        field("sample", "steps", &R::sample, &SampleConfig::steps),
        field("sample", "seed", &R::sample, &SampleConfig::seed),
        field("sample", "clip_denoised", &R::sample, &SampleConfig::clip_denoised),
        field("sample", "use_ema", &R::sample, &SampleConfig::use_ema),
        field("sample", "min_range", &R::sample, &SampleConfig::min_range),
        field("eval", "extractor_seed", &R::eval, &EvalSection::extractor_seed),
        field("eval", "clip_frames", &R::eval, &EvalSection::clip_frames),
        field("eval", "bev_grid", &R::eval, &EvalSection::bev_grid),
        field("eval", "bev_radius", &R::eval, &EvalSection::bev_radius),
    };
  }();
  return table;
}

const Field& find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields()) {
    if (f.section == section && f.key == key) return f;
  }
  throw ConfigError("unknown config key " + section + "." + key);
}

// Lines of `a` that differ from `b`, for error messages.
std::string config_diff(const RunConfig& a, const RunConfig& b) {
  std::string out;
  for (const Field& f : fields()) {
    const std::string va = f.get(a), vb = f.get(b);
    if (va != vb) out += "\n  " + f.section + "." + f.key + ": " + va + " vs " + vb;
  }
  return out;
}

std::vector<std::string> read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.txt";
  if (!fs::exists(p)) throw IngestionError("missing files: " + p.string());
  std::vector<std::string> names;
  std::istringstream in(read_file(p));
  for (std::string line; std::getline(in, line);) {
    line = trim(line);
    if (!line.empty()) names.push_back(line);
  }
  if (names.empty()) throw IngestionError("empty manifest: " + p.string());
  return names;
}

std::string join_lines(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += n + "\n";
  return s;
}

std::string indexed(const char* stem, std::size_t k, const char* ext = ".l4dt") {
  return std::string(stem) + "_" + std::to_string(k) + ext;
}

// Stacks equally shaped tensors along a new leading axis.
Tensor<float> stack(const std::vector<const Tensor<float>*>& parts) {
  Shape shape = parts.at(0)->shape();
  std::vector<float> data;
  data.reserve(parts.size() * parts[0]->numel());
  for (const Tensor<float>* t : parts) {
    if (t->shape() != shape) throw DimensionError("stack: mismatched shapes " + shape_str(t->shape()) + " and " + shape_str(shape));
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  shape.insert(shape.begin(), parts.size());
  return Tensor<float>(std::move(shape), std::move(data));
}

Tensor<float> stack(const std::vector<Tensor<float>>& parts) {
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return stack(ptrs);
}

std::string topology(const SensorConfig& s, std::size_t frames) {
  return "H=" + std::to_string(s.H) + " W=" + std::to_string(s.W) + " F=" + std::to_string(frames);
}

// ---- checkpoints ------------------------------------------------------------

struct TrainState {
  std::size_t step = 0;
  double wall = 0.0;
  std::string rng;
};

std::string step_dir_name(std::size_t step) {
  std::string digits = std::to_string(step);
  if (digits.size() < 7) digits.insert(0, 7 - digits.size(), '0');
  return "step_" + digits;
}

std::vector<std::string> param_names(const ParamSet<float>& params) {
  std::vector<std::string> names;
  for (const auto& [n, v] : params.named()) names.push_back(n);
  return names;
}

void write_checkpoint(const fs::path& run_dir, const RunConfig& cfg, const Lidar4DNet<float>& net, const Ema<float>& ema,
                      Adam<float>& adam, const TrainState& state) {
  const fs::path root = run_dir / "checkpoints";
  const fs::path final_dir = root / step_dir_name(state.step);
  const fs::path tmp = root / (step_dir_name(state.step) + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  const auto names = param_names(net.params());
  cfg.save(tmp / "config.txt");
  save_parameters(tmp / "model", net.params());
  save_tensors(tmp / "ema", names, ema.shadow());
  save_tensors(tmp / "adam_m", names, adam.first_moments());
  save_tensors(tmp / "adam_v", names, adam.second_moments());
  write_file(tmp / "state.txt", "step=" + std::to_string(state.step) + "\nwall=" + fmt(state.wall) + "\nrng=" + state.rng + "\n");
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
  write_file(root / "latest.txt.tmp", final_dir.filename().string() + "\n");
  fs::rename(root / "latest.txt.tmp", root / "latest.txt");

  std::vector<fs::path> steps;
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string n = e.path().filename().string();
    if (e.is_directory() && n.starts_with("step_") && n.find('.') == std::string::npos) steps.push_back(e.path());
  }
  std::sort(steps.begin(), steps.end());
  const std::size_t keep = std::max<std::size_t>(1, cfg.train.keep_checkpoints);
  for (std::size_t i = 0; i + keep < steps.size(); ++i) {
    if (steps[i] != final_dir) fs::remove_all(steps[i]);
  }
}

TrainState read_state(const fs::path& ckpt) {
  TrainState st;
  std::istringstream in(read_file(ckpt / "state.txt"));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "step") parse(v, st.step, "state.step");
    else if (k == "wall") parse(v, st.wall, "state.wall");
    else if (k == "rng") st.rng = v;
  }
  return st;
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (auto latest = latest_checkpoint(p)) return *latest;
  if (fs::exists(p / "model" / "index.txt") && fs::exists(p / "config.txt")) return p;
  throw IngestionError("no checkpoint found at " + p.string());
}

// ---- training data ----------------------------------------------------------

struct TrainingSet {
  std::vector<Tensor<float>> x0;  // [F,2,H,W] each
  std::vector<ConditionBundle> cond;
};

TrainingSet load_training_set(const fs::path& data_dir, const RunConfig& cfg) {
  TrainingSet set;
  for (const auto& name : read_manifest(data_dir)) {
    const SequenceSample s = read_sequence(data_dir / name);
    if (s.num_frames() != cfg.data.frames) {
      throw ConfigError("sequence " + name + " has " + std::to_string(s.num_frames()) + " frames; config expects " +
                        std::to_string(cfg.data.frames));
    }
    const Shape want{2, cfg.sensor.H, cfg.sensor.W};
    if (s.frames[0].channels.shape() != want) {
      throw ConfigError("sequence " + name + " is " + shape_str(s.frames[0].channels.shape()) + "; config expects " +
                        shape_str(want));
    }
    std::vector<Tensor<float>> frames;
    for (const auto& f : s.frames) frames.push_back(f.channels);
    set.x0.push_back(stack(frames));
    set.cond.push_back(bundle_of(s));
  }
  return set;
}

// ---- edit helpers ---------------------------------------------------------------

std::string describe(const EditOp& op) { return "line " + std::to_string(op.line) + " (" + op.text + ")"; }

CaptionSlot parse_slot(const std::string& s, const std::string& where) {
  if (s == "time") return CaptionSlot::kTime;
  if (s == "weather") return CaptionSlot::kWeather;
  if (s == "background") return CaptionSlot::kBackground;
  throw EditError(where + ": unknown caption slot '" + s + "' (time, weather, background)");
}

int parse_int(const std::string& s, const std::string& where) {
  int v = 0;
  if (!parse_number(s, v)) throw EditError(where + ": not an integer: '" + s + "'");
  return v;
}

ObjectCondition default_object(Category c) {
  ObjectCondition o;
  o.category = c;
  switch (c) {
    case Category::kCar: o.l = 4.5, o.w = 1.9, o.h = 1.6; break;
    case Category::kTruck: o.l = 8.0, o.w = 2.5, o.h = 3.2; break;
    case Category::kPedestrian: o.l = 0.8, o.w = 0.8, o.h = 1.75; break;
  }
  return o;
}

}  // namespace

// ---- RunConfig -----------------------------------------------------------------

RunConfig::RunConfig() {
  // Desk scale: F=4 frames of 32x128.
  sensor.H = 32;
  sensor.W = 128;
  model.scales = 4;
}

void RunConfig::validate() const {
  sensor.validate();
  world.validate();
  model.validate();
  model.check_grid(sensor.H, sensor.W);
  if (data.frames < 1) throw ConfigError("data.frames must be at least 1");
  if (train.batch < 1) throw ConfigError("train.batch must be at least 1");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(train.lr_min >= 0.0 && train.lr_min <= train.lr)) throw ConfigError("train.lr_min must lie in [0, train.lr]");
  if (!(train.ema_decay >= 0.0 && train.ema_decay < 1.0)) throw ConfigError("train.ema_decay must lie in [0, 1)");
  if (train.checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be at least 1");
  if (!(train.t_floor > 0.0 && train.t_floor < 0.5)) throw ConfigError("train.t_floor must lie in (0, 0.5)");
  if (sample.steps < 1) throw ConfigError("sample.steps must be at least 1");
  if (!(sample.min_range >= 0.0)) throw ConfigError("sample.min_range must be non-negative");
  if (eval.clip_frames < 1) throw ConfigError("eval.clip_frames must be at least 1");
  if (eval.bev_grid < 1) throw ConfigError("eval.bev_grid must be at least 1");
  if (!(eval.bev_radius > 0.0)) throw ConfigError("eval.bev_radius must be positive");
}

std::string RunConfig::to_text() const {
  std::string out = "# seqlidar run configuration; angles in radians, distances in metres\n";
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::string section;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
    find_field(section, trim(line.substr(0, eq))).set(cfg, trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("missing config file " + path.string());
  return from_text(read_file(path));
}

void RunConfig::save(const fs::path& path) const { write_file(path, to_text()); }

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must be section.key: " + dotted_key);
  find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1)).set(*this, trim(value));
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.sensor = sensor;
  e.bev = BevConfig{eval.bev_grid, eval.bev_radius};
  e.extractor_seed = eval.extractor_seed;
  e.clip_frames = eval.clip_frames;
  return e;
}

double learning_rate(const TrainConfig& train, std::size_t step) {
  if (train.lr_decay_steps == 0) return train.lr;
  const double progress = std::min(1.0, static_cast<double>(step - 1) / static_cast<double>(train.lr_decay_steps));
  return train.lr_min + 0.5 * (train.lr - train.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

fs::path resolve_data_path(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("SEQLIDAR_DATA_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

RunConfig find_run_config(const fs::path& dir) {
  for (const fs::path& p : {dir / "config.txt", dir.parent_path() / "config.txt"}) {
    if (fs::exists(p)) return RunConfig::load(p);
  }
  throw ConfigError("no config.txt in " + dir.string() + " or its parent");
}

// ---- synth ----------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg, const fs::path& out_dir, std::size_t count, std::uint64_t seed) {
  cfg.validate();
  if (count < 1) throw ConfigError("synth: count must be at least 1");
  fs::create_directories(out_dir);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    const SceneWorld world = synth_world(s, cfg.world);
    write_sequence(out_dir / std::to_string(s), simulate_sequence(world, cfg.data.frames, cfg.sensor, s));
    names.push_back(std::to_string(s));
  }
  write_file(out_dir / "manifest.txt", join_lines(names));
  cfg.save(out_dir / "config.txt");
  write_file(out_dir / "seed.txt", std::to_string(seed) + "\n");
}

// ---- train ----------------------------------------------------------------------

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const fs::path marker = run_dir / "checkpoints" / "latest.txt";
  if (!fs::exists(marker)) return std::nullopt;
  const fs::path dir = run_dir / "checkpoints" / trim(read_file(marker));
  if (!fs::exists(dir / "state.txt")) return std::nullopt;
  return dir;
}

TrainResult cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                      const TrainObserver& observer) {
  cfg.validate();
  const TrainingSet data = load_training_set(data_dir, cfg);
  fs::create_directories(out_dir);

  Lidar4DNet<float> net(cfg.model);
  const std::vector<Var<float>> params = net.params().vars();
  Adam<float> adam(params, AdamConfig{cfg.train.lr});
  Ema<float> ema(params, cfg.train.ema_decay);
  std::mt19937_64 rng(mix_seed(cfg.train.seed, 0));
  TrainState state;

  const fs::path log_path = out_dir / "train.log";
  std::vector<std::string> kept_log;
  if (const auto ckpt = latest_checkpoint(out_dir)) {
    RunConfig saved = RunConfig::load(*ckpt / "config.txt");
    saved.train.steps = cfg.train.steps;
    saved.train.checkpoint_every = cfg.train.checkpoint_every;
    saved.train.keep_checkpoints = cfg.train.keep_checkpoints;
    saved.sample = cfg.sample;
    saved.eval = cfg.eval;
    if (!(saved == cfg)) {
      throw ConfigError("cannot resume " + out_dir.string() + ": config differs from the checkpoint (current vs saved):" +
                        config_diff(cfg, saved));
    }
    state = read_state(*ckpt);
    load_parameters(*ckpt / "model", net.params());
    const auto names = param_names(net.params());
    ema.shadow() = load_tensors<float>(*ckpt / "ema", names);
    adam.first_moments() = load_tensors<float>(*ckpt / "adam_m", names);
    adam.second_moments() = load_tensors<float>(*ckpt / "adam_v", names);
    adam.set_steps(state.step);
    std::istringstream rs(state.rng);
    rs >> rng;
    if (!rs) throw IngestionError("corrupt rng state in " + (*ckpt / "state.txt").string());
    if (fs::exists(log_path)) {
      std::istringstream in(read_file(log_path));
      for (std::string line; std::getline(in, line);) {
        std::size_t s = 0;
        if (line.starts_with("step=") && parse_number(split(line.substr(5), ' ')[0], s) && s <= state.step)
          kept_log.push_back(line);
      }
    }
  }
  cfg.save(out_dir / "config.txt");
  write_file(out_dir / "seed.txt", std::to_string(cfg.train.seed) + "\n");
  write_file(log_path, join_lines(kept_log));
  std::ofstream log(log_path, std::ios::app);

  TrainResult result;
  result.first_step = state.step + 1;
  result.last_step = state.step;
  std::uniform_int_distribution<std::size_t> pick(0, data.x0.size() - 1);
  const auto t0 = std::chrono::steady_clock::now();
  const double wall0 = state.wall;
  std::optional<fs::path> last_good = latest_checkpoint(out_dir);

  for (std::size_t step = state.step + 1; step <= cfg.train.steps; ++step) {
    std::vector<const Tensor<float>*> xs, sk, pr;
    ConditionBatch<float> cond;
    for (std::size_t b = 0; b < cfg.train.batch; ++b) {
      const std::size_t i = pick(rng);
      xs.push_back(&data.x0[i]);
      sk.push_back(&data.cond[i].sketch);
      pr.push_back(&data.cond[i].prior);
      cond.captions.push_back(data.cond[i].caption);
    }
    cond.sketch = stack(sk);
    cond.prior = stack(pr);
    const EpsModel<float> model = [&](const Var<float>& xt, const std::vector<double>& t) {
      return net.forward(xt, t, cond);
    };
    adam.zero_grad();
    const Var<float> loss = train_loss(model, stack(xs), rng, cfg.train.t_floor);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      log << "step=" << step << " loss=" << fmt(value) << " diverged\n";
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                          (last_good ? last_good->string() : std::string("none")));
    }
    backward(loss);
    adam.set_lr(learning_rate(cfg.train, step));
    adam.step();
    ema.update(params, step);

    state.step = step;
    state.wall = wall0 + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "step=" << step << " loss=" << fmt(value) << " wall=" << fmt(std::round(state.wall * 1000.0) / 1000.0)
        << "\n" << std::flush;
    const TrainRecord rec{step, value};
    result.records.push_back(rec);
    result.last_step = step;

    if (step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps) {
      std::ostringstream rs;
      rs << rng;
      state.rng = rs.str();
      write_checkpoint(out_dir, cfg, net, ema, adam, state);
      last_good = latest_checkpoint(out_dir);
    }
    if (observer && !observer(rec)) break;
  }
  return result;
}

LoadedModel load_checkpoint(const fs::path& checkpoint, bool use_ema) {
  const fs::path dir = resolve_checkpoint(checkpoint);
  LoadedModel m;
  m.config = RunConfig::load(dir / "config.txt");
  m.net = std::make_unique<Lidar4DNet<float>>(m.config.model);
  if (use_ema) {
    const auto tensors = load_tensors<float>(dir / "ema", param_names(m.net->params()));
    const auto& named = m.net->params().named();
    for (std::size_t i = 0; i < named.size(); ++i) {
      Var<float> v = named[i].second;
      if (tensors[i].shape() != v.shape()) throw ConfigError("checkpoint ema shape mismatch for " + named[i].first);
      v.value_mut() = tensors[i];
    }
  } else {
    load_parameters(dir / "model", m.net->params());
  }
  m.step = read_state(dir).step;
  return m;
}

// ---- sample ---------------------------------------------------------------------

ConditionBundle bundle_of(const SequenceSample& s) {
  ConditionBundle b;
  b.sketch = stack(s.sketches);
  b.prior = stack(s.priors);
  b.caption = s.caption;
  return b;
}

Tensor<float> generate(const Lidar4DNet<float>& net, const ConditionBundle& cond, const SensorConfig& sensor,
                       const SamplerConfig& sampler) {
  const std::size_t F = cond.frames();
  const Shape one{1, F, 2, sensor.H, sensor.W};
  if (cond.sketch.shape() != Shape({F, 2, sensor.H, sensor.W}) || cond.prior.shape() != cond.sketch.shape()) {
    throw DimensionError("generate: conditions " + shape_str(cond.sketch.shape()) + " do not match sensor " +
                         topology(sensor, F));
  }
  ConditionBatch<float> batch{cond.sketch.reshaped(one), cond.prior.reshaped(one), {cond.caption}};
  const NoisePredictor<float> predictor = [&](const Tensor<float>& xt, double t) {
    NoGradGuard guard;
    return net.forward(Var<float>(xt), {t}, batch).value();
  };
  return sample(predictor, one, sampler).reshaped({F, 2, sensor.H, sensor.W});
}

namespace {

void write_pgm(const fs::path& path, const Tensor<double>& hist) {
  const std::size_t G = hist.dim(0);
  double peak = 0.0;
  for (double v : hist.data()) peak = std::max(peak, v);
  std::string out = "P5\n" + std::to_string(G) + " " + std::to_string(G) + "\n255\n";
  for (double v : hist.data()) out.push_back(static_cast<char>(peak > 0.0 ? std::lround(255.0 * v / peak) : 0));
  write_file(path, out);
}

}  // namespace

void cmd_sample(const fs::path& checkpoint, const fs::path& conditions_dir, const fs::path& out_dir, std::uint64_t seed,
                const SampleOverrides& overrides) {
  RunConfig probe = RunConfig::load(resolve_checkpoint(checkpoint) / "config.txt");
  const bool use_ema = overrides.use_ema.value_or(probe.sample.use_ema);
  LoadedModel m = load_checkpoint(checkpoint, use_ema);
  RunConfig cfg = m.config;
  if (overrides.steps) cfg.sample.steps = *overrides.steps;
  cfg.sample.seed = seed;
  cfg.sample.use_ema = use_ema;
  cfg.validate();

  std::vector<std::pair<std::string, fs::path>> inputs;
  if (fs::exists(conditions_dir / "manifest.txt")) {
    for (const auto& n : read_manifest(conditions_dir)) inputs.emplace_back(n, conditions_dir / n);
  } else {
    inputs.emplace_back(conditions_dir.filename().string(), conditions_dir);
  }

  fs::create_directories(out_dir);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& [name, dir] = inputs[i];
    const SequenceSample s = read_sequence(dir);
    const std::size_t F = s.num_frames();
    const Shape want{2, cfg.sensor.H, cfg.sensor.W};
    if (s.sketches[0].shape() != want) {
      throw ConfigError("conditions " + dir.string() + " do not match the checkpoint: checkpoint " +
                        topology(cfg.sensor, cfg.data.frames) + ", conditions H=" +
                        std::to_string(s.sketches[0].dim(1)) + " W=" + std::to_string(s.sketches[0].dim(2)) +
                        " F=" + std::to_string(F));
    }
    SamplerConfig sc;
    sc.steps = cfg.sample.steps;
    sc.seed = mix_seed(seed, i);
    sc.t_floor = cfg.train.t_floor;
    sc.clip_denoised = cfg.sample.clip_denoised;
    const Tensor<float> x = generate(*m.net, bundle_of(s), cfg.sensor, sc);

    const fs::path od = out_dir / name;
    fs::create_directories(od);
    const std::size_t plane = 2 * cfg.sensor.H * cfg.sensor.W;
    for (std::size_t k = 0; k < F; ++k) {
      Tensor<float> ch(want, std::vector<float>(x.data().begin() + k * plane, x.data().begin() + (k + 1) * plane));
      const EquirectImage img = image_from_channels(std::move(ch), cfg.sensor, cfg.sample.min_range);
      write_image(od / indexed("frame", k), od / indexed("mask", k), img);
      const PointCloud cloud = unproject(img, cfg.sensor);
      write_ply(od / indexed("cloud", k, ".ply"), cloud);
      write_pgm(od / indexed("bev", k, ".pgm"), bev_histogram(cloud, BevConfig{cfg.eval.bev_grid, cfg.eval.bev_radius}));
    }
    write_file(od / "seed.txt", std::to_string(sc.seed) + "\n");
    names.push_back(name);
  }
  write_file(out_dir / "manifest.txt", join_lines(names));
  cfg.save(out_dir / "config.txt");
  write_file(out_dir / "seed.txt", std::to_string(seed) + "\n");
  write_file(out_dir / "checkpoint.txt", fs::absolute(resolve_checkpoint(checkpoint)).string() + "\nstep=" +
                                             std::to_string(m.step) + "\n");
}

// ---- edit -------------------------------------------------------------------------

EditScript EditScript::parse(const std::string& text) {
  EditScript script;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto w = words(line);
    EditOp op;
    op.line = lineno;
    op.text = line;
    const std::string where = describe(op);
    const std::string& verb = w[0];
    if (verb == "add_box") {
      if (w.size() < 2) throw EditError(where + ": add_box needs a category");
      Category c;
      try {
        c = parse_category(w[1]);
      } catch (const Error& e) {
        throw EditError(where + ": " + e.what());
      }
      op.kind = EditOp::Kind::kAddBox;
      op.object = default_object(c);
      for (std::size_t i = 2; i < w.size(); ++i) {
        const auto eq = w[i].find('=');
        if (eq == std::string::npos) throw EditError(where + ": expected key=value, got '" + w[i] + "'");
        const std::string k = w[i].substr(0, eq), v = w[i].substr(eq + 1);
        if (k == "frames") {
          for (const auto& f : split(v, ',')) op.frames.push_back(parse_int(f, where));
          continue;
        }
        double* slot = k == "l" ? &op.object.l : k == "w" ? &op.object.w : k == "h" ? &op.object.h
                     : k == "rho" ? &op.object.rho : k == "theta" ? &op.object.theta : k == "phi" ? &op.object.phi
                     : k == "heading" ? &op.object.heading : nullptr;
        if (!slot) throw EditError(where + ": unknown add_box field '" + k + "'");
        if (!parse_number(v, *slot) || !std::isfinite(*slot)) throw EditError(where + ": not a number: '" + v + "'");
      }
      if (!(op.object.l > 0 && op.object.w > 0 && op.object.h > 0)) throw EditError(where + ": box sizes must be positive");
      if (!(op.object.rho > 0)) throw EditError(where + ": rho must be positive");
    } else if (verb == "remove_box" || verb == "regenerate_prior") {
      if (w.size() != 2) throw EditError(where + ": " + verb + " takes one box id");
      op.kind = verb == "remove_box" ? EditOp::Kind::kRemoveBox : EditOp::Kind::kRegeneratePrior;
      op.box_id = parse_int(w[1], where);
    } else if (verb == "set_caption_token") {
      if (w.size() != 3) throw EditError(where + ": set_caption_token takes a slot and a token");
      op.kind = EditOp::Kind::kSetCaptionToken;
      op.slot = parse_slot(w[1], where);
      op.token = w[2];
      std::int32_t id = 0;
      try {
        id = token_id(op.token);
      } catch (const VocabularyError& e) {
        throw EditError(where + ": " + e.what());
      }
      if (!token_fits_slot(id, op.slot)) throw EditError(where + ": token " + op.token + " does not fit slot " + w[1]);
    } else {
      throw EditError(where + ": unknown operation '" + verb + "'");
    }
    script.ops.push_back(std::move(op));
  }
  return script;
}

EditOutcome apply_edits(const SequenceSample& sample, const EditScript& script, const SensorConfig& sensor) {
  EditOutcome out;
  out.sample = sample;
  SequenceSample& s = out.sample;
  const int F = static_cast<int>(s.num_frames());
  out.frame_touched.assign(s.num_frames(), false);
  std::vector<std::vector<const EditOp*>> touched_by(s.num_frames());
  auto touch = [&](int f, const EditOp& op) {
    out.frame_touched[f] = true;
    touched_by[f].push_back(&op);
  };

  for (const EditOp& op : script.ops) {
    const std::string where = describe(op);
    switch (op.kind) {
      case EditOp::Kind::kAddBox: {
        if (op.object.rho > sensor.d_max) {
          throw EditError(where + ": rho " + fmt(op.object.rho) + " exceeds d_max " + fmt(sensor.d_max));
        }
        std::vector<int> frames = op.frames;
        if (frames.empty()) {
          for (int f = 0; f < F; ++f) frames.push_back(f);
        }
        int id = 0;
        for (const auto& b : s.boxes) id = std::max(id, b.id + 1);
        std::set<int> seen;
        for (int f : frames) {
          if (f < 0 || f >= F) throw EditError(where + ": frame " + std::to_string(f) + " out of range [0, " + std::to_string(F) + ")");
          if (!seen.insert(f).second) throw EditError(where + ": frame " + std::to_string(f) + " listed twice");
          const std::uint64_t prior_seed = mix_seed(mix_seed(s.seed, 0x6164645F626F78ull + static_cast<std::uint64_t>(id)), f);
          s.boxes.push_back({id, f, op.object.category, op.object.box(), prior_seed});
          touch(f, op);
        }
        out.boxes_changed = true;
        break;
      }
      case EditOp::Kind::kRemoveBox: {
        const auto before = s.boxes.size();
        for (const auto& b : s.boxes) {
          if (b.id == op.box_id) touch(b.frame, op);
        }
        std::erase_if(s.boxes, [&](const BoxAnnotation& b) { return b.id == op.box_id; });
        if (s.boxes.size() == before) throw EditError(where + ": no box with id " + std::to_string(op.box_id));
        out.boxes_changed = true;
        break;
      }
      case EditOp::Kind::kRegeneratePrior: {
        bool found = false;
        for (auto& b : s.boxes) {
          if (b.id != op.box_id) continue;
          b.prior_seed = mix_seed(b.prior_seed, 0x7072696F72ull);
          touch(b.frame, op);
          found = true;
        }
        if (!found) throw EditError(where + ": no box with id " + std::to_string(op.box_id));
        out.boxes_changed = true;
        break;
      }
      case EditOp::Kind::kSetCaptionToken: {
        const auto slot = static_cast<std::size_t>(op.slot);
        if (s.caption.size() <= slot) throw EditError(where + ": caption has no " + std::to_string(slot) + " slot");
        const std::int32_t id = token_id(op.token);
        if (s.caption[slot] != id) {
          s.caption[slot] = id;
          out.caption_changed = true;
        }
        break;
      }
    }
  }

  for (int f = 0; f < F; ++f) {
    if (!out.frame_touched[f]) continue;
    const auto boxes = s.boxes_in_frame(f);
    const Tensor<float> box_channel = render_box_channel(boxes, sensor);
    Tensor<float>& sketch = s.sketches[f];
    const std::size_t plane = sensor.H * sensor.W;
    std::copy(box_channel.data().begin() + plane, box_channel.data().end(), sketch.data().begin() + plane);
    s.priors[f] = render_frame_prior(boxes, sensor);
    try {
      validate_consistency(sketch, s.priors[f], boxes, sensor);
    } catch (const ValidationError& e) {
      std::string ops;
      for (const EditOp* op : touched_by[f]) ops += " " + describe(*op);
      throw EditError("frame " + std::to_string(f) + " inconsistent after" + ops + ": " + e.what());
    }
  }
  return out;
}

void cmd_edit(const fs::path& sample_dir, const fs::path& script_file, const fs::path& out_dir,
              const std::optional<SensorConfig>& sensor_opt) {
  const SensorConfig sensor = sensor_opt ? *sensor_opt : find_run_config(sample_dir).sensor;
  const SequenceSample sample = read_sequence(sample_dir);
  if (sample.sketches[0].shape() != Shape({2, sensor.H, sensor.W})) {
    throw ConfigError("sample " + sample_dir.string() + " does not match sensor " + topology(sensor, sample.num_frames()));
  }
  const EditOutcome outcome = apply_edits(sample, EditScript::parse(read_file(script_file)), sensor);

  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) throw IoError("refusing to overwrite non-empty " + out_dir.string());
  fs::create_directories(out_dir);
  fs::copy(sample_dir, out_dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  const SequenceSample& s = outcome.sample;
  for (std::size_t f = 0; f < s.num_frames(); ++f) {
    if (!outcome.frame_touched[f]) continue;
    write_l4dt(out_dir / indexed("sketch", f), s.sketches[f]);
    write_l4dt(out_dir / indexed("prior", f), s.priors[f]);
  }
  if (outcome.caption_changed) write_file(out_dir / "caption.txt", caption_to_text(s.caption) + "\n");
  if (outcome.boxes_changed) write_file(out_dir / "boxes.jsonl", boxes_to_jsonl(s.boxes));
}

// ---- eval ---------------------------------------------------------------------------

EvalReport cmd_eval(const fs::path& gen_dir, const fs::path& ref_dir, const fs::path& out_file) {
  RunConfig cfg;
  try {
    cfg = find_run_config(ref_dir);
  } catch (const ConfigError&) {
    cfg = find_run_config(gen_dir);
  }
  const EvalReport report = evaluate_run(gen_dir, ref_dir, cfg.eval_config());
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  write_report(out_file, report);
  return report;
}

}  // namespace seqlidar
