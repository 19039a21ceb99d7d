// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "seqlidar/diffusion.hpp"
#include "seqlidar/equirect.hpp"
#include "seqlidar/errors.hpp"
#include "seqlidar/grad_check.hpp"
#include "seqlidar/lidar4dnet.hpp"
#include "seqlidar/metrics.hpp"
#include "seqlidar/ops.hpp"
#include "seqlidar/pipeline.hpp"
#include "seqlidar/scene.hpp"
#include "support.hpp"

using namespace seqlidar;
namespace fs = std::filesystem;
namespace o = seqlidar::ops;
namespace st = seqlidar::testing;
using Vd = Var<double>;
using Td = Tensor<double>;

namespace {

// ---- pinned tolerances and budgets -----------------------------------------------

constexpr double kScheduleTol = 1e-12;
constexpr int kScheduleDraws = 10000;
constexpr std::size_t kMonteCarloDraws = 100000;
constexpr double kStdErrors = 3.0;
constexpr double kOracleTol = 1e-3;
constexpr double kGradTol = 1e-4;
constexpr double kScaleRelTol = 1e-6;
constexpr double kMetricOracleTol = 1e-6;

// Toy overfit experiment.
constexpr std::size_t kToySequences = 8;
constexpr std::size_t kToyFrames = 4;
constexpr std::size_t kToyH = 32;
constexpr std::size_t kToyW = 128;
constexpr std::size_t kToyChannels = 16;
constexpr std::size_t kToySteps = 4000;
constexpr double kToyLr = 1e-3;
constexpr double kToyLrMin = 1e-5;  // cosine decay over the whole run
constexpr std::uint64_t kToyDataSeed = 7;
constexpr std::uint64_t kToyHeldOutSeed = 8;
constexpr std::size_t kLossHead = 10;   // initial loss = mean of the first steps
constexpr std::size_t kLossTail = 200;  // final loss = mean of the last steps
constexpr double kLossRatio = 0.1;
constexpr int kSamplerSteps = 256;

// ---- helpers -----------------------------------------------------------------------

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

std::string num(double v, int precision = 3) {
  std::ostringstream s;
  if (v != 0.0 && (std::abs(v) < 1e-3 || std::abs(v) >= 1e5)) s << std::scientific;
  else s << std::fixed;
  s << std::setprecision(precision) << v;
  return s.str();
}

Td randn(const Shape& s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Td::randn(s, rng, sd);
}

template <typename T>
Tensor<T> uniform(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
bool same(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data());
}

template <typename T>
Tensor<T> roll_columns(const Tensor<T>& x, std::size_t k) {
  const std::size_t W = x.shape().back();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.numel() / W; ++r)
    for (std::size_t j = 0; j < W; ++j) out[r * W + (j + k) % W] = x[r * W + j];
  return out;
}

std::size_t at5(const Shape& s, std::size_t b, std::size_t f, std::size_t c, std::size_t i, std::size_t j) {
  return (((b * s[1] + f) * s[2] + c) * s[3] + i) * s[4] + j;
}

// Frames of a [1,F,...] or [F,...] tensor whose bytes changed.
std::vector<bool> frames_changed(const Td& a, const Td& b, std::size_t frames) {
  const std::size_t per = a.numel() / frames;
  std::vector<bool> out(frames);
  for (std::size_t f = 0; f < frames; ++f) out[f] = !std::equal(a.ptr() + f * per, a.ptr() + (f + 1) * per, b.ptr() + f * per);
  return out;
}

void randomize(Vd& v, std::uint64_t seed, double sd = 0.3) { v.value_mut() = randn(v.shape(), seed, sd); }

Vd probe_loss(const Vd& y, std::uint64_t seed) { return o::sum(o::mul(y, Vd(randn(y.shape(), seed)))); }

struct Blocks {
  ParamSet<double> params;
  std::mt19937_64 rng{11};
  Builder<double> builder{params, rng};
};

constexpr std::size_t kTemb = 6;

ModelConfig tiny_model(std::size_t scales, bool control) {
  ModelConfig c;
  c.scales = scales;
  c.channels = 4;
  c.fourier_k = 2;
  c.heads = 4;
  c.blocks = 1;
  c.control = control;
  c.init_seed = 5;
  return c;
}

ConditionBatch<double> random_conditions(const Shape& s, std::uint64_t seed) {
  ConditionBatch<double> c;
  c.sketch = randn(s, seed);
  c.prior = randn(s, seed + 1);
  for (std::size_t b = 0; b < s[0]; ++b) c.captions.push_back({std::int32_t(b % 14), 6, 13});
  return c;
}

void wake_zero_layers(Lidar4DNet<double>& net, std::uint64_t seed) {
  for (auto& [name, p] : net.params().named()) {
    if (std::ranges::all_of(p.value().data(), [](double v) { return v == 0.0; }) && name.find(".b") == std::string::npos &&
        name.find("alpha_logit") == std::string::npos && name.find("beta") == std::string::npos) {
      Vd v = p;
      randomize(v, seed++, 0.2);
    }
  }
}

void zero_value_projection(SelfAttention<double>& sa) {
  const std::size_t C = sa.out.w.dim(0);
  Td& w = sa.qkv.w.value_mut();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 2 * C; k < 3 * C; ++k) w[c * 3 * C + k] = 0.0;
  for (std::size_t k = 2 * C; k < 3 * C; ++k) sa.qkv.b.value_mut()[k] = 0.0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

struct Context {
  fs::path work;
  fs::path toy_data() const { return work / "toy_data"; }
  fs::path toy_held_out() const { return work / "toy_held_out"; }
  fs::path toy_run() const { return work / "toy_run"; }
};

RunConfig toy_config() {
  RunConfig cfg;
  cfg.sensor.H = kToyH;
  cfg.sensor.W = kToyW;
  cfg.data.frames = kToyFrames;
  cfg.model.scales = 4;
  cfg.model.channels = kToyChannels;
  cfg.model.blocks = 1;
  cfg.model.fourier_k = 2;
  cfg.train.batch = 1;
  cfg.train.steps = kToySteps;
  cfg.train.lr = kToyLr;
  cfg.train.lr_decay_steps = kToySteps;
  cfg.train.lr_min = kToyLrMin;
  cfg.train.checkpoint_every = 1000;
  cfg.sample.steps = kSamplerSteps;
  return cfg;
}

// ---- 1: schedule and transition identities ------------------------------------------

Outcome schedule_identities(Context&) {
  Outcome out;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double unit = 0.0, tele = 0.0, direct = 0.0, var = 0.0;
  int used = 0;
  while (used < kScheduleDraws) {
    double v[3] = {u(rng), u(rng), u(rng)};
    std::sort(v, v + 3);
    if (!(v[0] < v[1] && v[1] < v[2])) continue;
    ++used;
    const double s = v[0], m = v[1], t = v[2];
    for (double x : v) {
      const auto [a, sg] = schedule_at(x);
      unit = std::max(unit, std::abs(a * a + sg * sg - 1.0));
    }
    const auto ts = transition_params(s, t), tm = transition_params(m, t), ms = transition_params(s, m);
    const auto [as, ss] = schedule_at(s);
    const auto [at, sgt] = schedule_at(t);
    tele = std::max(tele, std::abs(tm.alpha_ts * ms.alpha_ts - ts.alpha_ts));
    direct = std::max(direct, std::abs(ts.alpha_ts * as - at));
    var = std::max(var, std::abs(ts.alpha_ts * ts.alpha_ts * ss * ss + ts.sigma2_ts - sgt * sgt));
    // Composition of variances through the middle time.
    var = std::max(var, std::abs(tm.alpha_ts * tm.alpha_ts * ms.sigma2_ts + tm.sigma2_ts - ts.sigma2_ts));
  }
  out.require(unit < kScheduleTol, "alpha^2+sigma^2-1 max " + num(unit));
  out.require(tele < kScheduleTol, "telescoping alpha max " + num(tele));
  out.require(direct < kScheduleTol, "alpha_ts*alpha_s-alpha_t max " + num(direct));
  out.require(var < kScheduleTol, "variance decomposition max " + num(var));
  return out;
}

// ---- 2: posterior -------------------------------------------------------------------

Outcome posterior_correctness(Context&) {
  Outcome out;
  std::mt19937_64 rng(202);
  bool exact = true;
  for (double t : {0.01, 0.2, 0.5, 0.99}) {
    const auto xt = Td::randn({64}, rng), xh = Td::randn({64}, rng), noise = Td::randn({64}, rng);
    exact = exact && same(posterior_step(xt, xh, 0.0, t, noise), xh);
  }
  out.require(exact, "posterior_step at s=0 returns x_hat bit-exactly");

  const std::size_t n = kMonteCarloDraws;
  double worst_mean = 0.0, worst_var = 0.0;
  const std::vector<std::array<double, 3>> cases{{0.8, 0.3, 0.7}, {-0.4, 0.05, 0.5}, {0.1, 0.6, 0.95}};
  for (const auto& [x, s, t] : cases) {
    const Td xv({n}, x);
    const Td xs = forward_diffuse(xv, s, Td::randn({n}, rng));
    const auto tr = transition_params(s, t);
    const Td e = Td::randn({n}, rng);
    std::vector<double> xt(n);
    for (std::size_t k = 0; k < n; ++k) xt[k] = tr.alpha_ts * xs[k] + std::sqrt(tr.sigma2_ts) * e[k];
    double m = 0.0, m2 = 0.0;
    for (double v : xt) m += v;
    m /= static_cast<double>(n);
    for (double v : xt) m2 += (v - m) * (v - m);
    const double variance = m2 / static_cast<double>(n - 1);
    const auto [at, sgt] = schedule_at(t);
    const double se_mean = sgt / std::sqrt(static_cast<double>(n));
    const double se_var = sgt * sgt * std::sqrt(2.0 / static_cast<double>(n - 1));
    worst_mean = std::max(worst_mean, std::abs(m - at * x) / se_mean);
    worst_var = std::max(worst_var, std::abs(variance - sgt * sgt) / se_var);
  }
  out.require(worst_mean < kStdErrors, "composed mean within " + num(worst_mean, 2) + " SE");
  out.require(worst_var < kStdErrors, "composed variance within " + num(worst_var, 2) + " SE");
  return out;
}

// ---- 3: oracle sampler inversion --------------------------------------------------------

Outcome oracle_inversion(Context&) {
  Outcome out;
  const Shape shape{1, 2, 2, 16, 64};
  const Td x = uniform<double>(shape, 303);
  const NoisePredictor<double> oracle = [&](const Td& xt, double t) {
    const auto [a, s] = schedule_at(t);
    Td e(xt.shape());
    for (std::size_t k = 0; k < e.numel(); ++k) e[k] = (xt[k] - a * x[k]) / s;
    return e;
  };
  SamplerConfig cfg;
  cfg.steps = kSamplerSteps;
  cfg.seed = 99;
  const Td got = sample(oracle, shape, cfg);
  double worst = 0.0;
  for (std::size_t k = 0; k < got.numel(); ++k) worst = std::max(worst, std::abs(got[k] - x[k]));
  out.require(worst < kOracleTol, "256-step max abs error " + num(worst));
  return out;
}

// ---- 4: gradients -------------------------------------------------------------------------

Outcome autodiff_fidelity(Context&) {
  Outcome out;
  auto check = [&](const std::string& what, const GradCheckResult& r) {
    out.require(r.max_rel_error < kGradTol && r.checked > 0, what + " " + num(r.max_rel_error));
  };
  const GradCheckOptions sub{.max_coords = 24, .seed = 5};

  {  // conv2d_circular + group norm
    const Td x = uniform<double>({2, 3, 4, 8}, 1);
    Vd w(uniform<double>({4, 3, 3, 3}, 2), true), b(uniform<double>({4}, 3), true);
    Vd g(uniform<double>({4}, 4, 0.5, 1.5), true), be(uniform<double>({4}, 5), true);
    check("conv2d_circular+group_norm(x)",
          grad_check([&](const Vd& v) { return probe_loss(o::group_norm(o::conv2d_circular(v, w, b), 2, g, be), 6); }, x));
    auto fw = [&] { return probe_loss(o::group_norm(o::conv2d_circular(Vd(x), w, b, 2), 2, g, be), 7); };
    check("conv2d_circular(w, stride 2)", grad_check_param(fw, w));
    check("group_norm(gamma)", grad_check_param(fw, g));
  }
  {  // temporal conv, modulation, blend
    const Td x = uniform<double>({1, 3, 2, 2, 3}, 8);
    Vd w(uniform<double>({2, 2, 3, 1, 1}, 9), true), b(uniform<double>({2}, 10), true);
    Vd sc(uniform<double>({3, 2}, 11), true), sh(uniform<double>({3, 2}, 12), true);
    Vd alpha(Td(Shape{1}, 0.3), true);
    auto f = [&](const Vd& v) {
      auto m = o::channel_modulate(o::reshape(o::conv3d_temporal_bf(v, w, b), {3, 2, 2, 3}), sc, sh);
      return probe_loss(o::blend(alpha, m, o::square(m)), 13);
    };
    check("conv3d_temporal+modulate+blend(x)", grad_check(f, x));
    auto fp = [&] { return f(Vd(x)); };
    check("conv3d_temporal(w)", grad_check_param(fp, w));
    check("channel_modulate(scale)", grad_check_param(fp, sc));
    check("blend(alpha)", grad_check_param(fp, alpha));
  }
  {  // attention
    const Td x = uniform<double>({2, 3, 4}, 14);
    check("attention(x)", grad_check([](const Vd& v) { return probe_loss(o::attention(v, v, v), 15); }, x));
  }
  {
    Blocks f;
    ESTConv<double> blk(f.builder, "b", 2, 3, 1, kTemb);
    randomize(blk.logit, 1);
    const Vd temb(randn({1, kTemb}, 2));
    const Td x0 = randn({1, 3, 2, 4, 4}, 3);
    check("ESTConv(x)", grad_check([&](const Vd& x) { return probe_loss(blk.forward(x, temb), 4); }, x0));
    const Vd x(x0);
    auto fp = [&] { return probe_loss(blk.forward(x, temb), 4); };
    for (auto [name, p] : std::vector<std::pair<const char*, Vd*>>{{"conv1", &blk.conv1.w},
                                                                  {"conv2", &blk.conv2.w},
                                                                  {"skip", &blk.skip.w},
                                                                  {"norm", &blk.norm.gamma},
                                                                  {"time_proj", &blk.time_proj.w},
                                                                  {"temporal_w", &blk.temporal_w},
                                                                  {"alpha_logit", &blk.logit}})
      check(std::string("ESTConv.") + name, grad_check_param(fp, *p, sub));
  }
  {
    Blocks f;
    ESTTrans<double> tr(f.builder, "t", 4, 2);
    randomize(tr.spatial.out.w, 1);
    randomize(tr.temporal.out.w, 2);
    const Td x0 = randn({1, 3, 4, 2, 2}, 3);
    check("ESTTrans(x)", grad_check([&](const Vd& x) { return probe_loss(tr.forward(x), 4); }, x0));
    const Vd x(x0);
    auto fp = [&] { return probe_loss(tr.forward(x), 4); };
    check("ESTTrans.spatial.qkv", grad_check_param(fp, tr.spatial.qkv.w, sub));
    check("ESTTrans.spatial.norm", grad_check_param(fp, tr.spatial.norm.gamma, sub));
    check("ESTTrans.temporal.qkv", grad_check_param(fp, tr.temporal.qkv.w, sub));
    check("ESTTrans.temporal.out", grad_check_param(fp, tr.temporal.out.w, sub));
  }
  {
    Blocks f;
    CaptionCrossAttention<double> xa(f.builder, "c", 4, 2, 14, kTemb);
    randomize(xa.out.w, 1);
    const Vd temb(randn({2, kTemb}, 2));
    const std::vector<std::vector<std::int32_t>> caps{{1, 3, 3}, {7}};
    const Td x0 = randn({2, 2, 4, 2, 2}, 3);
    check("CaptionCrossAttention(x)", grad_check([&](const Vd& x) { return probe_loss(xa.forward(x, caps, temb), 4); }, x0));
    const Vd x(x0);
    auto fp = [&] { return probe_loss(xa.forward(x, caps, temb), 4); };
    for (auto [name, p] : std::vector<std::pair<const char*, Vd*>>{
             {"table", &xa.table}, {"time_proj", &xa.time_proj.w}, {"q", &xa.q.w}, {"k", &xa.k.w}, {"v", &xa.v.w}, {"out", &xa.out.w}})
      check(std::string("CaptionCrossAttention.") + name, grad_check_param(fp, *p, sub));
  }
  {
    const Td sk = randn({1, 2, 2, 2, 3}, 1);
    check("inject_sketch(x)", grad_check([&](const Vd& x) { return probe_loss(inject_sketch(x, Vd(sk)), 2); },
                                         randn({1, 2, 2, 2, 3}, 3)));
  }
  {
    const ModelConfig cfg = tiny_model(2, true);
    Lidar4DNet<double> net(cfg);
    wake_zero_layers(net, 10);
    ControlBranch<double>& cb = *net.control();
    const Shape s{1, 2, 2, 4, 8};
    const Vd temb(randn({1, 4 * cfg.channels}, 1));
    const Vd prior(randn(s, 2));
    auto loss_of = [&](const Vd& x) {
      const auto res = cb.forward(x, prior, temb);
      return o::add(probe_loss(res[0], 3), probe_loss(res[1], 4));
    };
    check("ControlBranch(x)", grad_check(loss_of, randn(s, 5)));
    const Vd x(randn(s, 5));
    auto fp = [&] { return loss_of(x); };
    check("ControlBranch.input", grad_check_param(fp, cb.input.w, sub));
    check("ControlBranch.projection0", grad_check_param(fp, cb.projections[0].w, sub));
    check("ControlBranch.projection1", grad_check_param(fp, cb.projections[1].w, sub));
  }
  double model_err = 0.0;
  {  // whole network, reported alongside the blocks
    Lidar4DNet<double> net(tiny_model(2, true));
    wake_zero_layers(net, 20);
    const Shape s{1, 2, 2, 8, 16};
    const auto cond = random_conditions(s, 1);
    const Vd x(randn(s, 2));
    model_err = grad_check([&](const Vd& v) { return probe_loss(net.forward(v, {0.35}, cond), 3); }, x.value(),
                           {.max_coords = 16, .seed = 9})
                    .max_rel_error;
    auto fp = [&] { return probe_loss(net.forward(x, {0.35}, cond), 3); };
    std::mt19937_64 pick(3);
    auto& named = net.params().named();
    for (int trial = 0; trial < 6; ++trial) {
      Vd v = named[pick() % named.size()].second;
      model_err = std::max(model_err, grad_check_param(fp, v, {.max_coords = 8, .seed = std::uint64_t(trial)}).max_rel_error);
    }
  }
  // Keep only failures plus a summary in the printed notes.
  double worst = 0.0;
  std::size_t n = 0;
  std::vector<std::string> kept;
  for (const auto& s : out.notes) {
    ++n;
    worst = std::max(worst, std::stod(s.substr(s.rfind(' ') + 1)));
    if (s.starts_with("FAILED")) kept.push_back(s);
  }
  kept.push_back(std::to_string(n) + " block checks, worst rel err " + num(worst));
  out.notes = kept;
  out.require(model_err < kGradTol, "full tiny model, worst rel err " + num(model_err));
  return out;
}

// ---- 5: architectural invariants ----------------------------------------------------------

Outcome architecture(Context&) {
  Outcome out;
  {  // conv2d_circular shift equivariance
    bool ok = true;
    for (std::size_t k : {1u, 3u, 7u, 16u}) {
      const auto x = uniform<double>({2, 3, 6, 40}, 10 + k);
      const Vd w(uniform<double>({5, 3, 3, 5}, 11)), b(uniform<double>({5}, 12));
      ok = ok && same(roll_columns(o::conv2d_circular(Vd(x), w, b).value(), k),
                      o::conv2d_circular(Vd(roll_columns(x, k)), w, b).value());
    }
    const auto xf = uniform<float>({1, 4, 8, 64}, 20);
    const Var<float> wf(uniform<float>({6, 4, 3, 3}, 21)), bf(uniform<float>({6}, 22));
    ok = ok && same(roll_columns(o::conv2d_circular(Var<float>(xf), wf, bf).value(), 5u),
                    o::conv2d_circular(Var<float>(roll_columns(xf, 5u)), wf, bf).value());
    out.require(ok, "conv2d_circular cyclic shift equivariance bit-exact (float64, float32)");
  }
  {  // (3,1,1) receptive field
    Td x(Shape{1, 1, 6, 3, 4});
    x.at({0, 0, 3, 1, 2}) = 1.0;
    const Vd w(uniform<double>({2, 1, 3, 1, 1}, 50, 0.5, 1.0)), b(Td(Shape{2}));
    const Td y = o::conv3d_temporal(Vd(x), w, b).value();
    bool ok = true;
    for (std::size_t oc = 0; oc < 2; ++oc)
      for (std::size_t f = 0; f < 6; ++f)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 4; ++j)
            ok = ok && ((y.at({0, oc, f, i, j}) != 0.0) == (f >= 2 && f <= 4 && i == 1 && j == 2));
    Blocks bl;
    ESTConv<double> blk(bl.builder, "b", 2, 2, 1, kTemb);
    blk.set_alpha(0.0);
    Td xe = randn({1, 5, 2, 4, 8}, 8);
    const Vd temb(randn({1, kTemb}, 9));
    const Td y0 = blk.forward(Vd(xe), temb).value();
    xe[at5(xe.shape(), 0, 2, 1, 2, 2)] += 1.0;
    const auto changed = frames_changed(y0, blk.forward(Vd(xe), temb).value(), 5);
    ok = ok && changed == std::vector<bool>{false, true, true, true, false};
    out.require(ok, "temporal receptive field is one frame each side (conv and EST-Conv)");
  }
  {  // attention isolation
    Blocks bl;
    ESTTrans<double> tr(bl.builder, "t", 8, 4);
    randomize(tr.spatial.out.w, 1);
    randomize(tr.temporal.out.w, 2);
    randomize(tr.temporal.out.b, 3);
    zero_value_projection(tr.temporal);
    Td x = randn({1, 4, 8, 2, 4}, 4);
    const Td y0 = tr.forward(Vd(x)).value();
    x[at5(x.shape(), 0, 1, 3, 1, 2)] += 0.5;
    const bool frames_ok = frames_changed(y0, tr.forward(Vd(x)).value(), 4) == std::vector<bool>{false, true, false, false};

    Blocks bl2;
    ESTTrans<double> tr2(bl2.builder, "t", 8, 2);
    randomize(tr2.spatial.out.w, 1);
    randomize(tr2.spatial.out.b, 2);
    randomize(tr2.temporal.out.w, 3);
    zero_value_projection(tr2.spatial);
    const Shape s{1, 3, 8, 2, 4};
    Td x2 = randn(s, 4);
    const Td z0 = tr2.forward(Vd(x2)).value();
    for (std::size_t f = 0; f < 3; ++f) x2[at5(s, 0, f, 2, 1, 1)] -= 0.7;
    const Td z1 = tr2.forward(Vd(x2)).value();
    bool pixels_ok = true, moved = false;
    for (std::size_t f = 0; f < 3; ++f)
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 4; ++j) {
            const std::size_t k = at5(s, 0, f, c, i, j);
            if (i == 1 && j == 1) moved = moved || z0[k] != z1[k];
            else pixels_ok = pixels_ok && z0[k] == z1[k];
          }
    out.require(frames_ok, "spatial attention stage keeps frames isolated");
    out.require(pixels_ok && moved, "temporal attention stage keeps pixels isolated");
  }
  {  // zero-init condition paths
    Lidar4DNet<double> with(tiny_model(3, true));
    Lidar4DNet<double> without(tiny_model(3, false));
    const Shape s{2, 3, 2, 8, 32};
    NoGradGuard ng;
    const Vd x(randn(s, 1));
    auto cond = random_conditions(s, 2);
    const Td base = without.forward(x, {0.2, 0.8}, cond).value();
    bool ok = same(base, with.forward(x, {0.2, 0.8}, cond).value());
    cond.prior = randn(s, 9, 5.0);
    ok = ok && same(base, with.forward(x, {0.2, 0.8}, cond).value());
    auto empty = cond;
    empty.captions = {{}, {}};
    ok = ok && same(base, with.forward(x, {0.2, 0.8}, empty).value());
    out.require(ok, "zero-init control and caption paths leave the backbone output bit-unchanged");
  }
  return out;
}

// ---- 6: codec -------------------------------------------------------------------------------

PointCloud interior_cloud(const SensorConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> row(0, cfg.H - 1), col(0, cfg.W - 1);
  std::uniform_real_distribution<double> frac(0.2, 0.8), range(0.5, cfg.d_max), refl(0.0, 1.0);
  PointCloud cloud;
  for (std::size_t k = 0; k < n; ++k) {
    const double el = cfg.elev_max - (static_cast<double>(row(rng)) + frac(rng)) * cfg.elevation_step();
    const double az = -std::numbers::pi + (static_cast<double>(col(rng)) + frac(rng)) * cfg.azimuth_step();
    const double r = range(rng);
    cloud.push_back({r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az), r * std::sin(el), refl(rng)});
  }
  return cloud;
}

Outcome codec(Context&) {
  Outcome out;
  {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 80.0);
    double worst = 0.0;
    bool monotone = true;
    std::vector<double> d(20000);
    for (auto& v : d) v = u(rng);
    std::sort(d.begin(), d.end());
    double prev = -2.0;
    for (double v : d) {
      const double s = scale_range(v, 80.0);
      monotone = monotone && s > prev;
      prev = s;
      if (v > 0.0) worst = std::max(worst, std::abs(unscale_range(s, 80.0) - v) / v);
    }
    out.require(worst < kScaleRelTol && monotone, "scale/unscale bijection, max rel err " + num(worst));
  }
  {
    bool ok = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SensorConfig cfg;
      if (seed % 2) cfg.H = 32, cfg.W = 256;
      const auto img = project(interior_cloud(cfg, 3000, seed), cfg);
      const auto again = project(unproject(img, cfg), cfg);
      ok = ok && again.mask == img.mask;
      for (std::size_t p = 0; p < img.mask.size(); ++p) {
        if (!img.mask[p]) continue;
        ok = ok && again.channels[p] == img.channels[p] && again.channels[img.mask.size() + p] == img.channels[img.mask.size() + p];
      }
    }
    out.require(ok, "project(unproject(project)) bit-exact on valid pixels");
  }
  {
    const SensorConfig cfg;
    const auto cloud = interior_cloud(cfg, 2000, 77);
    const auto base = project(cloud, cfg);
    bool ok = true;
    for (std::size_t k : {1u, 5u, 32u, 100u}) {
      PointCloud rotated = cloud;
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.W);
      for (auto& p : rotated) {
        const Vec3 q = rotate_z(p.position(), angle);
        p.x = q.x, p.y = q.y, p.z = q.z;
      }
      ok = ok && same(project(rotated, cfg).channels, roll_columns(base.channels, k));
    }
    out.require(ok, "azimuthal rotation by k bins shifts columns by k exactly");
  }
  return out;
}

// ---- 7: toy overfit and sample ----------------------------------------------------------------

std::vector<FrameSequence> generate_set(const LoadedModel& m, const std::vector<ConditionBundle>& bundles,
                                        const RunConfig& cfg, std::uint64_t seed) {
  std::vector<FrameSequence> out;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    SamplerConfig sc;
    sc.steps = kSamplerSteps;
    sc.seed = mix_seed(seed, i);
    sc.t_floor = cfg.train.t_floor;
    const Tensor<float> x = generate(*m.net, bundles[i], cfg.sensor, sc);
    const std::size_t plane = 2 * cfg.sensor.H * cfg.sensor.W;
    FrameSequence seq;
    for (std::size_t f = 0; f < bundles[i].frames(); ++f) {
      Tensor<float> ch({2, cfg.sensor.H, cfg.sensor.W},
                       std::vector<float>(x.data().begin() + f * plane, x.data().begin() + (f + 1) * plane));
      seq.push_back(image_from_channels(std::move(ch), cfg.sensor, cfg.sample.min_range));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<SequenceSample> read_dataset(const fs::path& dir) {
  std::vector<SequenceSample> out;
  std::istringstream names(slurp(dir / "manifest.txt"));
  for (std::string n; std::getline(names, n);)
    if (!n.empty()) out.push_back(read_sequence(dir / n));
  return out;
}

Outcome toy_overfit(Context& ctx) {
  Outcome out;
  const RunConfig cfg = toy_config();
  fs::remove_all(ctx.toy_data());
  fs::remove_all(ctx.toy_held_out());
  fs::remove_all(ctx.toy_run());
  cmd_synth(cfg, ctx.toy_data(), kToySequences, kToyDataSeed);
  cmd_synth(cfg, ctx.toy_held_out(), kToySequences, kToyHeldOutSeed);

  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult tr = cmd_train(cfg, ctx.toy_data(), ctx.toy_run());
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& rec = tr.records;
  out.require(rec.size() == kToySteps, "trained " + std::to_string(rec.size()) + " steps in " + num(train_s, 0) + " s");
  if (rec.size() < kLossHead + kLossTail) return out;
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < kLossHead; ++i) head += rec[i].loss;
  for (std::size_t i = rec.size() - kLossTail; i < rec.size(); ++i) tail += rec[i].loss;
  head /= kLossHead;
  tail /= kLossTail;
  out.require(tail < kLossRatio * head,
              "smoothed loss " + num(head, 4) + " -> " + num(tail, 4) + " (ratio " + num(tail / head, 4) + ")");

  const LoadedModel m = load_checkpoint(ctx.toy_run(), true);
  const auto train = read_dataset(ctx.toy_data());
  const auto held = read_dataset(ctx.toy_held_out());
  std::vector<ConditionBundle> matched, mismatched;
  for (const auto& s : train) matched.push_back(bundle_of(s));
  for (const auto& s : held) mismatched.push_back(bundle_of(s));
  std::vector<FrameSequence> ref;
  for (const auto& s : train) ref.push_back(s.frames);

  const auto t1 = std::chrono::steady_clock::now();
  const auto gen_matched = generate_set(m, matched, cfg, 1);
  const auto gen_mismatched = generate_set(m, mismatched, cfg, 1);
  const double sample_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  const auto noise = st::noise_set(kToySequences, kToyFrames, cfg.sensor, 3);

  const EvalConfig ec = cfg.eval_config();
  const EvalReport rm = evaluate_sets(gen_matched, ref, ec);
  const EvalReport rn = evaluate_sets(noise, ref, ec);
  const EvalReport rx = evaluate_sets(gen_mismatched, ref, ec);
  out.notes.push_back("sampled " + std::to_string(2 * kToySequences) + " sequences in " + num(sample_s, 0) + " s");
  out.require(rm.mmd_e4 < rn.mmd_e4 && rm.mmd_e4 < rx.mmd_e4,
              "MMD(e4) matched " + num(rm.mmd_e4) + " < noise " + num(rn.mmd_e4) + ", mismatched " + num(rx.mmd_e4));
  out.require(rm.frd < rn.frd && rm.frd < rx.frd,
              "FRD matched " + num(rm.frd) + " < noise " + num(rn.frd) + ", mismatched " + num(rx.frd));
  return out;
}

// ---- 8: metric sanity ---------------------------------------------------------------------------

Td blob(double cx, double cy, double s = 1.5) {
  Td t({16, 16});
  double z = 0.0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      z += t[i * 16 + j] = std::exp(-((i - cx) * (i - cx) + (j - cy) * (j - cy)) / (2 * s * s));
  for (auto& v : t.data()) v /= z;
  return t;
}

Outcome metric_sanity(Context&) {
  Outcome out;
  const SensorConfig cfg = st::desk_sensor();
  const auto ref = st::frames_of(st::synth_set(100, 6, 3, cfg));
  const EvalConfig ec{cfg, {}, 0, 5};
  const EvalReport zero = evaluate_sets(ref, ref, ec);
  out.require(zero.mmd_e4 == 0.0 && zero.jsd == 0.0 && std::abs(zero.frd) < kMetricOracleTol &&
                  std::abs(zero.fvd) < kMetricOracleTol,
              "identical sets: MMD " + num(zero.mmd_e4) + ", JSD " + num(zero.jsd) + ", FRD " + num(zero.frd) +
                  ", FVD " + num(zero.fvd));

  // Non-decreasing over the levels, and the strongest level separated from the
  // identical-set value. The unbiased MMD of paired sets is negative (clamped to 0)
  // until the corruption outweighs the pairing.
  EvalReport last = zero;
  bool mono = true;
  std::string sweep;
  for (double amp : {0.02, 0.05, 0.1, 0.2}) {
    const EvalReport r = evaluate_sets(st::corrupt(ref, amp, 17), ref, ec);
    mono = mono && r.mmd_e4 >= last.mmd_e4 && r.jsd >= last.jsd && r.frd >= last.frd && r.fvd >= last.fvd;
    sweep += " [" + num(r.mmd_e4) + " " + num(r.jsd) + " " + num(r.frd, 2) + " " + num(r.fvd, 2) + "]";
    last = r;
  }
  mono = mono && last.mmd_e4 > zero.mmd_e4 && last.jsd > zero.jsd && last.frd > zero.frd && last.fvd > zero.fvd;
  out.require(mono, "4-level corruption sweep monotonely separates MMD, JSD, FRD, FVD (MMD JSD FRD FVD:" + sweep + ")");

  // Two-point kernel example: the pooled median distance is d, so k(a, b) = exp(-1/2).
  const Td a = blob(4.0, 4.0), b = blob(9.0, 6.0);
  const std::vector<Td> A{a, a}, B{b, b};
  const double kern = std::abs(mmd(A, B) - 2.0 * (1.0 - std::exp(-0.5)));
  out.require(kern < kMetricOracleTol, "two-point MMD closed form, err " + num(kern));

  // Commuting diagonal covariances diag(1,4) vs diag(4,1): distance 2.
  Moments ma{2, {0, 0}, {1, 0, 0, 4}}, mb{2, {0, 0}, {4, 0, 0, 1}};
  double fr = std::abs(frechet_from_moments(ma, mb, 0.0) - 2.0);
  // 2x2 trace oracle: tr(sqrt(M)) = sqrt(tr M + 2 sqrt(det M)).
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    auto spd = [&] {
      const double p = n(rng), q = n(rng), r = n(rng), s = n(rng);
      return std::array<double, 4>{p * p + q * q + 0.1, p * r + q * s, p * r + q * s, r * r + s * s + 0.1};
    };
    const auto sa = spd(), sb = spd();
    const Moments x{2, {n(rng), n(rng)}, {sa.begin(), sa.end()}}, y{2, {n(rng), n(rng)}, {sb.begin(), sb.end()}};
    const double tr_ab = sa[0] * sb[0] + sa[1] * sb[2] + sa[2] * sb[1] + sa[3] * sb[3];
    const double det = (sa[0] * sa[3] - sa[1] * sa[2]) * (sb[0] * sb[3] - sb[1] * sb[2]);
    const double dm = std::pow(x.mean[0] - y.mean[0], 2) + std::pow(x.mean[1] - y.mean[1], 2);
    const double want = dm + sa[0] + sa[3] + sb[0] + sb[3] - 2 * std::sqrt(tr_ab + 2 * std::sqrt(det));
    fr = std::max(fr, std::abs(frechet_from_moments(x, y, 0.0) - want));
  }
  out.require(fr < kMetricOracleTol, "Frechet closed forms, max err " + num(fr));
  return out;
}

// ---- 9: edit workflow ------------------------------------------------------------------------------

Outcome edit_workflow(Context& ctx) {
  Outcome out;
  const RunConfig cfg = toy_config();
  if (!latest_checkpoint(ctx.toy_run())) {
    RunConfig quick = cfg;
    quick.train.steps = 10;
    fs::remove_all(ctx.toy_data());
    fs::remove_all(ctx.toy_run());
    cmd_synth(quick, ctx.toy_data(), kToySequences, kToyDataSeed);
    cmd_train(quick, ctx.toy_data(), ctx.toy_run());
    out.notes.push_back("no toy checkpoint; trained 10 steps");
  }
  const fs::path root = ctx.work / "edit";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string name = slurp(ctx.toy_data() / "manifest.txt").substr(0, slurp(ctx.toy_data() / "manifest.txt").find('\n'));
  const fs::path src = ctx.toy_data() / name;
  {
    std::ofstream(root / "add.txt") << "add_box car rho=10 theta=0 frames=1\n";
  }
  cmd_edit(src, root / "add.txt", root / "edited" / name);

  const SequenceSample before = read_sequence(src), after = read_sequence(root / "edited" / name);
  const auto t0 = tree(src), t1 = tree(root / "edited" / name);
  bool others_same = t0.size() == t1.size();
  for (const auto& [file, bytes] : t0) {
    if (file == "sketch_1.l4dt" || file == "prior_1.l4dt" || file == "boxes.jsonl") continue;
    others_same = others_same && t1.count(file) && t1.at(file) == bytes;
  }
  out.require(others_same, "every other file byte-identical");

  ObjectCondition obj;
  obj.rho = 10;
  obj.theta = 0;
  const SensorConfig& sensor = cfg.sensor;
  const std::size_t plane = sensor.H * sensor.W;
  std::vector<std::uint8_t> wire(plane, 0);
  for (const auto& px : box_wireframe_pixels(obj.box(), sensor)) wire[px.row * sensor.W + px.col] = 1;
  const std::vector<std::uint8_t> foot = box_footprint(obj.box(), sensor);
  bool sketch_ok = true, prior_ok = true;
  std::size_t sketch_changed = 0, prior_changed = 0, drawn = 0, wire_count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    sketch_ok = sketch_ok && before.sketches[1][p] == after.sketches[1][p];
    const bool changed = before.sketches[1][plane + p] != after.sketches[1][plane + p];
    sketch_changed += changed;
    wire_count += wire[p];
    if (wire[p]) drawn += after.sketches[1][plane + p] != 0.0f;
    // Outside the wireframe nothing may change; on it the pixel must now be set,
    // and it changed unless another box already covered it.
    if (!wire[p]) sketch_ok = sketch_ok && !changed;
    else sketch_ok = sketch_ok && (changed || before.sketches[1][plane + p] != 0.0f);
    for (std::size_t c = 0; c < 2; ++c) {
      const bool pc = before.priors[1][c * plane + p] != after.priors[1][c * plane + p];
      prior_changed += pc;
      if (pc && !foot[p]) prior_ok = false;
    }
  }
  out.require(sketch_ok && drawn == wire_count && sketch_changed > 0,
              "sketch changed on exactly the new wireframe (" + std::to_string(sketch_changed) + " of " +
                  std::to_string(wire_count) + " pixels)");
  out.require(prior_ok && prior_changed > 0, "prior gained the object inside its footprint (" +
                                                 std::to_string(prior_changed) + " values changed)");

  // Edited bundle through the sampler twice with the same seed.
  std::ofstream(root / "edited" / "manifest.txt") << name << "\n";
  cmd_sample(ctx.toy_run(), root / "edited", root / "gen_a", 42);
  cmd_sample(ctx.toy_run(), root / "edited", root / "gen_b", 42);
  const auto ga = tree(root / "gen_a"), gb = tree(root / "gen_b");
  std::size_t frames = 0;
  for (const auto& [file, bytes] : ga) frames += file.ends_with(".l4dt") && file.find("frame_") != std::string::npos;
  out.require(ga == gb && frames == kToyFrames, "edit -> sample deterministic under a fixed seed (" +
                                                    std::to_string(frames) + " frames, " + std::to_string(ga.size()) +
                                                    " files identical)");
  return out;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqlidar acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "seqlidar_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "schedule and transition identities", 1.0, schedule_identities},
      {2, "posterior correctness", 10.0, posterior_correctness},
      {3, "oracle sampler inversion", 30.0, oracle_inversion},
      {4, "autodiff fidelity", 120.0, autodiff_fidelity},
      {5, "architectural invariants", 60.0, architecture},
      {6, "codec round trips", 10.0, codec},
      {7, "toy overfit and sample", 3600.0, toy_overfit},
      {8, "metric sanity", 60.0, metric_sanity},
      {9, "edit workflow", 600.0, edit_workflow},
  };

  Context ctx{work};
  fs::create_directories(ctx.work);
  int failed = 0, ran = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::ranges::find(only, c.id) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = c.run(ctx);
    } catch (const std::exception& e) {
      r.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.require(secs < c.budget_s, "runtime " + num(secs, 2) + " s (budget " + num(c.budget_s, 0) + " s)");
    failed += !r.pass;
    std::cout << (r.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << "\n";
    for (const auto& note : r.notes) std::cout << "       " << note << "\n";
    std::cout << std::flush;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
