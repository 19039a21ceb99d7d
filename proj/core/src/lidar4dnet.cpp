// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/lidar4dnet.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <tuple>

#include "seqlidar/errors.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar {

namespace o = ops;

Tensor<double> fourier_grid(std::size_t H, std::size_t W, std::size_t K) {
  if (H == 0 || W == 0 || K == 0) throw DimensionError("fourier_grid: H, W and K must be positive");
  Tensor<double> out({4 * K, H, W});
  const std::size_t plane = H * W;
  for (std::size_t i = 0; i < H; ++i) {
    const double phi = 1.0 - 2.0 * static_cast<double>(i) / static_cast<double>(H);
    for (std::size_t j = 0; j < W; ++j) {
      const double theta = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(W);
      const double u[2] = {theta, phi};
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t k = 0; k < K; ++k) {
          const double arg = std::ldexp(std::numbers::pi, static_cast<int>(k)) * u[a];
          const std::size_t c = a * 2 * K + 2 * k;
          out[c * plane + i * W + j] = std::sin(arg);
          out[(c + 1) * plane + i * W + j] = std::cos(arg);
        }
      }
    }
  }
  return out;
}

Tensor<double> fourier_features(const SensorConfig& cfg, std::size_t K) {
  cfg.validate();
  return fourier_grid(cfg.H, cfg.W, K);
}

Tensor<double> timestep_sinusoid(const std::vector<double>& t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep_sinusoid: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  Tensor<double> out({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = t[b] * 1000.0 * freq;
      out[b * dim + i] = std::sin(arg);
      out[b * dim + half + i] = std::cos(arg);
    }
  }
  return out;
}

// ---- config ----------------------------------------------------------------
void ModelConfig::validate() const {
  if (scales < 1 || scales > 6) throw ConfigError("model: scales must be in [1, 6]");
  if (channels < 1) throw ConfigError("model: channels must be positive");
  if (fourier_k < 1) throw ConfigError("model: fourier_k must be >= 1");
  if (blocks < 1) throw ConfigError("model: blocks must be >= 1");
  if (vocab < 1) throw ConfigError("model: vocab must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("model: time_dim must be even");
  if (heads < 1 || width(scales - 1) % heads != 0) {
    throw ConfigError("model: heads must divide the bottleneck width " + std::to_string(width(scales - 1)));
  }
}

void ModelConfig::check_grid(std::size_t H, std::size_t W) const {
  const std::size_t f = std::size_t{1} << (scales - 1);
  if (H % f != 0 || W % f != 0) {
    throw DimensionError("model: H=" + std::to_string(H) + ", W=" + std::to_string(W) + " must be divisible by " +
                         std::to_string(f) + " for " + std::to_string(scales) + " scales");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream s;
  s << "scales = " << scales << "\nchannels = " << channels << "\nfourier_k = " << fourier_k << "\nheads = " << heads
    << "\nblocks = " << blocks << "\nvocab = " << vocab << "\ntime_dim = " << time_dim
    << "\ncontrol = " << (control ? "true" : "false") << "\ninit_seed = " << init_seed << "\n";
  return s.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string v) {
      const auto a = v.find_first_not_of(" \t\r");
      const auto b = v.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    try {
      if (key == "scales") c.scales = std::stoul(val);
      else if (key == "channels") c.channels = std::stoul(val);
      else if (key == "fourier_k") c.fourier_k = std::stoul(val);
      else if (key == "heads") c.heads = std::stoul(val);
      else if (key == "blocks") c.blocks = std::stoul(val);
      else if (key == "vocab") c.vocab = std::stoul(val);
      else if (key == "time_dim") c.time_dim = std::stoul(val);
      else if (key == "control") c.control = (val == "true" || val == "1");
      else if (key == "init_seed") c.init_seed = std::stoull(val);
    } catch (const std::logic_error&) {
      throw ConfigError("model: bad value for " + key + ": " + val);
    }
  }
  return c;
}

// ---- parameters --------------------------------------------------------------
template <typename T>
Var<T> ParamSet<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  index_[name] = params_.size();
  params_.emplace_back(name, Var<T>(std::move(init), true));
  return params_.back().second;
}

template <typename T>
std::vector<Var<T>> ParamSet<T>::vars() const {
  std::vector<Var<T>> v;
  v.reserve(params_.size());
  for (const auto& [n, p] : params_) v.push_back(p);
  return v;
}

template <typename T>
Var<T> ParamSet<T>::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second].second;
}

template <typename T>
std::size_t ParamSet<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.numel();
  return n;
}

template <typename T>
Var<T> Conv2d<T>::operator()(const Var<T>& x, std::size_t stride) const {
  return o::conv2d_circular(x, w, b, stride);
}

template <typename T>
Var<T> Linear<T>::operator()(const Var<T>& x) const {
  return o::linear(x, w, b);
}

template <typename T>
Var<T> GroupNorm<T>::operator()(const Var<T>& x) const {
  return o::group_norm(x, groups, gamma, beta);
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

std::size_t norm_groups(std::size_t channels) { return std::gcd(std::size_t{8}, channels); }

// [B,F,C,H,W] <-> [B*F,C,H,W]
template <typename T>
Var<T> fold(const Var<T>& x) {
  if (x.value().rank() != 5) throw DimensionError("expected [B,F,C,H,W], got " + shape_str(x.shape()));
  return o::reshape(x, {x.dim(0) * x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
}

template <typename T>
Var<T> unfold(const Var<T>& x, std::size_t B, std::size_t F) {
  return o::reshape(x, {B, F, x.dim(1), x.dim(2), x.dim(3)});
}

// Constant Fourier map repeated over N folded frames.
template <typename T>
Var<T> fourier_batch(std::size_t N, std::size_t H, std::size_t W, std::size_t K) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::shared_ptr<const Tensor<double>>> cache;
  std::shared_ptr<const Tensor<double>> grid;
  {
    std::lock_guard lock(mu);
    auto& slot = cache[{H, W, K}];
    if (!slot) slot = std::make_shared<const Tensor<double>>(fourier_grid(H, W, K));
    grid = slot;
  }
  const Tensor<double>& g = *grid;
  Tensor<T> out({N, 4 * K, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < g.numel(); ++k) out[n * g.numel() + k] = static_cast<T>(g[k]);
  }
  return Var<T>(std::move(out));
}

// [N*L, C] -> [N*heads, L, d]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t N, std::size_t L, std::size_t heads) {
  const std::size_t C = x.dim(1), d = C / heads;
  return o::reshape(o::permute(o::reshape(x, {N, L, heads, d}), {0, 2, 1, 3}), {N * heads, L, d});
}

// [N*heads, L, d] -> [N*L, C]
template <typename T>
Var<T> merge_heads(const Var<T>& x, std::size_t N, std::size_t heads) {
  const std::size_t L = x.dim(1), d = x.dim(2);
  return o::reshape(o::permute(o::reshape(x, {N, heads, L, d}), {0, 2, 1, 3}), {N * L, heads * d});
}

template <typename Fn>
auto in_module(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(path + ": " + e.what());
  } catch (const VocabularyError& e) {
    throw VocabularyError(path + ": " + e.what());
  }
}

}  // namespace

template <typename T>
Conv2d<T> Builder<T>::conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool zero) {
  const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in * k * k));
  Conv2d<T> c;
  c.w = params_.add(name + ".w", zero ? Tensor<T>({out, in, k, k}) : uniform_tensor<T>({out, in, k, k}, bound, rng_));
  c.b = params_.add(name + ".b", zero ? Tensor<T>({out}) : uniform_tensor<T>({out}, bound, rng_));
  return c;
}

template <typename T>
Linear<T> Builder<T>::linear(const std::string& name, std::size_t in, std::size_t out, bool zero) {
  const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  Linear<T> l;
  l.w = params_.add(name + ".w", zero ? Tensor<T>({in, out}) : uniform_tensor<T>({in, out}, bound, rng_));
  l.b = params_.add(name + ".b", zero ? Tensor<T>({out}) : uniform_tensor<T>({out}, bound, rng_));
  return l;
}

template <typename T>
Var<T> Builder<T>::uniform(const std::string& name, const Shape& shape, double bound) {
  return params_.add(name, uniform_tensor<T>(shape, bound, rng_));
}

template <typename T>
GroupNorm<T> Builder<T>::norm(const std::string& name, std::size_t channels, std::size_t groups) {
  GroupNorm<T> n;
  n.gamma = params_.add(name + ".gamma", Tensor<T>({channels}, T{1}));
  n.beta = params_.add(name + ".beta", Tensor<T>({channels}));
  n.groups = groups;
  return n;
}

// ---- EST-Conv ------------------------------------------------------------------
template <typename T>
ESTConv<T>::ESTConv(Builder<T>& b, const std::string& name, std::size_t in, std::size_t out, std::size_t fourier_k,
                    std::size_t temb_dim)
    : in_(in), out_(out), k_(fourier_k) {
  conv1 = b.conv(name + ".conv1", in + 4 * fourier_k, out, 3);
  norm = b.norm(name + ".norm", out, norm_groups(out));
  time_proj = b.linear(name + ".time", temb_dim, 2 * out);
  conv2 = b.conv(name + ".conv2", out, out, 3);
  if (in != out) skip = b.conv(name + ".skip", in, out, 1);
  temporal_w = b.uniform(name + ".temporal.w", {out, in, 3, 1, 1}, 1.0 / std::sqrt(static_cast<double>(3 * in)));
  temporal_b = b.tensor(name + ".temporal.b", Tensor<T>({out}));
  logit = b.tensor(name + ".alpha_logit", Tensor<T>({1}));
}

template <typename T>
Var<T> ESTConv<T>::skip_path(const Var<T>& folded) const {
  return in_ == out_ ? folded : skip(folded);
}

template <typename T>
Var<T> ESTConv<T>::spatial(const Var<T>& x, const Var<T>& temb) const {
  const std::size_t B = x.dim(0), F = x.dim(1), H = x.dim(3), W = x.dim(4);
  if (x.dim(2) != in_) throw DimensionError("est_conv: expected " + std::to_string(in_) + " channels, got " + shape_str(x.shape()));
  if (temb.value().rank() != 2 || temb.dim(0) != B) throw DimensionError("est_conv: timestep embedding " + shape_str(temb.shape()));
  const Var<T> xf = fold(x);
  Var<T> h = conv1(o::concat<T>({xf, fourier_batch<T>(B * F, H, W, k_)}, 1));
  h = norm(h);
  const Var<T> mod = time_proj(o::silu(temb));
  const Var<T> sc = o::repeat_rows(o::slice(mod, 1, 0, out_), F);
  const Var<T> sh = o::repeat_rows(o::slice(mod, 1, out_, 2 * out_), F);
  h = conv2(o::silu(o::channel_modulate(h, sc, sh)));
  return unfold(o::add(h, skip_path(xf)), B, F);
}

template <typename T>
Var<T> ESTConv<T>::temporal(const Var<T>& x) const {
  if (x.value().rank() != 5 || x.dim(2) != in_) throw DimensionError("est_conv: bad input " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1);
  return o::add(o::conv3d_temporal_bf(x, temporal_w, temporal_b), unfold(skip_path(fold(x)), B, F));
}

template <typename T>
Var<T> ESTConv<T>::forward(const Var<T>& x, const Var<T>& temb) const {
  return o::blend(o::sigmoid(logit), spatial(x, temb), temporal(x));
}

template <typename T>
void ESTConv<T>::set_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw RangeError("alpha must lie in [0, 1]");
  double l = 0.0;
  if (alpha == 1.0) l = std::numeric_limits<double>::infinity();
  else if (alpha == 0.0) l = -std::numeric_limits<double>::infinity();
  else l = std::log(alpha / (1.0 - alpha));
  logit.value_mut()[0] = static_cast<T>(l);
}

template <typename T>
double ESTConv<T>::alpha() const {
  return 1.0 / (1.0 + std::exp(-static_cast<double>(logit.value()[0])));
}

// ---- attention -------------------------------------------------------------------
template <typename T>
SelfAttention<T>::SelfAttention(Builder<T>& b, const std::string& name, std::size_t channels, std::size_t h)
    : heads(h) {
  norm = b.norm(name + ".norm", channels, 1);
  qkv = b.linear(name + ".qkv", channels, 3 * channels);
  out = b.linear(name + ".out", channels, channels, true);
}

template <typename T>
Var<T> SelfAttention<T>::forward(const Var<T>& tokens) const {
  const std::size_t N = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  const Var<T> flat = o::reshape(tokens, {N * L, C});
  const Var<T> p = qkv(norm(flat));
  const Var<T> q = split_heads(o::slice(p, 1, 0, C), N, L, heads);
  const Var<T> k = split_heads(o::slice(p, 1, C, 2 * C), N, L, heads);
  const Var<T> v = split_heads(o::slice(p, 1, 2 * C, 3 * C), N, L, heads);
  const Var<T> a = out(merge_heads(o::attention(q, k, v), N, heads));
  return o::reshape(o::add(flat, a), {N, L, C});
}

template <typename T>
ESTTrans<T>::ESTTrans(Builder<T>& b, const std::string& name, std::size_t channels, std::size_t heads)
    : spatial(b, name + ".spatial", channels, heads), temporal(b, name + ".temporal", channels, heads) {}

template <typename T>
Var<T> ESTTrans<T>::forward(const Var<T>& x) const {
  if (x.value().rank() != 5) throw DimensionError("est_trans: expected [B,F,C,h,w], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1), C = x.dim(2), h = x.dim(3), w = x.dim(4), L = h * w;
  // Frames stacked on the batch axis: [B*F, L, C].
  Var<T> tok = o::permute(o::reshape(x, {B * F, C, L}), {0, 2, 1});
  tok = spatial.forward(tok);
  // Pixels stacked on the batch axis: [B*L, F, C].
  tok = o::reshape(o::permute(o::reshape(tok, {B, F, L, C}), {0, 2, 1, 3}), {B * L, F, C});
  tok = temporal.forward(tok);
  return o::reshape(o::permute(o::reshape(tok, {B, L, F, C}), {0, 2, 3, 1}), {B, F, C, h, w});
}

template <typename T>
CaptionCrossAttention<T>::CaptionCrossAttention(Builder<T>& b, const std::string& name, std::size_t channels,
                                                std::size_t h, std::size_t vocab_size, std::size_t temb_dim)
    : heads(h), vocab(vocab_size) {
  norm = b.norm(name + ".norm", channels, 1);
  table = b.uniform(name + ".embedding", {vocab_size, channels}, 1.0);
  time_proj = b.linear(name + ".time", temb_dim, channels);
  q = b.linear(name + ".q", channels, channels);
  k = b.linear(name + ".k", channels, channels);
  v = b.linear(name + ".v", channels, channels);
  out = b.linear(name + ".out", channels, channels, true);
}

template <typename T>
Var<T> CaptionCrossAttention<T>::forward(const Var<T>& x, const std::vector<std::vector<std::int32_t>>& captions,
                                         const Var<T>& temb) const {
  if (x.value().rank() != 5) throw DimensionError("caption attention: expected [B,F,C,h,w], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1), C = x.dim(2), h = x.dim(3), w = x.dim(4), L = h * w;
  if (captions.size() != B) throw DimensionError("caption attention: " + std::to_string(captions.size()) + " captions for batch " + std::to_string(B));
  std::vector<Var<T>> parts;
  for (std::size_t bi = 0; bi < B; ++bi) {
    const auto& ids = captions[bi];
    const Var<T> xb = o::slice(x, 0, bi, bi + 1);
    if (ids.empty()) {
      parts.push_back(xb);
      continue;
    }
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw VocabularyError("unknown caption token id " + std::to_string(id));
    }
    const Var<T> flat = o::reshape(o::permute(o::reshape(xb, {F, C, L}), {0, 2, 1}), {F * L, C});
    const Var<T> tb = time_proj(o::silu(o::slice(temb, 0, bi, bi + 1)));
    const Var<T> e = o::add_row(o::embedding(table, std::span<const std::int32_t>(ids)), tb);
    const Var<T> qh = split_heads(q(norm(flat)), 1, F * L, heads);
    const Var<T> kh = split_heads(k(e), 1, ids.size(), heads);
    const Var<T> vh = split_heads(v(e), 1, ids.size(), heads);
    const Var<T> y = o::add(flat, out(merge_heads(o::attention(qh, kh, vh), 1, heads)));
    parts.push_back(o::reshape(o::permute(o::reshape(y, {F, L, C}), {0, 2, 1}), {1, F, C, h, w}));
  }
  return parts.size() == 1 ? parts[0] : o::concat(parts, 0);
}

// ---- sketch injection ------------------------------------------------------------
template <typename T>
Var<T> inject_sketch(const Var<T>& x_t, const Var<T>& sketch) {
  if (x_t.value().rank() != 5 || x_t.dim(2) != 2) throw DimensionError("inject_sketch: x_t must be [B,F,2,H,W], got " + shape_str(x_t.shape()));
  if (sketch.shape() != x_t.shape()) {
    throw DimensionError("inject_sketch: sketch " + shape_str(sketch.shape()) + " does not match x_t " + shape_str(x_t.shape()));
  }
  return o::concat<T>({x_t, sketch}, 2);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_sketch(const Tensor<T>& joined) {
  if (joined.rank() != 5 || joined.dim(2) != 4) throw DimensionError("split_sketch: expected [B,F,4,H,W]");
  NoGradGuard guard;
  const Var<T> j(joined);
  return {o::slice(j, 2, 0, 2).value(), o::slice(j, 2, 2, 4).value()};
}

// ---- control branch --------------------------------------------------------------
template <typename T>
ControlBranch<T>::ControlBranch(Builder<T>& b, const ModelConfig& cfg, std::size_t temb_dim) {
  input = b.conv("ctrl.in", 4, cfg.channels, 3);
  for (std::size_t s = 0; s < cfg.scales; ++s) {
    std::vector<ESTConv<T>> level;
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      const std::size_t in = i > 0 ? cfg.width(s) : (s == 0 ? cfg.channels : cfg.width(s - 1));
      level.emplace_back(b, "ctrl.enc." + std::to_string(s) + "." + std::to_string(i), in, cfg.width(s), cfg.fourier_k, temb_dim);
    }
    encoder_.push_back(std::move(level));
    projections.push_back(b.conv("ctrl.proj." + std::to_string(s), cfg.width(s), cfg.width(s), 1, true));
    if (s + 1 < cfg.scales) down_.push_back(b.conv("ctrl.down." + std::to_string(s), cfg.width(s), cfg.width(s), 3));
  }
}

template <typename T>
std::vector<ESTConv<T>*> ControlBranch<T>::blocks() {
  std::vector<ESTConv<T>*> out;
  for (auto& level : encoder_)
    for (auto& b : level) out.push_back(&b);
  return out;
}

template <typename T>
std::vector<Var<T>> ControlBranch<T>::forward(const Var<T>& x_t, const Var<T>& prior, const Var<T>& temb) const {
  if (prior.shape() != x_t.shape()) {
    throw DimensionError("control: prior " + shape_str(prior.shape()) + " does not match x_t " + shape_str(x_t.shape()));
  }
  const std::size_t B = x_t.dim(0), F = x_t.dim(1);
  Var<T> h = unfold(input(fold(o::concat<T>({x_t, prior}, 2))), B, F);
  std::vector<Var<T>> residuals;
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    for (const auto& blk : encoder_[s]) h = blk.forward(h, temb);
    residuals.push_back(unfold(projections[s](fold(h)), B, F));
    if (s < down_.size()) h = unfold(down_[s](fold(h), 2), B, F);
  }
  return residuals;
}

// ---- full network ----------------------------------------------------------------
template <typename T>
Lidar4DNet<T>::Lidar4DNet(const ModelConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      init_rng_(cfg.init_seed),
      builder_(params_, init_rng_),
      time1_(builder_.linear("time.fc1", cfg.time_dim, 4 * cfg.channels)),
      time2_(builder_.linear("time.fc2", 4 * cfg.channels, 4 * cfg.channels)),
      in_conv_(builder_.conv("in", 4, cfg.channels, 3)),
      enc_([&] {
        std::vector<std::vector<ESTConv<T>>> enc;
        for (std::size_t s = 0; s < cfg.scales; ++s) {
          std::vector<ESTConv<T>> level;
          for (std::size_t i = 0; i < cfg.blocks; ++i) {
            const std::size_t in = i > 0 ? cfg.width(s) : (s == 0 ? cfg.channels : cfg.width(s - 1));
            level.emplace_back(builder_, "enc." + std::to_string(s) + "." + std::to_string(i), in, cfg.width(s),
                               cfg.fourier_k, 4 * cfg.channels);
          }
          enc.push_back(std::move(level));
        }
        return enc;
      }()),
      down_([&] {
        std::vector<Conv2d<T>> down;
        for (std::size_t s = 0; s + 1 < cfg.scales; ++s) {
          down.push_back(builder_.conv("down." + std::to_string(s), cfg.width(s), cfg.width(s), 3));
        }
        return down;
      }()),
      mid1_(builder_, "mid.0", cfg.width(cfg.scales - 1), cfg.width(cfg.scales - 1), cfg.fourier_k, 4 * cfg.channels),
      trans_(builder_, "mid.trans", cfg.width(cfg.scales - 1), cfg.heads),
      xattn_(builder_, "mid.caption", cfg.width(cfg.scales - 1), cfg.heads, cfg.vocab, 4 * cfg.channels),
      mid2_(builder_, "mid.1", cfg.width(cfg.scales - 1), cfg.width(cfg.scales - 1), cfg.fourier_k, 4 * cfg.channels),
      dec_([&] {
        std::vector<std::vector<ESTConv<T>>> dec(cfg.scales);
        for (std::size_t r = 0; r < cfg.scales; ++r) {
          const std::size_t s = cfg.scales - 1 - r;
          for (std::size_t i = 0; i < cfg.blocks; ++i) {
            const std::size_t in = i == 0 ? 2 * cfg.width(s) : cfg.width(s);
            dec[s].emplace_back(builder_, "dec." + std::to_string(s) + "." + std::to_string(i), in, cfg.width(s),
                                cfg.fourier_k, 4 * cfg.channels);
          }
        }
        return dec;
      }()),
      up_([&] {
        std::vector<Conv2d<T>> up(cfg.scales);
        for (std::size_t r = 0; r + 1 < cfg.scales; ++r) {
          const std::size_t s = cfg.scales - 1 - r;
          up[s] = builder_.conv("up." + std::to_string(s), cfg.width(s), cfg.width(s - 1), 3);
        }
        return up;
      }()),
      out_norm_(builder_.norm("out.norm", cfg.channels, norm_groups(cfg.channels))),
      out_conv_(builder_.conv("out.conv", cfg.channels, 2, 3, true)) {
  if (cfg.control) control_.emplace(builder_, cfg, 4 * cfg.channels);
}

template <typename T>
std::vector<Shape> Lidar4DNet<T>::skip_shapes(std::size_t B, std::size_t F, std::size_t H, std::size_t W) const {
  cfg_.check_grid(H, W);
  std::vector<Shape> s;
  for (std::size_t k = 0; k < cfg_.scales; ++k) s.push_back({B, F, cfg_.width(k), H >> k, W >> k});
  return s;
}

template <typename T>
void check_control_topology(const std::vector<Var<T>>& residuals, const std::vector<Shape>& skips) {
  if (residuals.size() != skips.size()) {
    throw ConfigError("control branch yields " + std::to_string(residuals.size()) + " residuals for " +
                      std::to_string(skips.size()) + " skips");
  }
  for (std::size_t s = 0; s < skips.size(); ++s) {
    if (residuals[s].shape() != skips[s]) {
      throw ConfigError("control residual " + std::to_string(s) + " is " + shape_str(residuals[s].shape()) +
                        ", skip is " + shape_str(skips[s]));
    }
  }
}

template <typename T>
Var<T> Lidar4DNet<T>::forward(const Var<T>& x_t, const std::vector<double>& t, const ConditionBatch<T>& cond) const {
  if (x_t.value().rank() != 5 || x_t.dim(2) != 2) throw DimensionError("forward: x_t must be [B,F,2,H,W], got " + shape_str(x_t.shape()));
  const std::size_t B = x_t.dim(0), F = x_t.dim(1), H = x_t.dim(3), W = x_t.dim(4);
  cfg_.check_grid(H, W);
  if (t.size() != B) throw DimensionError("forward: " + std::to_string(t.size()) + " timesteps for batch " + std::to_string(B));
  if (cond.sketch.shape() != x_t.shape()) throw DimensionError("forward: sketch " + shape_str(cond.sketch.shape()) + " vs x_t " + shape_str(x_t.shape()));
  if (cond.prior.shape() != x_t.shape()) throw DimensionError("forward: prior " + shape_str(cond.prior.shape()) + " vs x_t " + shape_str(x_t.shape()));

  const Var<T> temb = time2_(o::silu(time1_(Var<T>(timestep_sinusoid(t, cfg_.time_dim).template cast<T>()))));
  Var<T> h = in_module("input", [&] { return unfold(in_conv_(fold(inject_sketch(x_t, Var<T>(cond.sketch)))), B, F); });

  std::vector<Var<T>> skips;
  for (std::size_t s = 0; s < cfg_.scales; ++s) {
    h = in_module("enc." + std::to_string(s), [&] {
      Var<T> y = h;
      for (const auto& blk : enc_[s]) y = blk.forward(y, temb);
      return y;
    });
    skips.push_back(h);
    if (s < down_.size()) h = unfold(down_[s](fold(h), 2), B, F);
  }
  h = in_module("mid", [&] {
    Var<T> y = mid1_.forward(h, temb);
    y = trans_.forward(y);
    y = xattn_.forward(y, cond.captions, temb);
    return mid2_.forward(y, temb);
  });

  if (control_) {
    const auto res = in_module("ctrl", [&] { return control_->forward(x_t, Var<T>(cond.prior), temb); });
    std::vector<Shape> shapes;
    for (const auto& sk : skips) shapes.push_back(sk.shape());
    check_control_topology(res, shapes);
    for (std::size_t s = 0; s < skips.size(); ++s) skips[s] = o::add(skips[s], res[s]);
  }

  for (std::size_t r = 0; r < cfg_.scales; ++r) {
    const std::size_t s = cfg_.scales - 1 - r;
    h = in_module("dec." + std::to_string(s), [&] {
      Var<T> y = o::concat<T>({h, skips[s]}, 2);
      for (const auto& blk : dec_[s]) y = blk.forward(y, temb);
      if (s > 0) y = unfold(up_[s](o::upsample_nearest2x(fold(y))), B, F);
      return y;
    });
  }
  return unfold(out_conv_(o::silu(out_norm_(fold(h)))), B, F);
}

template <typename T>
std::vector<ESTConv<T>*> Lidar4DNet<T>::est_conv_blocks() {
  std::vector<ESTConv<T>*> out;
  for (auto& level : enc_)
    for (auto& b : level) out.push_back(&b);
  out.push_back(&mid1_);
  out.push_back(&mid2_);
  for (auto& level : dec_)
    for (auto& b : level) out.push_back(&b);
  if (control_) {
    for (auto* b : control_->blocks()) out.push_back(b);
  }
  return out;
}

template <typename T>
void Lidar4DNet<T>::set_all_alphas(double alpha) {
  for (auto* b : est_conv_blocks()) b->set_alpha(alpha);
}

// ---- checkpoints -------------------------------------------------------------------
namespace {

std::string dims_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

struct IndexEntry {
  std::string name;
  std::string dims;
  std::string file;
};

std::vector<IndexEntry> read_index(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.txt");
  if (!in) throw IoError("cannot read " + (dir / "index.txt").string());
  std::vector<IndexEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    IndexEntry e;
    if (!(ls >> e.name >> e.dims >> e.file)) throw IoError("malformed index line: " + line);
    out.push_back(e);
  }
  return out;
}

}  // namespace

template <typename T>
void save_tensors(const std::filesystem::path& dir, const std::vector<std::string>& names,
                  const std::vector<Tensor<T>>& tensors) {
  if (names.size() != tensors.size()) throw ContractError("save_tensors: names and tensors differ in count");
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  if (!idx) throw IoError("cannot write " + (dir / "index.txt").string());
  for (std::size_t i = 0; i < names.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof file, "p%04zu.l4dt", i);
    write_l4dt(dir / file, tensors[i]);
    idx << names[i] << ' ' << dims_text(tensors[i].shape()) << ' ' << file << '\n';
  }
}

template <typename T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  const auto entries = read_index(dir);
  if (entries.size() != names.size()) {
    throw ConfigError("checkpoint " + dir.string() + " has " + std::to_string(entries.size()) + " tensors, expected " +
                      std::to_string(names.size()));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (entries[i].name != names[i]) throw ConfigError("checkpoint tensor " + std::to_string(i) + " is " + entries[i].name + ", expected " + names[i]);
    out.push_back(read_l4dt<T>(dir / entries[i].file));
    if (dims_text(out.back().shape()) != entries[i].dims) throw ConfigError("checkpoint tensor " + names[i] + " shape disagrees with index");
  }
  return out;
}

template <typename T>
void save_parameters(const std::filesystem::path& dir, const ParamSet<T>& params) {
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;
  for (const auto& [n, p] : params.named()) {
    names.push_back(n);
    values.push_back(p.value());
  }
  save_tensors(dir, names, values);
}

template <typename T>
void load_parameters(const std::filesystem::path& dir, ParamSet<T>& params) {
  std::vector<std::string> names;
  for (const auto& [n, p] : params.named()) names.push_back(n);
  auto values = load_tensors<T>(dir, names);
  for (std::size_t i = 0; i < names.size(); ++i) {
    Var<T> p = params.named()[i].second;
    if (values[i].shape() != p.shape()) {
      throw ConfigError("parameter " + names[i] + " is " + shape_str(values[i].shape()) + " in checkpoint, model expects " + shape_str(p.shape()));
    }
    p.value_mut() = std::move(values[i]);
  }
}

#define SEQLIDAR_INSTANTIATE_NET(T)                                                                               \
  template class ParamSet<T>;                                                                                     \
  template struct Conv2d<T>;                                                                                      \
  template struct Linear<T>;                                                                                      \
  template struct GroupNorm<T>;                                                                                   \
  template class Builder<T>;                                                                                      \
  template class ESTConv<T>;                                                                                      \
  template class SelfAttention<T>;                                                                                \
  template class ESTTrans<T>;                                                                                     \
  template class CaptionCrossAttention<T>;                                                                        \
  template class ControlBranch<T>;                                                                                \
  template class Lidar4DNet<T>;                                                                                   \
  template Var<T> inject_sketch<T>(const Var<T>&, const Var<T>&);                                                 \
  template std::pair<Tensor<T>, Tensor<T>> split_sketch<T>(const Tensor<T>&);                                     \
  template void check_control_topology<T>(const std::vector<Var<T>>&, const std::vector<Shape>&);                 \
  template void save_parameters<T>(const std::filesystem::path&, const ParamSet<T>&);                             \
  template void load_parameters<T>(const std::filesystem::path&, ParamSet<T>&);                                   \
  template void save_tensors<T>(const std::filesystem::path&, const std::vector<std::string>&,                    \
                                const std::vector<Tensor<T>>&);                                                   \
  template std::vector<Tensor<T>> load_tensors<T>(const std::filesystem::path&, const std::vector<std::string>&);

SEQLIDAR_INSTANTIATE_NET(float)
SEQLIDAR_INSTANTIATE_NET(double)

}  // namespace seqlidar
