// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "seqlidar/autograd.hpp"
#include "seqlidar/equirect.hpp"
#include "seqlidar/tensor.hpp"

namespace seqlidar {

/// Per-pixel [sin(2^k pi u), cos(2^k pi u)] for u in {theta_norm, phi_norm},
/// k = 0..K-1, channel order u-major: [4K, H, W].
/// theta_norm = -1 + 2j/W (column left edge), phi_norm = 1 - 2i/H (row top edge).
Tensor<double> fourier_grid(std::size_t H, std::size_t W, std::size_t K);
Tensor<double> fourier_features(const SensorConfig& cfg, std::size_t K);

/// 128-dim style sinusoidal embedding of t * 1000, one row per batch entry.
Tensor<double> timestep_sinusoid(const std::vector<double>& t, std::size_t dim);

struct ModelConfig {
  std::size_t scales = 4;    // resolution levels; 3 for H = 16
  std::size_t channels = 32; // C, widths are C * 2^s
  std::size_t fourier_k = 6;
  std::size_t heads = 4;
  std::size_t blocks = 2;    // EST-Conv blocks per scale on each side
  std::size_t vocab = 14;
  std::size_t time_dim = 128;
  bool control = true;
  std::uint64_t init_seed = 0;

  void validate() const;
  std::size_t width(std::size_t scale) const { return channels << scale; }
  /// Throws DimensionError unless H and W survive every downsample.
  void check_grid(std::size_t H, std::size_t W) const;

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Ordered, named trainable tensors. Blocks hold handles into the same nodes.
template <typename T>
class ParamSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init);
  const std::vector<std::pair<std::string, Var<T>>>& named() const noexcept { return params_; }
  std::vector<Var<T>> vars() const;
  Var<T> get(const std::string& name) const;
  std::size_t count() const;  // total scalar parameters

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
struct Conv2d {
  Var<T> w, b;
  Var<T> operator()(const Var<T>& x, std::size_t stride = 1) const;
};

template <typename T>
struct Linear {
  Var<T> w, b;
  Var<T> operator()(const Var<T>& x) const;
};

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  std::size_t groups = 1;
  Var<T> operator()(const Var<T>& x) const;
};

/// Builds parameters under a name prefix with a shared init stream.
template <typename T>
class Builder {
 public:
  Builder(ParamSet<T>& params, std::mt19937_64& rng) : params_(params), rng_(rng) {}
  Conv2d<T> conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool zero = false);
  Linear<T> linear(const std::string& name, std::size_t in, std::size_t out, bool zero = false);
  GroupNorm<T> norm(const std::string& name, std::size_t channels, std::size_t groups);
  Var<T> tensor(const std::string& name, Tensor<T> init) { return params_.add(name, std::move(init)); }
  /// U(-bound, bound) entries drawn from the shared stream.
  Var<T> uniform(const std::string& name, const Shape& shape, double bound);

 private:
  ParamSet<T>& params_;
  std::mt19937_64& rng_;
};

/// Spatial path (Fourier concat, circular 3x3 convs, timestep modulation) and
/// (3,1,1) temporal path, mixed by alpha = sigmoid(logit).
template <typename T>
class ESTConv {
 public:
  ESTConv(Builder<T>& b, const std::string& name, std::size_t in, std::size_t out, std::size_t fourier_k,
          std::size_t temb_dim);

  /// x [B,F,in,H,W], temb [B,temb_dim] -> [B,F,out,H,W].
  Var<T> forward(const Var<T>& x, const Var<T>& temb) const;
  Var<T> spatial(const Var<T>& x, const Var<T>& temb) const;
  Var<T> temporal(const Var<T>& x) const;

  /// alpha in [0,1]; 0 and 1 map to infinite logits so the blend is exact.
  void set_alpha(double alpha);
  double alpha() const;

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }

  Conv2d<T> conv1, conv2, skip;
  GroupNorm<T> norm;
  Linear<T> time_proj;
  Var<T> temporal_w, temporal_b, logit;

 private:
  Var<T> skip_path(const Var<T>& folded) const;
  std::size_t in_, out_, k_;
};

/// Multi-head self-attention on [N,L,C] tokens with a pre-norm and residual.
template <typename T>
class SelfAttention {
 public:
  SelfAttention(Builder<T>& b, const std::string& name, std::size_t channels, std::size_t heads);
  Var<T> forward(const Var<T>& tokens) const;

  GroupNorm<T> norm;
  Linear<T> qkv, out;
  std::size_t heads;
};

/// Spatial attention over h*w tokens per frame, then temporal attention over F
/// tokens per pixel.
template <typename T>
class ESTTrans {
 public:
  ESTTrans(Builder<T>& b, const std::string& name, std::size_t channels, std::size_t heads);
  /// x [B,F,C,h,w] -> same shape.
  Var<T> forward(const Var<T>& x) const;

  SelfAttention<T> spatial, temporal;
};

/// Bottleneck tokens attend to caption embeddings fused with the timestep.
template <typename T>
class CaptionCrossAttention {
 public:
  CaptionCrossAttention(Builder<T>& b, const std::string& name, std::size_t channels, std::size_t heads,
                        std::size_t vocab, std::size_t temb_dim);
  /// x [B,F,C,h,w], one caption per batch entry, temb [B,temb_dim].
  Var<T> forward(const Var<T>& x, const std::vector<std::vector<std::int32_t>>& captions, const Var<T>& temb) const;

  GroupNorm<T> norm;
  Var<T> table;
  Linear<T> time_proj, q, k, v, out;
  std::size_t heads, vocab;
};

/// Channel concatenation [x_t(2), sketch(2)] -> [B,F,4,H,W].
template <typename T>
Var<T> inject_sketch(const Var<T>& x_t, const Var<T>& sketch);
/// Inverse of inject_sketch on plain tensors.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_sketch(const Tensor<T>& joined);

/// Encoder copy driven by [x_t, prior]; zero-initialized 1x1 projections give
/// one additive residual per decoder skip.
template <typename T>
class ControlBranch {
 public:
  ControlBranch(Builder<T>& b, const ModelConfig& cfg, std::size_t temb_dim);
  std::vector<Var<T>> forward(const Var<T>& x_t, const Var<T>& prior, const Var<T>& temb) const;
  std::size_t scales() const noexcept { return encoder_.size(); }
  std::vector<ESTConv<T>*> blocks();

  Conv2d<T> input;
  std::vector<Conv2d<T>> projections;

 private:
  std::vector<std::vector<ESTConv<T>>> encoder_;
  std::vector<Conv2d<T>> down_;
};

/// Throws ConfigError unless there is one residual per skip with equal shape.
template <typename T>
void check_control_topology(const std::vector<Var<T>>& residuals, const std::vector<Shape>& skips);

template <typename T>
struct ConditionBatch {
  Tensor<T> sketch;                               // [B,F,2,H,W]
  Tensor<T> prior;                                // [B,F,2,H,W]
  std::vector<std::vector<std::int32_t>> captions;  // B entries
};

template <typename T>
class Lidar4DNet {
 public:
  explicit Lidar4DNet(const ModelConfig& cfg);
  Lidar4DNet(const Lidar4DNet&) = delete;
  Lidar4DNet& operator=(const Lidar4DNet&) = delete;

  /// eps_hat for x_t [B,F,2,H,W] at times t (one per batch entry).
  Var<T> forward(const Var<T>& x_t, const std::vector<double>& t, const ConditionBatch<T>& cond) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  /// Every EST-Conv block in backbone and control branch.
  std::vector<ESTConv<T>*> est_conv_blocks();
  void set_all_alphas(double alpha);
  ESTTrans<T>& bottleneck_attention() noexcept { return trans_; }
  CaptionCrossAttention<T>& caption_attention() noexcept { return xattn_; }
  ControlBranch<T>* control() noexcept { return control_ ? &*control_ : nullptr; }

  /// Shapes of the encoder skips (one per scale) for a given input grid.
  std::vector<Shape> skip_shapes(std::size_t B, std::size_t F, std::size_t H, std::size_t W) const;

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  std::mt19937_64 init_rng_;
  Builder<T> builder_;
  Linear<T> time1_, time2_;
  Conv2d<T> in_conv_;
  std::vector<std::vector<ESTConv<T>>> enc_;
  std::vector<Conv2d<T>> down_;
  ESTConv<T> mid1_;
  ESTTrans<T> trans_;
  CaptionCrossAttention<T> xattn_;
  ESTConv<T> mid2_;
  std::vector<std::vector<ESTConv<T>>> dec_;
  std::vector<Conv2d<T>> up_;
  GroupNorm<T> out_norm_;
  Conv2d<T> out_conv_;
  std::optional<ControlBranch<T>> control_;
};

// ---- checkpoints -----------------------------------------------------------
/// One L4DT file per parameter plus index.txt ("name shape file" per line).
template <typename T>
void save_parameters(const std::filesystem::path& dir, const ParamSet<T>& params);
/// Names and shapes must match the index exactly; throws ConfigError otherwise.
template <typename T>
void load_parameters(const std::filesystem::path& dir, ParamSet<T>& params);
/// Raw tensors in index order for optimizer state and EMA snapshots.
template <typename T>
void save_tensors(const std::filesystem::path& dir, const std::vector<std::string>& names,
                  const std::vector<Tensor<T>>& tensors);
template <typename T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& dir, const std::vector<std::string>& names);

}  // namespace seqlidar
