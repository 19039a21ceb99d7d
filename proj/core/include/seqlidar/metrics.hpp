// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "seqlidar/equirect.hpp"
#include "seqlidar/tensor.hpp"

namespace seqlidar {

// ---- BEV histograms -----------------------------------------------------------

struct BevConfig {
  std::size_t grid = 64;
  double radius = 40.0;  // metres; cells cover [-R, R) on x and y
};

/// [G,G] occupancy over (x row, y column), normalized to sum 1; all zero for an
/// empty selection. Cells are half-open, so x = R and x = -R are both dropped
/// along with anything beyond.
Tensor<double> bev_histogram(const PointCloud& cloud, const BevConfig& cfg = {});

/// Unbiased squared MMD with a Gaussian kernel whose bandwidth is the median
/// pairwise distance of the pooled sets. Clamped at 0; not scaled.
double mmd(std::span<const Tensor<double>> a, std::span<const Tensor<double>> b);
inline constexpr double kMmdReportScale = 1e4;

/// Base-2 Jensen-Shannon divergence between the mean histograms of two sets.
double jsd(std::span<const Tensor<double>> a, std::span<const Tensor<double>> b);

// ---- Frechet distance ------------------------------------------------------

struct Moments {
  std::size_t dim = 0;
  std::vector<double> mean;  // dim
  std::vector<double> cov;   // dim x dim, row-major, unbiased
};

/// Rows are samples; needs at least two rows of equal length.
Moments moments(const std::vector<std::vector<double>>& feats);

inline constexpr double kFrechetRidge = 1e-6;

/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2) after adding
/// ridge * I to both covariances.
double frechet_from_moments(const Moments& a, const Moments& b, double ridge = kFrechetRidge);
double frechet(const std::vector<std::vector<double>>& feats_a, const std::vector<std::vector<double>>& feats_b);

// ---- feature extractor -----------------------------------------------------

/// Fixed-seed random circular-conv encoder. Frame features pool one frame; clip
/// features run a (3,1,1) temporal conv over the per-frame maps first, so they
/// depend on frame order.
class FeatureExtractor {
 public:
  static constexpr std::size_t kDim = 192;

  explicit FeatureExtractor(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  /// frame: [2,H,W] image channels.
  std::vector<double> frame_features(const Tensor<float>& frame) const;
  std::vector<std::vector<double>> frame_features(std::span<const Tensor<float>> frames) const;
  std::vector<double> clip_features(std::span<const Tensor<float>> frames) const;

 private:
  Tensor<float> trunk(std::span<const Tensor<float>> frames) const;  // [N,64,h,w]

  std::uint64_t seed_;
  Tensor<float> w1_, b1_, w2_, b2_, w3_, b3_, wt_, bt_;
};

// ---- run evaluation -------------------------------------------------------------

struct EvalConfig {
  SensorConfig sensor;
  BevConfig bev;
  std::uint64_t extractor_seed = 0;
  std::size_t clip_frames = 5;  // FVD uses the first min(F, clip_frames) frames
};

struct EvalReport {
  double mmd_e4 = 0.0;
  double jsd = 0.0;
  double frd = 0.0;
  double fvd = 0.0;
  std::size_t n_gen = 0;  // sequences
  std::size_t n_ref = 0;
  std::uint64_t extractor_seed = 0;

  /// Human-readable table with the non-comparability header.
  std::string to_table() const;
  /// Line-oriented key=value form (metrics.txt).
  std::string to_kv() const;
  static EvalReport from_kv(const std::string& text);
};

using FrameSequence = std::vector<EquirectImage>;

EvalReport evaluate_sets(const std::vector<FrameSequence>& gen, const std::vector<FrameSequence>& ref,
                         const EvalConfig& cfg);

/// Frames of every sequence listed in <dir>/manifest.txt. Throws
/// IngestionError naming every missing file.
std::vector<FrameSequence> read_run_frames(const std::filesystem::path& dir);

EvalReport evaluate_run(const std::filesystem::path& gen_dir, const std::filesystem::path& ref_dir,
                        const EvalConfig& cfg);

/// Writes the key=value report to `path` and the table beside it as <stem>.table.txt.
void write_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace seqlidar
