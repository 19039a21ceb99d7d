// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <vector>

#include "seqlidar/geometry.hpp"
#include "seqlidar/tensor.hpp"

namespace seqlidar {

inline constexpr double kDegree = std::numbers::pi / 180.0;

/// Equirectangular sensor geometry. Columns cover azimuth [-pi, pi) left to
/// right; row 0 sits at elev_max.
struct SensorConfig {
  std::size_t H = 16;
  std::size_t W = 128;
  double elev_min = -25.0 * kDegree;
  double elev_max = 3.0 * kDegree;
  double d_max = 80.0;
  bool has_reflectance = true;

  void validate() const;

  double azimuth_step() const { return 2.0 * std::numbers::pi / static_cast<double>(W); }
  double elevation_step() const { return (elev_max - elev_min) / static_cast<double>(H); }
  double column_azimuth(std::size_t j) const { return -std::numbers::pi + (static_cast<double>(j) + 0.5) * azimuth_step(); }
  double row_elevation(std::size_t i) const { return elev_max - (static_cast<double>(i) + 0.5) * elevation_step(); }

  friend bool operator==(const SensorConfig&, const SensorConfig&) = default;
};

struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double reflectance = 0.0;

  Vec3 position() const { return {x, y, z}; }
  friend bool operator==(const LidarPoint&, const LidarPoint&) = default;
};

using PointCloud = std::vector<LidarPoint>;

/// channels [2,H,W] = (normalized range, reflectance); invalid bins hold (-1, 0).
struct EquirectImage {
  Tensor<float> channels;
  std::vector<std::uint8_t> mask;  // H*W, 1 = occupied

  static EquirectImage empty(const SensorConfig& cfg);
  std::size_t valid_count() const;
  Tensor<float> mask_tensor() const;
};

double scale_range(double d, double d_max);
double unscale_range(double normalized, double d_max);

struct PixelIndex {
  std::size_t row;
  std::size_t col;
};

/// Unit vector through the center of bin (row, col).
Vec3 bin_direction(std::size_t row, std::size_t col, const SensorConfig& cfg);

/// Bin hit by a direction, or nullopt when the elevation lies outside the FOV.
std::optional<PixelIndex> bin_of(Vec3 p, const SensorConfig& cfg);

EquirectImage project(const PointCloud& cloud, const SensorConfig& cfg);
PointCloud unproject(const EquirectImage& image, const SensorConfig& cfg);

/// Channel 0: curbs and lane lines; channel 1: box wireframes. Binary.
Tensor<float> render_road_sketch(const std::vector<Polyline>& layout, const std::vector<OrientedBox>& boxes,
                                 const SensorConfig& cfg);
/// Sketch pixels of a single box wireframe, as (row, col) pairs in raster order.
std::vector<PixelIndex> box_wireframe_pixels(const OrientedBox& box, const SensorConfig& cfg);

Tensor<float> render_object_prior(const PointCloud& object_points, const SensorConfig& cfg);

// ---- IO ------------------------------------------------------------------
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);
/// [N,4] rows of (x, y, z, reflectance); N must be positive.
Tensor<double> cloud_to_tensor(const PointCloud& cloud);
PointCloud tensor_to_cloud(const Tensor<double>& t);

void write_image(const std::filesystem::path& channels_path, const std::filesystem::path& mask_path,
                 const EquirectImage& image);
EquirectImage read_image(const std::filesystem::path& channels_path, const std::filesystem::path& mask_path);
/// Rebuilds an image from raw channels (for instance generated frames): values
/// are clipped to [-1,1] and a bin is valid when its decoded range exceeds
/// `min_range`. Invalid bins are reset to (-1, 0).
EquirectImage image_from_channels(Tensor<float> channels, const SensorConfig& cfg, double min_range = 0.0);

}  // namespace seqlidar
