// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "seqlidar/equirect.hpp"
#include "seqlidar/errors.hpp"

using namespace seqlidar;

namespace {

SensorConfig desk() { return SensorConfig{}; }

LidarPoint at_direction(double elev, double az, double range, double refl = 0.5) {
  return {range * std::cos(elev) * std::cos(az), range * std::cos(elev) * std::sin(az), range * std::sin(elev), refl};
}

// Random points strictly inside bins (fractional offsets in [0.2, 0.8]).
PointCloud interior_cloud(const SensorConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> row(0, cfg.H - 1), col(0, cfg.W - 1);
  std::uniform_real_distribution<double> frac(0.2, 0.8), range(0.5, cfg.d_max), refl(0.0, 1.0);
  PointCloud cloud;
  for (std::size_t k = 0; k < n; ++k) {
    const double el = cfg.elev_max - (static_cast<double>(row(rng)) + frac(rng)) * cfg.elevation_step();
    const double az = -std::numbers::pi + (static_cast<double>(col(rng)) + frac(rng)) * cfg.azimuth_step();
    cloud.push_back(at_direction(el, az, range(rng), refl(rng)));
  }
  return cloud;
}

std::set<std::pair<std::size_t, std::size_t>> nonzero(const Tensor<float>& t, std::size_t channel) {
  const std::size_t H = t.dim(1), W = t.dim(2);
  std::set<std::pair<std::size_t, std::size_t>> s;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      if (t.at({channel, i, j}) != 0.0f) s.insert({i, j});
  return s;
}

}  // namespace

TEST(ScaleRange, EndpointsAndLogRatio) {
  EXPECT_EQ(scale_range(0.0, 80.0), -1.0);
  EXPECT_EQ(scale_range(80.0, 80.0), 1.0);
  // log 9 / log 81 = 1/2 since 81 = 9^2, so the normalized value is 0.
  EXPECT_NEAR(scale_range(8.0, 80.0), 0.0, 1e-15);
  EXPECT_NEAR(unscale_range(0.0, 80.0), 8.0, 1e-12);
}

TEST(ScaleRange, RejectsOutOfRange) {
  EXPECT_THROW(scale_range(-0.1, 80.0), RangeError);
  EXPECT_THROW(scale_range(80.01, 80.0), RangeError);
  EXPECT_THROW(unscale_range(1.5, 80.0), RangeError);
}

TEST(ScaleRange, StrictlyMonotoneBijection) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 80.0);
  std::vector<double> d(2000);
  for (auto& v : d) v = u(rng);
  std::sort(d.begin(), d.end());
  double prev = -2.0;
  for (double v : d) {
    const double s = scale_range(v, 80.0);
    EXPECT_GT(s, prev);
    prev = s;
    EXPECT_LE(std::abs(unscale_range(s, 80.0) - v), 1e-6 * std::max(v, 1e-300) + 1e-300);
  }
}

TEST(Project, BinCenterPointLandsInPredictedPixel) {
  const auto cfg = desk();
  for (auto [i, j] : {std::pair<std::size_t, std::size_t>{0, 0}, {5, 64}, {15, 127}, {7, 31}}) {
    const auto img = project({at_direction(cfg.row_elevation(i), cfg.column_azimuth(j), 12.0)}, cfg);
    ASSERT_EQ(img.valid_count(), 1u);
    EXPECT_EQ(img.mask[i * cfg.W + j], 1);
    EXPECT_FLOAT_EQ(img.channels.at({0, i, j}), static_cast<float>(scale_range(12.0, cfg.d_max)));
    EXPECT_FLOAT_EQ(img.channels.at({1, i, j}), 0.5f);
  }
}

TEST(Project, AzimuthZeroIsCenterColumn) {
  const auto cfg = desk();
  const auto px = bin_of({10.0, 0.0, -0.5}, cfg);
  ASSERT_TRUE(px);
  EXPECT_EQ(px->col, cfg.W / 2);
}

TEST(Project, NearestPointWins) {
  const auto cfg = desk();
  const double el = cfg.row_elevation(3), az = cfg.column_azimuth(10);
  const auto img = project({at_direction(el, az, 10.0, 0.9), at_direction(el, az, 5.0, 0.2)}, cfg);
  EXPECT_FLOAT_EQ(img.channels.at({0, 3, 10}), static_cast<float>(scale_range(5.0, cfg.d_max)));
  EXPECT_FLOAT_EQ(img.channels.at({1, 3, 10}), 0.2f);
}

TEST(Project, DropsPointsOutsideFieldOfView) {
  const auto cfg = desk();
  const auto img = project({at_direction(cfg.elev_max + 0.01, 0.3, 10.0), at_direction(cfg.elev_min - 0.01, 0.3, 10.0)}, cfg);
  EXPECT_EQ(img.valid_count(), 0u);
  const auto empty = project({}, cfg);
  EXPECT_EQ(empty.valid_count(), 0u);
  for (std::size_t k = 0; k < cfg.H * cfg.W; ++k) {
    EXPECT_EQ(empty.channels[k], -1.0f);
    EXPECT_EQ(empty.channels[cfg.H * cfg.W + k], 0.0f);
  }
}

TEST(Project, ValidCountNeverExceedsPointCount) {
  const auto cfg = desk();
  for (std::size_t n : {1u, 10u, 500u, 5000u}) {
    const auto cloud = interior_cloud(cfg, n, n);
    EXPECT_LE(project(cloud, cfg).valid_count(), n);
  }
}

TEST(Unproject, EmptyImageGivesEmptyCloud) {
  EXPECT_TRUE(unproject(EquirectImage::empty(desk()), desk()).empty());
}

TEST(Unproject, SinglePixelAtNormalizedZeroDecodesToEightMeters) {
  const auto cfg = desk();
  auto img = EquirectImage::empty(cfg);
  img.mask[4 * cfg.W + 20] = 1;
  img.channels.at({0, 4, 20}) = 0.0f;
  img.channels.at({1, 4, 20}) = 0.25f;
  const auto cloud = unproject(img, cfg);
  ASSERT_EQ(cloud.size(), 1u);
  EXPECT_NEAR(norm(cloud[0].position()), 8.0, 1e-9);
  const double el = std::atan2(cloud[0].z, std::hypot(cloud[0].x, cloud[0].y));
  EXPECT_NEAR(el, cfg.row_elevation(4), 1e-12);
  EXPECT_NEAR(std::atan2(cloud[0].y, cloud[0].x), cfg.column_azimuth(20), 1e-12);
  EXPECT_EQ(cloud[0].reflectance, 0.25);
}

TEST(RoundTrip, ProjectUnprojectProjectIsIdempotent) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SensorConfig cfg = desk();
    if (seed % 2) {
      cfg.H = 32;
      cfg.W = 256;
    }
    const auto img = project(interior_cloud(cfg, 3000, seed), cfg);
    const auto again = project(unproject(img, cfg), cfg);
    EXPECT_EQ(again.mask, img.mask);
    EXPECT_TRUE(again.channels == img.channels) << "seed " << seed;
  }
}

TEST(RoundTrip, ExtremeRangesSurvive) {
  const auto cfg = desk();
  auto img = EquirectImage::empty(cfg);
  const float values[] = {-1.0f, std::nextafter(-1.0f, 0.0f), 1.0f, std::nextafter(1.0f, 0.0f), 0.123f};
  for (std::size_t k = 0; k < std::size(values); ++k) {
    img.mask[k * 3] = 1;
    img.channels[k * 3] = values[k];
  }
  const auto again = project(unproject(img, cfg), cfg);
  EXPECT_EQ(again.mask, img.mask);
  EXPECT_TRUE(again.channels == img.channels);
}

TEST(RoundTrip, RotationAboutVerticalAxisShiftsColumns) {
  const auto cfg = desk();
  const auto cloud = interior_cloud(cfg, 2000, 77);
  const auto base = project(cloud, cfg);
  for (std::size_t k : {1u, 5u, 32u, 100u}) {
    PointCloud rotated = cloud;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.W);
    for (auto& p : rotated) {
      const Vec3 q = rotate_z(p.position(), angle);
      p.x = q.x;
      p.y = q.y;
      p.z = q.z;
    }
    const auto img = project(rotated, cfg);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < cfg.H; ++i)
        for (std::size_t j = 0; j < cfg.W; ++j)
          ASSERT_EQ(img.channels.at({c, i, (j + k) % cfg.W}), base.channels.at({c, i, j})) << "shift " << k;
  }
}

TEST(Sketch, EmptyInputsGiveZeros) {
  const auto t = render_road_sketch({}, {}, desk());
  EXPECT_EQ(t.shape(), (Shape{2, 16, 128}));
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Sketch, BoxAheadClustersAroundCenterColumn) {
  const auto cfg = desk();
  const OrientedBox box{4.0, 2.0, 1.5, {10.0, 0.0, -1.8 + 0.75}, 0.0};
  const auto t = render_road_sketch({}, {box}, cfg);
  const auto px = nonzero(t, 1);
  ASSERT_FALSE(px.empty());
  EXPECT_TRUE(nonzero(t, 0).empty());
  // Half-width 1 m at 8 m range subtends about 0.125 rad, i.e. about 3 columns.
  for (auto [i, j] : px) {
    EXPECT_GE(j, cfg.W / 2 - 4);
    EXPECT_LE(j, cfg.W / 2 + 3);
  }
  EXPECT_TRUE(std::any_of(px.begin(), px.end(), [&](auto p) { return p.second == cfg.W / 2; }));
}

TEST(Sketch, RotatedBoxShiftsByQuarterWidth) {
  const auto cfg = desk();
  const OrientedBox ahead{4.0, 2.0, 1.5, {10.0, 0.0, -1.05}, 0.0};
  OrientedBox left = ahead;
  left.center = rotate_z(ahead.center, std::numbers::pi / 2);
  left.heading = std::numbers::pi / 2;
  const auto a = nonzero(render_road_sketch({}, {ahead}, cfg), 1);
  const auto b = nonzero(render_road_sketch({}, {left}, cfg), 1);
  const std::size_t q = cfg.W / 4;
  auto near = [&](const auto& set, std::size_t i, std::size_t j) {
    for (std::size_t dj : {cfg.W - 1, std::size_t{0}, std::size_t{1}})
      if (set.count({i, (j + dj) % cfg.W})) return true;
    return false;
  };
  for (auto [i, j] : a) EXPECT_TRUE(near(b, i, (j + q) % cfg.W));
  for (auto [i, j] : b) EXPECT_TRUE(near(a, i, (j + cfg.W - q) % cfg.W));
}

TEST(Sketch, LayoutLinesUseChannelZero) {
  const auto cfg = desk();
  const Polyline curb{{-30.0, 4.0, -1.8}, {30.0, 4.0, -1.8}};
  const auto t = render_road_sketch({curb}, {}, cfg);
  EXPECT_FALSE(nonzero(t, 0).empty());
  EXPECT_TRUE(nonzero(t, 1).empty());
  // A curb on the left (+y) side only appears in columns with azimuth in (0, pi).
  for (auto [i, j] : nonzero(t, 0)) EXPECT_GE(j, cfg.W / 2);
}

TEST(Sketch, WireframePixelsMatchRender) {
  const auto cfg = desk();
  const OrientedBox box{4.5, 1.9, 1.6, {6.0, -5.0, -1.0}, 0.4};
  const auto px = box_wireframe_pixels(box, cfg);
  const auto t = nonzero(render_road_sketch({}, {box}, cfg), 1);
  ASSERT_EQ(px.size(), t.size());
  for (auto p : px) EXPECT_TRUE(t.count({p.row, p.col}));
}

TEST(Sketch, DegenerateBoxIsRejected) {
  EXPECT_THROW(render_road_sketch({}, {OrientedBox{0.0, 1.0, 1.0, {5, 0, 0}, 0}}, desk()), ValidationError);
  EXPECT_THROW(render_road_sketch({}, {OrientedBox{1.0, -1.0, 1.0, {5, 0, 0}, 0}}, desk()), ValidationError);
}

TEST(ObjectPrior, EmptySetIsBackground) {
  const auto cfg = desk();
  const auto t = render_object_prior({}, cfg);
  for (std::size_t k = 0; k < cfg.H * cfg.W; ++k) {
    EXPECT_EQ(t[k], -1.0f);
    EXPECT_EQ(t[cfg.H * cfg.W + k], 0.0f);
  }
}

TEST(ObjectPrior, ObjectPixelsAreSubsetOfSceneProjection) {
  const auto cfg = desk();
  const auto scene = interior_cloud(cfg, 4000, 5);
  const PointCloud object(scene.begin(), scene.begin() + 300);
  const auto prior = render_object_prior(object, cfg);
  const auto full = project(scene, cfg);
  for (std::size_t k = 0; k < cfg.H * cfg.W; ++k) {
    if (prior[k] > -1.0f) EXPECT_EQ(full.mask[k], 1);
  }
}

TEST(ObjectPrior, SelfOcclusionKeepsNearestPoint) {
  const auto cfg = desk();
  const double el = cfg.row_elevation(9), az = cfg.column_azimuth(70);
  const auto t = render_object_prior({at_direction(el, az, 14.0, 0.6), at_direction(el, az, 12.5, 0.6)}, cfg);
  EXPECT_EQ(t.at({0, 9, 70}), static_cast<float>(scale_range(12.5, cfg.d_max)));
}

TEST(Io, PlyAndTensorRoundTrip) {
  const auto cfg = desk();
  const auto cloud = interior_cloud(cfg, 50, 9);
  const auto dir = std::filesystem::temp_directory_path() / "seqlidar_codec_io";
  std::filesystem::create_directories(dir);
  write_ply(dir / "c.ply", cloud);
  EXPECT_EQ(read_ply(dir / "c.ply"), cloud);
  write_ply(dir / "e.ply", {});
  EXPECT_TRUE(read_ply(dir / "e.ply").empty());
  EXPECT_EQ(tensor_to_cloud(cloud_to_tensor(cloud)), cloud);
  const auto img = project(cloud, cfg);
  write_image(dir / "f.l4dt", dir / "m.l4dt", img);
  const auto back = read_image(dir / "f.l4dt", dir / "m.l4dt");
  EXPECT_TRUE(back.channels == img.channels);
  EXPECT_EQ(back.mask, img.mask);
  std::filesystem::remove_all(dir);
}

TEST(Io, ImageFromChannelsThresholdsAndClips) {
  const auto cfg = desk();
  Tensor<float> ch(Shape{2, cfg.H, cfg.W});
  ch[0] = 1.7f;
  ch[1] = -0.999f;
  ch[2] = 0.0f;
  ch[cfg.H * cfg.W + 2] = 3.0f;
  for (std::size_t k = 3; k < cfg.H * cfg.W; ++k) ch[k] = -1.0f;
  const auto img = image_from_channels(ch, cfg, 1.0);
  EXPECT_EQ(img.mask[0], 1);
  EXPECT_EQ(img.channels[0], 1.0f);
  EXPECT_EQ(img.mask[1], 0);
  EXPECT_EQ(img.channels[1], -1.0f);
  EXPECT_EQ(img.mask[2], 1);
  EXPECT_EQ(img.channels[cfg.H * cfg.W + 2], 1.0f);
  EXPECT_EQ(img.valid_count(), 2u);
}

TEST(SensorConfigCheck, RejectsBadGeometry) {
  SensorConfig c = desk();
  c.W = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk();
  c.H = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk();
  c.elev_min = c.elev_max;
  EXPECT_THROW(c.validate(), ConfigError);
}
