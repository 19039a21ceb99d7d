// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/equirect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "seqlidar/errors.hpp"

namespace seqlidar {

void validate_box(const OrientedBox& box) {
  for (double e : {box.l, box.w, box.h}) {
    if (!(e > 0.0) || !std::isfinite(e)) throw ValidationError("box extents must be positive and finite");
  }
  if (!std::isfinite(box.center.x) || !std::isfinite(box.center.y) || !std::isfinite(box.center.z) ||
      !std::isfinite(box.heading)) {
    throw ValidationError("box pose must be finite");
  }
}

void SensorConfig::validate() const {
  if (H < 2) throw ConfigError("sensor: H must be >= 2");
  if (W < 4 || W % 16 != 0) throw ConfigError("sensor: W must be >= 4 and divisible by 16, got " + std::to_string(W));
  if (!(elev_min < elev_max)) throw ConfigError("sensor: elev_min must be below elev_max");
  if (elev_min < -std::numbers::pi / 2 || elev_max > std::numbers::pi / 2) {
    throw ConfigError("sensor: elevation range must lie within [-pi/2, pi/2]");
  }
  if (!(d_max > 0.0) || !std::isfinite(d_max)) throw ConfigError("sensor: d_max must be positive");
}

EquirectImage EquirectImage::empty(const SensorConfig& cfg) {
  EquirectImage img;
  img.channels = Tensor<float>(Shape{2, cfg.H, cfg.W});
  std::fill_n(img.channels.ptr(), cfg.H * cfg.W, -1.0f);
  img.mask.assign(cfg.H * cfg.W, 0);
  return img;
}

std::size_t EquirectImage::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

Tensor<float> EquirectImage::mask_tensor() const {
  Tensor<float> m(Shape{channels.dim(1), channels.dim(2)});
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? 1.0f : 0.0f;
  return m;
}

double scale_range(double d, double d_max) {
  if (!(d_max > 0.0)) throw ConfigError("scale_range: d_max must be positive");
  if (!(d >= 0.0) || d > d_max) {
    throw RangeError("scale_range: range " + std::to_string(d) + " outside [0, " + std::to_string(d_max) + "]");
  }
  return 2.0 * (std::log1p(d) / std::log1p(d_max)) - 1.0;
}

double unscale_range(double normalized, double d_max) {
  if (!(d_max > 0.0)) throw ConfigError("unscale_range: d_max must be positive");
  if (!(normalized >= -1.0 && normalized <= 1.0)) throw RangeError("unscale_range: value outside [-1, 1]");
  const double dhat = 0.5 * (normalized + 1.0);
  return std::min(d_max, std::max(0.0, std::expm1(dhat * std::log1p(d_max))));
}

std::optional<PixelIndex> bin_of(Vec3 p, const SensorConfig& cfg) {
  const double planar = std::hypot(p.x, p.y);
  const double elev = std::atan2(p.z, planar);
  if (elev > cfg.elev_max || elev <= cfg.elev_min) return std::nullopt;
  auto row = static_cast<std::size_t>(std::floor((cfg.elev_max - elev) / cfg.elevation_step()));
  if (row >= cfg.H) return std::nullopt;
  const double az = std::atan2(p.y, p.x);
  auto col = static_cast<std::size_t>(std::floor((az + std::numbers::pi) / cfg.azimuth_step()));
  col %= cfg.W;
  return PixelIndex{row, col};
}

namespace {

bool in_range(double r, const SensorConfig& cfg) { return r > 0.0 && r <= cfg.d_max && std::isfinite(r); }

}  // namespace

Vec3 bin_direction(std::size_t row, std::size_t col, const SensorConfig& cfg) {
  const double el = cfg.row_elevation(row);
  const double az = cfg.column_azimuth(col);
  return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

EquirectImage project(const PointCloud& cloud, const SensorConfig& cfg) {
  cfg.validate();
  EquirectImage img = EquirectImage::empty(cfg);
  const std::size_t hw = cfg.H * cfg.W;
  std::vector<double> best(hw, std::numeric_limits<double>::infinity());
  std::vector<double> refl(hw, 0.0);
  for (const LidarPoint& pt : cloud) {
    const Vec3 p = pt.position();
    const double r = norm(p);
    if (!in_range(r, cfg)) continue;
    auto px = bin_of(p, cfg);
    if (!px) continue;
    const std::size_t k = px->row * cfg.W + px->col;
    if (r < best[k]) {
      best[k] = r;
      refl[k] = pt.reflectance;
    }
  }
  for (std::size_t k = 0; k < hw; ++k) {
    if (!std::isfinite(best[k])) continue;
    img.mask[k] = 1;
    img.channels[k] = static_cast<float>(scale_range(best[k], cfg.d_max));
    img.channels[hw + k] = cfg.has_reflectance ? static_cast<float>(std::clamp(refl[k], 0.0, 1.0)) : 0.0f;
  }
  return img;
}

PointCloud unproject(const EquirectImage& image, const SensorConfig& cfg) {
  cfg.validate();
  const std::size_t hw = cfg.H * cfg.W;
  if (image.channels.shape() != Shape{2, cfg.H, cfg.W} || image.mask.size() != hw) {
    throw DimensionError("unproject: image shape " + shape_str(image.channels.shape()) + " does not match sensor");
  }
  PointCloud cloud;
  for (std::size_t i = 0; i < cfg.H; ++i) {
    for (std::size_t j = 0; j < cfg.W; ++j) {
      const std::size_t k = i * cfg.W + j;
      if (!image.mask[k]) continue;
      const float stored = image.channels[k];
      const Vec3 dir = bin_direction(i, j, cfg);
      double d = unscale_range(stored, cfg.d_max);
      if (d <= 0.0) d = 1e-9;
      // The decoded range is nudged by single ulps until re-projecting the
      // point rounds to the stored value again.
      Vec3 p = d * dir;
      for (int it = 0; it < 256; ++it) {
        p = d * dir;
        const double r = norm(p);
        if (!(r > 0.0)) {
          d = std::nextafter(d, cfg.d_max);
          continue;
        }
        if (r > cfg.d_max) {
          d = std::nextafter(d, 0.0);
          continue;
        }
        const float again = static_cast<float>(scale_range(r, cfg.d_max));
        if (again == stored) break;
        d = again < stored ? std::nextafter(d, cfg.d_max) : std::nextafter(d, 0.0);
      }
      cloud.push_back({p.x, p.y, p.z, static_cast<double>(image.channels[hw + k])});
    }
  }
  return cloud;
}

namespace {

template <typename Fn>
void sample_segment(Vec3 a, Vec3 b, Fn&& visit) {
  constexpr double kStep = 0.1;
  const double len = norm(b - a);
  const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil(len / kStep)));
  for (std::size_t k = 0; k <= n; ++k) {
    const double u = static_cast<double>(k) / static_cast<double>(n);
    visit(a + u * (b - a));
  }
}

void rasterize_segment(Vec3 a, Vec3 b, const SensorConfig& cfg, float* plane) {
  sample_segment(a, b, [&](Vec3 p) {
    if (!in_range(norm(p), cfg)) return;
    if (auto px = bin_of(p, cfg)) plane[px->row * cfg.W + px->col] = 1.0f;
  });
}

void rasterize_box(const OrientedBox& box, const SensorConfig& cfg, float* plane) {
  validate_box(box);
  const auto c = box.corners();
  for (const auto& e : OrientedBox::kEdges) rasterize_segment(c[e[0]], c[e[1]], cfg, plane);
}

}  // namespace

Tensor<float> render_road_sketch(const std::vector<Polyline>& layout, const std::vector<OrientedBox>& boxes,
                                 const SensorConfig& cfg) {
  cfg.validate();
  Tensor<float> out(Shape{2, cfg.H, cfg.W});
  for (const Polyline& line : layout) {
    for (std::size_t s = 0; s + 1 < line.size(); ++s) rasterize_segment(line[s], line[s + 1], cfg, out.ptr());
    if (line.size() == 1) rasterize_segment(line[0], line[0], cfg, out.ptr());
  }
  float* box_plane = out.ptr() + cfg.H * cfg.W;
  for (const OrientedBox& box : boxes) rasterize_box(box, cfg, box_plane);
  return out;
}

std::vector<PixelIndex> box_wireframe_pixels(const OrientedBox& box, const SensorConfig& cfg) {
  cfg.validate();
  std::vector<float> plane(cfg.H * cfg.W, 0.0f);
  rasterize_box(box, cfg, plane.data());
  std::vector<PixelIndex> out;
  for (std::size_t k = 0; k < plane.size(); ++k) {
    if (plane[k] != 0.0f) out.push_back({k / cfg.W, k % cfg.W});
  }
  return out;
}

Tensor<float> render_object_prior(const PointCloud& object_points, const SensorConfig& cfg) {
  return project(object_points, cfg).channels;
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nproperty double reflectance\nend_header\n";
  char buf[160];
  for (const LidarPoint& p : cloud) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", p.x, p.y, p.z, p.reflectance);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw IoError(path.string() + ": not a PLY file");
  std::size_t count = 0;
  std::vector<std::string> props;
  bool in_vertex = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw IoError(path.string() + ": only ASCII PLY is supported");
    } else if (word == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (word == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  auto index_of = [&](std::initializer_list<const char*> names) -> int {
    for (std::size_t i = 0; i < props.size(); ++i) {
      for (const char* n : names) {
        if (props[i] == n) return static_cast<int>(i);
      }
    }
    return -1;
  };
  const int ix = index_of({"x"}), iy = index_of({"y"}), iz = index_of({"z"});
  const int ir = index_of({"reflectance", "intensity"});
  if (ix < 0 || iy < 0 || iz < 0) throw IoError(path.string() + ": missing x/y/z properties");
  PointCloud cloud;
  cloud.reserve(count);
  std::vector<double> row(props.size());
  for (std::size_t n = 0; n < count; ++n) {
    for (double& v : row) {
      if (!(in >> v)) throw IoError(path.string() + ": truncated vertex data");
    }
    cloud.push_back({row[ix], row[iy], row[iz], ir >= 0 ? row[ir] : 0.0});
  }
  return cloud;
}

Tensor<double> cloud_to_tensor(const PointCloud& cloud) {
  if (cloud.empty()) throw DimensionError("cloud_to_tensor: empty cloud has no [N,4] representation");
  Tensor<double> t(Shape{cloud.size(), 4});
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    t[4 * i] = cloud[i].x;
    t[4 * i + 1] = cloud[i].y;
    t[4 * i + 2] = cloud[i].z;
    t[4 * i + 3] = cloud[i].reflectance;
  }
  return t;
}

PointCloud tensor_to_cloud(const Tensor<double>& t) {
  if (t.rank() != 2 || t.dim(1) != 4) throw DimensionError("tensor_to_cloud: expected [N,4], got " + shape_str(t.shape()));
  PointCloud cloud(t.dim(0));
  for (std::size_t i = 0; i < cloud.size(); ++i) cloud[i] = {t[4 * i], t[4 * i + 1], t[4 * i + 2], t[4 * i + 3]};
  return cloud;
}

void write_image(const std::filesystem::path& channels_path, const std::filesystem::path& mask_path,
                 const EquirectImage& image) {
  write_l4dt(channels_path, image.channels);
  write_l4dt(mask_path, image.mask_tensor());
}

EquirectImage read_image(const std::filesystem::path& channels_path, const std::filesystem::path& mask_path) {
  EquirectImage img;
  img.channels = read_l4dt<float>(channels_path);
  const Tensor<float> m = read_l4dt<float>(mask_path);
  if (img.channels.rank() != 3 || img.channels.dim(0) != 2 || m.shape() != Shape{img.channels.dim(1), img.channels.dim(2)}) {
    throw IoError("image/mask shape mismatch: " + channels_path.string());
  }
  img.mask.resize(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i) img.mask[i] = m[i] != 0.0f ? 1 : 0;
  return img;
}

EquirectImage image_from_channels(Tensor<float> channels, const SensorConfig& cfg, double min_range) {
  if (channels.shape() != Shape{2, cfg.H, cfg.W}) {
    throw DimensionError("image_from_channels: expected " + shape_str({2, cfg.H, cfg.W}) + ", got " +
                         shape_str(channels.shape()));
  }
  const std::size_t hw = cfg.H * cfg.W;
  const float threshold = static_cast<float>(scale_range(std::min(min_range, cfg.d_max), cfg.d_max));
  EquirectImage img;
  img.mask.assign(hw, 0);
  for (auto& v : channels.data()) v = std::clamp(std::isfinite(v) ? v : -1.0f, -1.0f, 1.0f);
  for (std::size_t k = 0; k < hw; ++k) {
    if (channels[k] > threshold) {
      img.mask[k] = 1;
      channels[hw + k] = std::clamp(channels[hw + k], 0.0f, 1.0f);
    } else {
      channels[k] = -1.0f;
      channels[hw + k] = 0.0f;
    }
  }
  img.channels = std::move(channels);
  return img;
}

}  // namespace seqlidar
