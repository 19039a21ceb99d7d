// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "seqlidar/errors.hpp"

namespace seqlidar {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double surface_reflectance(SurfaceClass s) {
  switch (s) {
    case SurfaceClass::kGround: return 0.1;
    case SurfaceClass::kBuilding: return 0.4;
    case SurfaceClass::kTree: return 0.3;
    case SurfaceClass::kVehicle: return 0.6;
    case SurfaceClass::kPedestrian: return 0.5;
  }
  return 0.0;
}

std::string_view category_name(Category c) {
  switch (c) {
    case Category::kCar: return "car";
    case Category::kTruck: return "truck";
    case Category::kPedestrian: return "pedestrian";
  }
  return "?";
}

Category parse_category(std::string_view name) {
  if (name == "car") return Category::kCar;
  if (name == "truck") return Category::kTruck;
  if (name == "pedestrian") return Category::kPedestrian;
  throw VocabularyError("unknown category '" + std::string(name) + "'");
}

namespace {

SurfaceClass surface_of(Category c) { return c == Category::kPedestrian ? SurfaceClass::kPedestrian : SurfaceClass::kVehicle; }

// 2D separating-axis test on box footprints, grown by `margin` on every side.
bool footprints_overlap(const OrientedBox& a, const OrientedBox& b, double margin) {
  auto corners2 = [margin](const OrientedBox& box) {
    std::array<Vec3, 4> c;
    const double hl = 0.5 * box.l + margin, hw = 0.5 * box.w + margin;
    const Vec3 loc[4] = {{-hl, -hw, 0}, {hl, -hw, 0}, {hl, hw, 0}, {-hl, hw, 0}};
    for (int i = 0; i < 4; ++i) c[i] = Vec3{box.center.x, box.center.y, 0} + rotate_z(loc[i], box.heading);
    return c;
  };
  const auto ca = corners2(a), cb = corners2(b);
  const Vec3 axes[4] = {rotate_z({1, 0, 0}, a.heading), rotate_z({0, 1, 0}, a.heading), rotate_z({1, 0, 0}, b.heading),
                        rotate_z({0, 1, 0}, b.heading)};
  for (const Vec3& ax : axes) {
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const Vec3& p : ca) {
      const double s = p.x * ax.x + p.y * ax.y;
      amin = std::min(amin, s);
      amax = std::max(amax, s);
    }
    for (const Vec3& p : cb) {
      const double s = p.x * ax.x + p.y * ax.y;
      bmin = std::min(bmin, s);
      bmax = std::max(bmax, s);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

OrientedBox cylinder_footprint(const Cylinder& c) { return {2 * c.radius, 2 * c.radius, c.height, {c.base.x, c.base.y, 0.5 * c.height}, 0.0}; }

OrientedBox ego_exclusion(const Pose& start) {
  // Covers the ego vehicle and the road it drives over in the next frames.
  return {17.0, 2.5, 1.6, {start.position.x + 6.0, start.position.y, 0.8}, 0.0};
}

template <std::size_t N>
std::size_t pick(std::mt19937_64& rng, const std::array<double, N>& weights) {
  std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
  return d(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

}  // namespace

OrientedBox Agent::box_at(std::size_t frame) const {
  OrientedBox b = box;
  b.center = box.center + (static_cast<double>(frame) * kFrameInterval) * velocity;
  return b;
}

Pose SceneWorld::ego_pose(std::size_t frame) const {
  return {ego_start.position + (static_cast<double>(frame) * kFrameInterval) * ego_velocity, ego_start.yaw};
}

std::vector<Polyline> SceneWorld::layout() const {
  std::vector<Polyline> out = curbs;
  out.insert(out.end(), lanes.begin(), lanes.end());
  return out;
}

void WorldParams::validate() const {
  if (max_agents > 8 || min_agents > max_agents) throw ConfigError("world: agent count bounds must satisfy 0 <= min <= max <= 8");
  if (max_props > 20 || min_props > max_props) throw ConfigError("world: prop count bounds must satisfy 0 <= min <= max <= 20");
  auto check = [](auto const& w, const char* what) {
    double s = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("world: negative weight in ") + what);
      s += v;
    }
    if (!(s > 0.0)) throw ConfigError(std::string("world: weights of ") + what + " sum to zero");
  };
  check(time_weights, "time_weights");
  check(weather_weights, "weather_weights");
  check(background_weights, "background_weights");
  check(category_weights, "category_weights");
  if (!(max_ego_speed >= 0.0) || max_ego_speed * kFrameInterval >= 3.0) {
    throw ConfigError("world: ego displacement per frame must stay below 3 m");
  }
  if (!(max_agent_speed >= 0.0)) throw ConfigError("world: max_agent_speed must be non-negative");
  if (!(sensor_height > 0.0)) throw ConfigError("world: sensor_height must be positive");
  if (!(spawn_radius > 0.0)) throw ConfigError("world: spawn_radius must be positive");
}

SceneWorld synth_world(std::uint64_t seed, const WorldParams& params) {
  params.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x5ce9e));
  SceneWorld w;
  w.attributes.time_of_day = static_cast<TimeOfDay>(pick(rng, params.time_weights));
  w.attributes.weather = static_cast<Weather>(pick(rng, params.weather_weights));
  w.attributes.background = static_cast<Background>(pick(rng, params.background_weights));

  constexpr double kRoadExtent = 150.0;
  w.centerline = {{-kRoadExtent, 0, 0}, {kRoadExtent, 0, 0}};
  for (double y : {-w.road_half_width, w.road_half_width}) w.curbs.push_back({{-kRoadExtent, y, 0}, {kRoadExtent, y, 0}});
  for (double y : {-3.5, 0.0, 3.5}) w.lanes.push_back({{-kRoadExtent, y, 0}, {kRoadExtent, y, 0}});

  w.ego_start = {{0.0, -w.lane_half_width, params.sensor_height}, 0.0};
  w.ego_velocity = {uniform(rng, 0.0, params.max_ego_speed), 0.0, 0.0};

  constexpr int kMaxAttempts = 1000;
  const std::size_t n_agents = std::uniform_int_distribution<std::size_t>(params.min_agents, params.max_agents)(rng);
  const OrientedBox ego_box = ego_exclusion(w.ego_start);
  constexpr double lanes_y[4] = {-5.25, -1.75, 1.75, 5.25};
  for (std::size_t a = 0; a < n_agents; ++a) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Agent ag;
      ag.id = static_cast<int>(a);
      ag.category = static_cast<Category>(pick(rng, params.category_weights));
      OrientedBox& b = ag.box;
      double speed = 0.0;
      if (ag.category == Category::kPedestrian) {
        b.l = uniform(rng, 0.5, 0.7);
        b.w = uniform(rng, 0.5, 0.7);
        b.h = uniform(rng, 1.6, 1.9);
        const double side = rng() % 2 ? 1.0 : -1.0;
        b.center = {uniform(rng, -params.spawn_radius, params.spawn_radius), side * uniform(rng, 7.6, 8.4), 0.5 * b.h};
        b.heading = rng() % 2 ? 0.0 : -std::numbers::pi;
        speed = uniform(rng, 0.0, std::min(1.5, params.max_agent_speed));
      } else {
        const bool truck = ag.category == Category::kTruck;
        b.l = truck ? uniform(rng, 6.5, 9.0) : uniform(rng, 4.2, 4.9);
        b.w = truck ? uniform(rng, 2.3, 2.6) : uniform(rng, 1.8, 2.0);
        b.h = truck ? uniform(rng, 2.8, 3.6) : uniform(rng, 1.45, 1.7);
        const double y = lanes_y[rng() % 4];
        b.center = {uniform(rng, -params.spawn_radius, params.spawn_radius), y, 0.5 * b.h};
        b.heading = y < 0 ? 0.0 : -std::numbers::pi;
        speed = uniform(rng, 0.0, params.max_agent_speed);
      }
      ag.velocity = {speed * std::cos(b.heading), speed * std::sin(b.heading), 0.0};
      ag.prior_seed = rng();
      if (footprints_overlap(b, ego_box, 0.0)) continue;
      bool clash = false;
      for (const Agent& other : w.agents) clash = clash || footprints_overlap(b, other.box, 0.25);
      if (clash) continue;
      w.agents.push_back(ag);
      placed = true;
    }
    if (!placed) throw GenerationError("synth_world: could not place agent " + std::to_string(a) + " without overlap");
  }

  const std::size_t n_props = std::uniform_int_distribution<std::size_t>(params.min_props, params.max_props)(rng);
  std::vector<OrientedBox> occupied;
  for (std::size_t p = 0; p < n_props; ++p) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const double side = rng() % 2 ? 1.0 : -1.0;
      const double x = uniform(rng, -100.0, 100.0);
      Background kind = w.attributes.background;
      if (kind == Background::kMixed) kind = rng() % 2 ? Background::kBuildings : Background::kTrees;
      if (kind == Background::kBuildings) {
        OrientedBox b;
        b.l = uniform(rng, 6.0, 16.0);
        b.w = uniform(rng, 6.0, 12.0);
        b.h = uniform(rng, 4.0, 15.0);
        b.center = {x, side * (9.5 + 0.5 * b.w + uniform(rng, 0.0, 6.0)), 0.5 * b.h};
        bool clash = false;
        for (const auto& o : occupied) clash = clash || footprints_overlap(b, o, 0.5);
        if (clash) continue;
        occupied.push_back(b);
        w.buildings.push_back(b);
      } else {
        Cylinder c;
        if (kind == Background::kTrees) {
          c.radius = uniform(rng, 0.8, 1.6);
          c.height = uniform(rng, 4.0, 9.0);
          c.base = {x, side * uniform(rng, 9.5 + c.radius, 13.0 + c.radius), 0.0};
        } else {
          c.radius = uniform(rng, 0.3, 0.7);
          c.height = uniform(rng, 0.4, 1.0);
          c.base = {x, side * uniform(rng, 9.5 + c.radius, 15.0), 0.0};
        }
        const OrientedBox fp = cylinder_footprint(c);
        bool clash = false;
        for (const auto& o : occupied) clash = clash || footprints_overlap(fp, o, 0.3);
        if (clash) continue;
        occupied.push_back(fp);
        w.trees.push_back(c);
      }
      placed = true;
    }
    if (!placed) throw GenerationError("synth_world: could not place prop " + std::to_string(p) + " without overlap");
  }
  return w;
}

std::vector<std::string> validate_world(const SceneWorld& world) {
  std::vector<std::string> issues;
  for (const Agent& a : world.agents) {
    const std::string tag = "agent " + std::to_string(a.id);
    if (!(a.box.l > 0 && a.box.w > 0 && a.box.h > 0)) issues.push_back(tag + ": non-positive extent");
    if (std::abs(a.box.center.z - 0.5 * a.box.h) > 1e-9) issues.push_back(tag + ": not resting on the ground");
    if (a.velocity.z != 0.0) issues.push_back(tag + ": vertical velocity");
    if (footprints_overlap(a.box, {0.1, 0.1, 0.1, world.ego_start.position, 0.0}, 0.0)) {
      issues.push_back(tag + ": contains the sensor");
    }
  }
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    for (std::size_t j = i + 1; j < world.agents.size(); ++j) {
      if (footprints_overlap(world.agents[i].box, world.agents[j].box, 0.0)) {
        issues.push_back("agents " + std::to_string(world.agents[i].id) + " and " + std::to_string(world.agents[j].id) +
                         " interpenetrate");
      }
    }
  }
  if (norm(world.ego_velocity) * kFrameInterval >= 3.0) issues.push_back("ego displacement per frame >= 3 m");
  for (const auto& b : world.buildings) {
    if (!(b.l > 0 && b.w > 0 && b.h > 0)) issues.push_back("building with non-positive extent");
  }
  for (const auto& t : world.trees) {
    if (!(t.radius > 0 && t.height > 0)) issues.push_back("tree with non-positive extent");
  }
  return issues;
}

// ---- ray casting -----------------------------------------------------------

namespace {

constexpr double kRayEps = 1e-9;

std::optional<double> ray_box(Vec3 o, Vec3 d, const OrientedBox& box) {
  const Vec3 lo = box.to_local(o);
  const Vec3 ld = rotate_z(d, -box.heading);
  const double half[3] = {0.5 * box.l, 0.5 * box.w, 0.5 * box.h};
  const double oo[3] = {lo.x, lo.y, lo.z};
  const double dd[3] = {ld.x, ld.y, ld.z};
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dd[a]) < 1e-15) {
      if (std::abs(oo[a]) > half[a]) return std::nullopt;
      continue;
    }
    double t1 = (-half[a] - oo[a]) / dd[a];
    double t2 = (half[a] - oo[a]) / dd[a];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (tmax < tmin || tmin <= kRayEps) return std::nullopt;
  return tmin;
}

std::optional<double> ray_cylinder(Vec3 o, Vec3 d, const Cylinder& c) {
  std::optional<double> best;
  const double ox = o.x - c.base.x, oy = o.y - c.base.y;
  const double a = d.x * d.x + d.y * d.y;
  if (a > 1e-18) {
    const double b = 2.0 * (ox * d.x + oy * d.y);
    const double cc = ox * ox + oy * oy - c.radius * c.radius;
    const double disc = b * b - 4.0 * a * cc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
        const double z = o.z + t * d.z;
        if (t > kRayEps && z >= c.base.z && z <= c.base.z + c.height) {
          best = t;
          break;
        }
      }
    }
  }
  if (std::abs(d.z) > 1e-15) {
    const double t = (c.base.z + c.height - o.z) / d.z;
    const double px = ox + t * d.x, py = oy + t * d.y;
    if (t > kRayEps && px * px + py * py <= c.radius * c.radius && (!best || t < *best)) best = t;
  }
  return best;
}

}  // namespace

PointCloud raycast_frame(const SceneWorld& world, const Pose& ego, const std::vector<OrientedBox>& agent_boxes,
                         const std::vector<Category>& agent_categories, const SensorConfig& cfg) {
  cfg.validate();
  if (agent_boxes.size() != agent_categories.size()) throw DimensionError("raycast_frame: boxes/categories size mismatch");
  PointCloud cloud;
  const Vec3 o = ego.position;
  for (std::size_t i = 0; i < cfg.H; ++i) {
    for (std::size_t j = 0; j < cfg.W; ++j) {
      const Vec3 ds = bin_direction(i, j, cfg);
      const Vec3 d = rotate_z(ds, ego.yaw);
      double best = std::numeric_limits<double>::infinity();
      SurfaceClass cls = SurfaceClass::kGround;
      auto consider = [&](std::optional<double> t, SurfaceClass s) {
        if (t && *t < best) {
          best = *t;
          cls = s;
        }
      };
      if (d.z < 0.0) consider(-o.z / d.z, SurfaceClass::kGround);
      for (const auto& b : world.buildings) consider(ray_box(o, d, b), SurfaceClass::kBuilding);
      for (const auto& t : world.trees) consider(ray_cylinder(o, d, t), SurfaceClass::kTree);
      for (std::size_t a = 0; a < agent_boxes.size(); ++a) consider(ray_box(o, d, agent_boxes[a]), surface_of(agent_categories[a]));
      if (best <= cfg.d_max) {
        const Vec3 p = best * ds;
        cloud.push_back({p.x, p.y, p.z, surface_reflectance(cls)});
      }
    }
  }
  return cloud;
}

PointCloud raycast_frame(const SceneWorld& world, std::size_t frame, const SensorConfig& cfg) {
  std::vector<OrientedBox> boxes;
  std::vector<Category> cats;
  for (const Agent& a : world.agents) {
    boxes.push_back(a.box_at(frame));
    cats.push_back(a.category);
  }
  return raycast_frame(world, world.ego_pose(frame), boxes, cats, cfg);
}

// ---- captions --------------------------------------------------------------

const std::vector<std::string>& caption_vocabulary() {
  static const std::vector<std::string> vocab{"DAY",       "DUSK",  "NIGHT",  "CLEAR", "CLOUDY", "RAINY", "FOGGY",
                                              "BUILDINGS", "TREES", "GRASSY", "MIXED", "CAR",    "TRUCK", "PEDESTRIAN"};
  return vocab;
}

std::int32_t token_id(std::string_view name) {
  const auto& v = caption_vocabulary();
  auto it = std::find(v.begin(), v.end(), name);
  if (it == v.end()) throw VocabularyError("unknown caption token '" + std::string(name) + "'");
  return static_cast<std::int32_t>(it - v.begin());
}

std::string_view token_name(std::int32_t id) {
  const auto& v = caption_vocabulary();
  if (id < 0 || static_cast<std::size_t>(id) >= v.size()) throw VocabularyError("caption token id out of range: " + std::to_string(id));
  return v[static_cast<std::size_t>(id)];
}

namespace {
constexpr std::int32_t kTimeBase = 0, kWeatherBase = 3, kBackgroundBase = 7, kCategoryBase = 11;
}

bool token_fits_slot(std::int32_t id, CaptionSlot slot) {
  switch (slot) {
    case CaptionSlot::kTime: return id >= kTimeBase && id < kWeatherBase;
    case CaptionSlot::kWeather: return id >= kWeatherBase && id < kBackgroundBase;
    case CaptionSlot::kBackground: return id >= kBackgroundBase && id < kCategoryBase;
  }
  return false;
}

std::vector<std::int32_t> derive_caption(const WorldAttributes& attributes, const std::vector<Category>& agents) {
  if (3 + agents.size() > kMaxCaptionLength) throw ValidationError("caption would exceed 16 tokens");
  std::vector<std::int32_t> out{kTimeBase + static_cast<std::int32_t>(attributes.time_of_day),
                                kWeatherBase + static_cast<std::int32_t>(attributes.weather),
                                kBackgroundBase + static_cast<std::int32_t>(attributes.background)};
  std::vector<Category> sorted = agents;
  std::sort(sorted.begin(), sorted.end());
  for (Category c : sorted) out.push_back(kCategoryBase + static_cast<std::int32_t>(c));
  return out;
}

std::vector<std::int32_t> derive_caption(const SceneWorld& world) {
  std::vector<Category> cats;
  for (const Agent& a : world.agents) cats.push_back(a.category);
  return derive_caption(world.attributes, cats);
}

// ---- object priors -------------------------------------------------------

OrientedBox ObjectCondition::box() const {
  const Vec3 c{rho * std::cos(phi) * std::cos(theta), rho * std::cos(phi) * std::sin(theta), rho * std::sin(phi)};
  return {l, w, h, c, heading};
}

ObjectCondition ObjectCondition::from_box(Category category, const OrientedBox& box) {
  ObjectCondition c;
  c.category = category;
  c.l = box.l;
  c.w = box.w;
  c.h = box.h;
  c.rho = norm(box.center);
  c.theta = std::atan2(box.center.y, box.center.x);
  if (c.theta >= std::numbers::pi) c.theta = -std::numbers::pi;
  c.phi = std::atan2(box.center.z, std::hypot(box.center.x, box.center.y));
  c.heading = box.heading;
  return c;
}

namespace {

struct Face {
  Vec3 normal;  // local frame
  Vec3 center;
  Vec3 u, v;  // half-extent vectors spanning the face
};

std::array<Face, 6> box_faces(const OrientedBox& b) {
  const double hl = 0.5 * b.l, hw = 0.5 * b.w, hh = 0.5 * b.h;
  return {{{{1, 0, 0}, {hl, 0, 0}, {0, hw, 0}, {0, 0, hh}},
           {{-1, 0, 0}, {-hl, 0, 0}, {0, hw, 0}, {0, 0, hh}},
           {{0, 1, 0}, {0, hw, 0}, {hl, 0, 0}, {0, 0, hh}},
           {{0, -1, 0}, {0, -hw, 0}, {hl, 0, 0}, {0, 0, hh}},
           {{0, 0, 1}, {0, 0, hh}, {hl, 0, 0}, {0, hw, 0}},
           {{0, 0, -1}, {0, 0, -hh}, {hl, 0, 0}, {0, hw, 0}}}};
}

Vec3 to_world(const OrientedBox& b, Vec3 local) { return b.center + rotate_z(local, b.heading); }

}  // namespace

PointCloud sample_object_prior(const ObjectCondition& obj, std::uint64_t seed, double d_max) {
  if (!(obj.l > 0 && obj.w > 0 && obj.h > 0)) throw ValidationError("object prior: extents must be positive");
  if (!(obj.rho > 0.0) || !std::isfinite(obj.rho)) throw ValidationError("object prior: range must be positive");
  if (obj.rho > d_max) {
    throw ValidationError("object prior: range " + std::to_string(obj.rho) + " beyond d_max " + std::to_string(d_max));
  }
  if (!(obj.theta >= -std::numbers::pi && obj.theta < std::numbers::pi)) throw ValidationError("object prior: theta outside [-pi, pi)");
  const OrientedBox box = obj.box();
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(obj.category)));
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  const double scale = kPriorDensity / (obj.rho * obj.rho);
  const double refl = surface_reflectance(surface_of(obj.category));
  PointCloud out;

  if (obj.category != Category::kPedestrian) {
    std::vector<Face> visible;
    std::vector<double> area;
    for (const Face& f : box_faces(box)) {
      const Vec3 n = rotate_z(f.normal, box.heading);
      if (dot(n, to_world(box, f.center)) < 0.0) {
        visible.push_back(f);
        area.push_back(4.0 * norm(f.u) * norm(f.v));
      }
    }
    double total_area = 0.0;
    for (double a : area) total_area += a;
    const auto total = static_cast<std::size_t>(std::llround(total_area * scale));
    // Largest-remainder split of the total count across faces.
    std::vector<std::size_t> counts(visible.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < visible.size(); ++i) {
      const double exact = static_cast<double>(total) * area[i] / total_area;
      counts[i] = static_cast<std::size_t>(exact);
      assigned += counts[i];
      rem.push_back({exact - static_cast<double>(counts[i]), i});
    }
    std::sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t k = 0; assigned < total && k < rem.size(); ++k, ++assigned) ++counts[rem[k].second];
    for (std::size_t i = 0; i < visible.size(); ++i) {
      for (std::size_t n = 0; n < counts[i]; ++n) {
        const double a = sym(rng), b = sym(rng);
        const Vec3 p = to_world(box, visible[i].center + a * visible[i].u + b * visible[i].v);
        out.push_back({p.x, p.y, p.z, refl});
      }
    }
    return out;
  }

  // Vertical capsule inscribed in the box.
  const double r = 0.5 * std::min(obj.l, obj.w);
  const double body = std::max(0.0, obj.h - 2.0 * r);
  const double r_eff = std::min(r, 0.5 * obj.h);
  const double side_area = 2.0 * std::numbers::pi * r_eff * body;
  const double cap_area = 4.0 * std::numbers::pi * r_eff * r_eff;
  const auto candidates = static_cast<std::size_t>(std::llround((side_area + cap_area) * scale));
  const double z_lo = -0.5 * obj.h + r_eff, z_hi = 0.5 * obj.h - r_eff;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t n = 0; n < candidates; ++n) {
    Vec3 local, normal;
    if (unit(rng) * (side_area + cap_area) < side_area) {
      const double ang = 2.0 * std::numbers::pi * unit(rng);
      normal = {std::cos(ang), std::sin(ang), 0.0};
      local = Vec3{r_eff * normal.x, r_eff * normal.y, z_lo + (z_hi - z_lo) * unit(rng)};
    } else {
      // Uniform point on the sphere; the upper hemisphere caps the top.
      const double zc = sym(rng);
      const double ang = 2.0 * std::numbers::pi * unit(rng);
      const double s = std::sqrt(std::max(0.0, 1.0 - zc * zc));
      normal = {s * std::cos(ang), s * std::sin(ang), zc};
      local = r_eff * normal + Vec3{0, 0, zc >= 0 ? z_hi : z_lo};
    }
    const Vec3 p = to_world(box, local);
    if (dot(rotate_z(normal, box.heading), p) < 0.0) out.push_back({p.x, p.y, p.z, refl});
  }
  return out;
}

// ---- sequences -------------------------------------------------------------

std::vector<BoxAnnotation> SequenceSample::boxes_in_frame(int frame) const {
  std::vector<BoxAnnotation> out;
  for (const auto& b : boxes) {
    if (b.frame == frame) out.push_back(b);
  }
  return out;
}

Tensor<float> render_frame_prior(const std::vector<BoxAnnotation>& boxes, const SensorConfig& cfg) {
  PointCloud all;
  for (const BoxAnnotation& b : boxes) {
    const ObjectCondition cond = ObjectCondition::from_box(b.category, b.box);
    if (cond.rho > cfg.d_max) continue;
    const PointCloud pts = sample_object_prior(cond, b.prior_seed, cfg.d_max);
    all.insert(all.end(), pts.begin(), pts.end());
  }
  return render_object_prior(all, cfg);
}

Tensor<float> render_box_channel(const std::vector<BoxAnnotation>& boxes, const SensorConfig& cfg) {
  std::vector<OrientedBox> obs;
  for (const auto& b : boxes) obs.push_back(b.box);
  return render_road_sketch({}, obs, cfg);
}

SequenceSample simulate_sequence(const SceneWorld& world, std::size_t frames, const SensorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (frames < 1) throw ConfigError("simulate_sequence: need at least one frame");
  SequenceSample s;
  s.seed = seed;
  s.caption = derive_caption(world);
  const std::vector<Polyline> layout = world.layout();
  std::vector<Category> cats;
  for (const Agent& a : world.agents) cats.push_back(a.category);
  for (std::size_t f = 0; f < frames; ++f) {
    const Pose pose = world.ego_pose(f);
    std::vector<OrientedBox> world_boxes, sensor_boxes;
    std::vector<BoxAnnotation> anns;
    for (const Agent& a : world.agents) {
      world_boxes.push_back(a.box_at(f));
      sensor_boxes.push_back(pose.to_sensor(world_boxes.back()));
      anns.push_back({a.id, static_cast<int>(f), a.category, sensor_boxes.back(), mix_seed(a.prior_seed, f)});
    }
    s.frames.push_back(project(raycast_frame(world, pose, world_boxes, cats, cfg), cfg));
    std::vector<Polyline> local_layout;
    for (const Polyline& line : layout) {
      Polyline l;
      for (const Vec3& p : line) l.push_back(pose.to_sensor(p));
      local_layout.push_back(std::move(l));
    }
    s.sketches.push_back(render_road_sketch(local_layout, sensor_boxes, cfg));
    s.priors.push_back(render_frame_prior(anns, cfg));
    s.boxes.insert(s.boxes.end(), anns.begin(), anns.end());
  }
  return s;
}

std::vector<std::uint8_t> box_footprint(const OrientedBox& box, const SensorConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.H, W = cfg.W;
  std::vector<std::uint8_t> hit(H * W, 0);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      auto t = ray_box({0, 0, 0}, bin_direction(i, j, cfg), box);
      if (t && *t <= cfg.d_max) hit[i * W + j] = 1;
    }
  }
  constexpr double kGrid = 0.05;
  for (const Face& f : box_faces(box)) {
    const double lu = 2.0 * norm(f.u), lv = 2.0 * norm(f.v);
    const auto nu = static_cast<std::size_t>(std::ceil(lu / kGrid)), nv = static_cast<std::size_t>(std::ceil(lv / kGrid));
    for (std::size_t a = 0; a <= nu; ++a) {
      for (std::size_t b = 0; b <= nv; ++b) {
        const double sa = -1.0 + 2.0 * static_cast<double>(a) / static_cast<double>(nu);
        const double sb = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(nv);
        const Vec3 p = to_world(box, f.center + sa * f.u + sb * f.v);
        const double r = norm(p);
        if (!(r > 0.0) || r > cfg.d_max) continue;
        if (auto px = bin_of(p, cfg)) hit[px->row * W + px->col] = 1;
      }
    }
  }
  std::vector<std::uint8_t> out(H * W, 0);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      if (!hit[i * W + j]) continue;
      for (long di = -1; di <= 1; ++di) {
        const long ii = static_cast<long>(i) + di;
        if (ii < 0 || ii >= static_cast<long>(H)) continue;
        for (std::size_t dj : {W - 1, std::size_t{0}, std::size_t{1}}) out[static_cast<std::size_t>(ii) * W + (j + dj) % W] = 1;
      }
    }
  }
  return out;
}

void validate_consistency(const Tensor<float>& sketch, const Tensor<float>& prior, const std::vector<BoxAnnotation>& boxes,
                          const SensorConfig& cfg) {
  const std::size_t hw = cfg.H * cfg.W;
  if (sketch.shape() != Shape{2, cfg.H, cfg.W} || prior.shape() != Shape{2, cfg.H, cfg.W}) {
    throw DimensionError("validate_consistency: condition images do not match the sensor");
  }
  std::vector<std::uint8_t> allowed(hw, 0);
  for (const auto& b : boxes) {
    const auto fp = box_footprint(b.box, cfg);
    for (std::size_t k = 0; k < hw; ++k) allowed[k] |= fp[k];
  }
  std::size_t bad_sketch = 0, bad_prior = 0;
  for (std::size_t k = 0; k < hw; ++k) {
    if (allowed[k]) continue;
    bad_sketch += sketch[hw + k] != 0.0f;
    bad_prior += prior[k] > -1.0f;
  }
  if (bad_sketch || bad_prior) {
    throw ValidationError("condition consistency violated: " + std::to_string(bad_sketch) + " sketch and " +
                          std::to_string(bad_prior) + " prior pixels outside annotated boxes");
  }
}

// ---- dataset layout ------------------------------------------------------

std::string caption_to_text(const std::vector<std::int32_t>& caption) {
  std::string out;
  for (std::size_t i = 0; i < caption.size(); ++i) {
    if (i) out += ' ';
    out += token_name(caption[i]);
  }
  return out;
}

std::vector<std::int32_t> caption_from_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::int32_t> out;
  std::string word;
  while (in >> word) out.push_back(token_id(word));
  if (out.size() > kMaxCaptionLength) throw ValidationError("caption longer than 16 tokens");
  return out;
}

std::string boxes_to_jsonl(const std::vector<BoxAnnotation>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    nlohmann::ordered_json j;
    j["id"] = b.id;
    j["frame"] = b.frame;
    j["category"] = category_name(b.category);
    j["l"] = b.box.l;
    j["w"] = b.box.w;
    j["h"] = b.box.h;
    j["center"] = {b.box.center.x, b.box.center.y, b.box.center.z};
    j["heading"] = b.box.heading;
    j["prior_seed"] = b.prior_seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<BoxAnnotation> boxes_from_jsonl(std::string_view text) {
  std::vector<BoxAnnotation> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      BoxAnnotation b;
      b.id = j.at("id").get<int>();
      b.frame = j.at("frame").get<int>();
      b.category = parse_category(j.at("category").get<std::string>());
      b.box.l = j.at("l").get<double>();
      b.box.w = j.at("w").get<double>();
      b.box.h = j.at("h").get<double>();
      const auto& c = j.at("center");
      b.box.center = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
      b.box.heading = j.at("heading").get<double>();
      b.prior_seed = j.value("prior_seed", std::uint64_t{0});
      out.push_back(b);
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError("boxes.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string indexed(const char* stem, std::size_t k) { return std::string(stem) + "_" + std::to_string(k) + ".l4dt"; }

}  // namespace

void write_sequence(const std::filesystem::path& dir, const SequenceSample& sample) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < sample.frames.size(); ++k) {
    write_image(dir / indexed("frame", k), dir / indexed("mask", k), sample.frames[k]);
    write_l4dt(dir / indexed("sketch", k), sample.sketches.at(k));
    write_l4dt(dir / indexed("prior", k), sample.priors.at(k));
  }
  write_text(dir / "caption.txt", caption_to_text(sample.caption) + "\n");
  write_text(dir / "boxes.jsonl", boxes_to_jsonl(sample.boxes));
  write_text(dir / "seed.txt", std::to_string(sample.seed) + "\n");
}

SequenceSample read_sequence(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IngestionError("missing sequence directory " + dir.string());
  SequenceSample s;
  std::vector<std::string> missing;
  for (const char* f : {"caption.txt", "boxes.jsonl"}) {
    if (!std::filesystem::exists(dir / f)) missing.push_back((dir / f).string());
  }
  std::size_t k = 0;
  for (; std::filesystem::exists(dir / indexed("frame", k)); ++k) {
    for (const char* stem : {"mask", "sketch", "prior"}) {
      if (!std::filesystem::exists(dir / indexed(stem, k))) missing.push_back((dir / indexed(stem, k)).string());
    }
  }
  if (k == 0) missing.push_back((dir / indexed("frame", 0)).string());
  if (!missing.empty()) {
    std::string msg = "incomplete sequence directory; missing:";
    for (const auto& m : missing) msg += " " + m;
    throw IngestionError(msg);
  }
  for (std::size_t f = 0; f < k; ++f) {
    s.frames.push_back(read_image(dir / indexed("frame", f), dir / indexed("mask", f)));
    s.sketches.push_back(read_l4dt<float>(dir / indexed("sketch", f)));
    s.priors.push_back(read_l4dt<float>(dir / indexed("prior", f)));
  }
  s.caption = caption_from_text(read_text(dir / "caption.txt"));
  s.boxes = boxes_from_jsonl(read_text(dir / "boxes.jsonl"));
  if (std::filesystem::exists(dir / "seed.txt")) s.seed = std::stoull(read_text(dir / "seed.txt"));
  return s;
}

}  // namespace seqlidar
