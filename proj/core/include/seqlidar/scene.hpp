// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "seqlidar/equirect.hpp"
#include "seqlidar/geometry.hpp"
#include "seqlidar/tensor.hpp"

namespace seqlidar {

inline constexpr double kFrameInterval = 0.5;  // seconds between frames

enum class Category : std::uint8_t { kCar, kTruck, kPedestrian };
enum class TimeOfDay : std::uint8_t { kDay, kDusk, kNight };
enum class Weather : std::uint8_t { kClear, kCloudy, kRainy, kFoggy };
enum class Background : std::uint8_t { kBuildings, kTrees, kGrassy, kMixed };

enum class SurfaceClass : std::uint8_t { kGround, kBuilding, kTree, kVehicle, kPedestrian };
double surface_reflectance(SurfaceClass s);

std::string_view category_name(Category c);
Category parse_category(std::string_view name);

struct Agent {
  int id = 0;
  Category category = Category::kCar;
  OrientedBox box;  // world frame at frame 0
  Vec3 velocity;    // m/s, planar
  std::uint64_t prior_seed = 0;

  OrientedBox box_at(std::size_t frame) const;
};

/// Vertical cylinder standing on the ground (tree or bush).
struct Cylinder {
  Vec3 base;
  double radius = 0.5;
  double height = 4.0;
};

/// Sensor pose in the world; the sensor frame is x forward, y left, z up.
struct Pose {
  Vec3 position;
  double yaw = 0.0;

  Vec3 to_sensor(Vec3 world) const { return rotate_z(world - position, -yaw); }
  OrientedBox to_sensor(const OrientedBox& b) const {
    return {b.l, b.w, b.h, to_sensor(b.center), wrap_angle(b.heading - yaw)};
  }
};

struct WorldAttributes {
  TimeOfDay time_of_day = TimeOfDay::kDay;
  Weather weather = Weather::kClear;
  Background background = Background::kBuildings;
  friend bool operator==(const WorldAttributes&, const WorldAttributes&) = default;
};

struct SceneWorld {
  double lane_half_width = 1.75;
  double road_half_width = 7.0;
  Polyline centerline;
  std::vector<Polyline> curbs;
  std::vector<Polyline> lanes;
  std::vector<OrientedBox> buildings;
  std::vector<Cylinder> trees;
  std::vector<Agent> agents;
  Pose ego_start;
  Vec3 ego_velocity;
  WorldAttributes attributes;

  Pose ego_pose(std::size_t frame) const;
  /// Curbs and lane lines.
  std::vector<Polyline> layout() const;
};

struct WorldParams {
  std::size_t min_agents = 1;
  std::size_t max_agents = 8;
  std::size_t min_props = 4;
  std::size_t max_props = 20;
  std::array<double, 3> time_weights{1.0, 1.0, 1.0};
  std::array<double, 4> weather_weights{1.0, 1.0, 1.0, 1.0};
  std::array<double, 4> background_weights{1.0, 1.0, 1.0, 1.0};
  std::array<double, 3> category_weights{0.6, 0.15, 0.25};
  double max_agent_speed = 8.0;
  double max_ego_speed = 5.5;
  double sensor_height = 1.8;
  double spawn_radius = 40.0;

  void validate() const;
  friend bool operator==(const WorldParams&, const WorldParams&) = default;
};

/// Deterministic in (seed, params). Throws GenerationError when placement
/// keeps colliding.
SceneWorld synth_world(std::uint64_t seed, const WorldParams& params);

/// Empty list when the world satisfies every structural invariant.
std::vector<std::string> validate_world(const SceneWorld& world);

/// Nearest hit for every bin-center ray, in the sensor frame.
PointCloud raycast_frame(const SceneWorld& world, std::size_t frame, const SensorConfig& cfg);
PointCloud raycast_frame(const SceneWorld& world, const Pose& ego, const std::vector<OrientedBox>& agent_boxes,
                         const std::vector<Category>& agent_categories, const SensorConfig& cfg);

// ---- captions --------------------------------------------------------------
inline constexpr std::size_t kMaxCaptionLength = 16;

/// Caption vocabulary in id order.
const std::vector<std::string>& caption_vocabulary();
std::int32_t token_id(std::string_view name);
std::string_view token_name(std::int32_t id);

/// [time, weather, background, agent categories sorted, one per agent].
std::vector<std::int32_t> derive_caption(const WorldAttributes& attributes, const std::vector<Category>& agents);
std::vector<std::int32_t> derive_caption(const SceneWorld& world);

enum class CaptionSlot : std::uint8_t { kTime = 0, kWeather = 1, kBackground = 2 };
/// Tokens that may occupy a slot.
bool token_fits_slot(std::int32_t id, CaptionSlot slot);

// ---- object priors -------------------------------------------------------
struct ObjectCondition {
  Category category = Category::kCar;
  double l = 4.5;
  double w = 1.9;
  double h = 1.6;
  double rho = 10.0;
  double theta = 0.0;
  double phi = 0.0;
  double heading = 0.0;

  /// Box placed at (rho, theta, phi) in the sensor frame.
  OrientedBox box() const;
  static ObjectCondition from_box(Category category, const OrientedBox& box);
};

/// Surface points of the object visible from the sensor origin, with density
/// proportional to 1/rho^2. Throws ValidationError for rho > d_max.
PointCloud sample_object_prior(const ObjectCondition& obj, std::uint64_t seed, double d_max);

/// Points per square meter at one meter range.
inline constexpr double kPriorDensity = 4000.0;

// ---- sequences -------------------------------------------------------------
struct BoxAnnotation {
  int id = 0;
  int frame = 0;
  Category category = Category::kCar;
  OrientedBox box;  // sensor frame of `frame`
  std::uint64_t prior_seed = 0;
};

struct SequenceSample {
  std::uint64_t seed = 0;
  std::vector<EquirectImage> frames;
  std::vector<Tensor<float>> sketches;
  std::vector<Tensor<float>> priors;
  std::vector<std::int32_t> caption;
  std::vector<BoxAnnotation> boxes;

  std::size_t num_frames() const { return frames.size(); }
  std::vector<BoxAnnotation> boxes_in_frame(int frame) const;
};

SequenceSample simulate_sequence(const SceneWorld& world, std::size_t frames, const SensorConfig& cfg,
                                 std::uint64_t seed = 0);

/// Object-prior image for a set of annotated boxes (boxes beyond d_max skipped).
Tensor<float> render_frame_prior(const std::vector<BoxAnnotation>& boxes, const SensorConfig& cfg);
/// Channel 1 of the road sketch for a set of boxes.
Tensor<float> render_box_channel(const std::vector<BoxAnnotation>& boxes, const SensorConfig& cfg);

/// Pixels covered by a box seen from the sensor, dilated by one pixel.
std::vector<std::uint8_t> box_footprint(const OrientedBox& box, const SensorConfig& cfg);

/// Throws ValidationError when prior or sketch-box pixels of a frame fall
/// outside the dilated footprints of that frame's annotations.
void validate_consistency(const Tensor<float>& sketch, const Tensor<float>& prior,
                          const std::vector<BoxAnnotation>& boxes, const SensorConfig& cfg);

// ---- dataset layout ------------------------------------------------------
void write_sequence(const std::filesystem::path& dir, const SequenceSample& sample);
/// Reads every frame_<k> present; throws IngestionError listing missing files.
SequenceSample read_sequence(const std::filesystem::path& dir);

std::string caption_to_text(const std::vector<std::int32_t>& caption);
std::vector<std::int32_t> caption_from_text(std::string_view text);

std::string boxes_to_jsonl(const std::vector<BoxAnnotation>& boxes);
std::vector<BoxAnnotation> boxes_from_jsonl(std::string_view text);

/// Stable 64-bit mixing of a seed with a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace seqlidar
