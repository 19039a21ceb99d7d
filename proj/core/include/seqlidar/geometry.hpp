// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace seqlidar {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }

/// Rotation about +z by `angle` radians.
inline Vec3 rotate_z(Vec3 p, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0.0) a += two_pi;
  return a - std::numbers::pi;
}

using Polyline = std::vector<Vec3>;

/// Box with extents l (along heading), w, h; `center` is the geometric center
/// and `heading` rotates the length axis about +z.
struct OrientedBox {
  double l = 0.0;
  double w = 0.0;
  double h = 0.0;
  Vec3 center;
  double heading = 0.0;

  /// Eight corners; bit 0 of the index selects +l/2, bit 1 +w/2, bit 2 +h/2.
  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    for (int i = 0; i < 8; ++i) {
      const Vec3 local{(i & 1 ? 0.5 : -0.5) * l, (i & 2 ? 0.5 : -0.5) * w, (i & 4 ? 0.5 : -0.5) * h};
      out[i] = center + rotate_z(local, heading);
    }
    return out;
  }

  /// Corner index pairs of the 12 edges.
  static constexpr std::array<std::array<int, 2>, 12> kEdges{{{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                                             {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                                             {0, 4}, {1, 5}, {2, 6}, {3, 7}}};

  /// Point expressed in the box frame (origin at center, x along heading).
  Vec3 to_local(Vec3 p) const { return rotate_z(p - center, -heading); }

  bool contains(Vec3 p, double margin = 0.0) const {
    const Vec3 q = to_local(p);
    return std::abs(q.x) <= 0.5 * l + margin && std::abs(q.y) <= 0.5 * w + margin && std::abs(q.z) <= 0.5 * h + margin;
  }
};

/// Throws ValidationError when any extent is not positive or not finite.
void validate_box(const OrientedBox& box);

}  // namespace seqlidar
