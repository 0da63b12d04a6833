#ifndef SLWIN_GEOMETRY_HPP
#define SLWIN_GEOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slwin {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;
using GridId = std::uint64_t;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* axis_name(int axis) {
  constexpr const char* names[] = {"x", "y", "z"};
  return names[axis];
}

inline constexpr long long product(const Index3& n) {
  return static_cast<long long>(n[0]) * n[1] * n[2];
}

/// Axis-aligned box [lo, hi] in world units.
struct Box {
  Vec3 lo{0.0, 0.0, 0.0};
  Vec3 hi{0.0, 0.0, 0.0};

  double extent(int axis) const { return hi[axis] - lo[axis]; }
  Vec3 extents() const { return {extent(0), extent(1), extent(2)}; }
  double volume() const { return extent(0) * extent(1) * extent(2); }
  Vec3 center() const {
    return {0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])};
  }
  bool valid() const {
    for (int a = 0; a < 3; ++a)
      if (!(hi[a] >= lo[a]) || !std::isfinite(lo[a]) || !std::isfinite(hi[a])) return false;
    return true;
  }
  /// Closed containment.
  bool contains(const Vec3& p) const {
    for (int a = 0; a < 3; ++a)
      if (p[a] < lo[a] || p[a] > hi[a]) return false;
    return true;
  }
  double max_extent() const { return std::max({extent(0), extent(1), extent(2)}); }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection of two boxes; empty (lo > hi on some axis) when disjoint.
inline Box intersection(const Box& a, const Box& b) {
  Box r;
  for (int ax = 0; ax < 3; ++ax) {
    r.lo[ax] = std::max(a.lo[ax], b.lo[ax]);
    r.hi[ax] = std::min(a.hi[ax], b.hi[ax]);
  }
  return r;
}

/// Measure of a ∩ b along the axes where the window b has nonzero extent.
inline double overlap_measure(const Box& a, const Box& b) {
  double m = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double w = std::min(a.hi[ax], b.hi[ax]) - std::max(a.lo[ax], b.lo[ax]);
    if (w <= 0.0) return 0.0;
    m *= w;
  }
  return m;
}

enum class Face : std::uint8_t { xm = 0, xp = 1, ym = 2, yp = 3, zm = 4, zp = 5 };

inline constexpr std::array<Face, 6> kAllFaces{Face::xm, Face::xp, Face::ym,
                                               Face::yp, Face::zm, Face::zp};

inline constexpr int face_axis(Face f) { return static_cast<int>(f) / 2; }
inline constexpr bool face_upper(Face f) { return static_cast<int>(f) % 2 == 1; }
inline constexpr Face opposite(Face f) {
  return static_cast<Face>(static_cast<int>(f) ^ 1);
}
inline constexpr Face make_face(int axis, bool upper) {
  return static_cast<Face>(axis * 2 + (upper ? 1 : 0));
}

inline std::string face_name(Face f) {
  return std::string(face_upper(f) ? "+" : "-") + axis_name(face_axis(f));
}

inline Face parse_face(const std::string& s) {
  if (s.size() == 2 && (s[0] == '+' || s[0] == '-')) {
    for (int a = 0; a < 3; ++a)
      if (s[1] == axis_name(a)[0]) return make_face(a, s[0] == '+');
  }
  throw Error("unknown face '" + s + "' (expected one of -x +x -y +y -z +z)");
}

}  // namespace slwin

#endif
