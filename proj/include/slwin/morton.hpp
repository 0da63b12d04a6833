#ifndef SLWIN_MORTON_HPP
#define SLWIN_MORTON_HPP

#include <bit>
#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "geometry.hpp"

namespace slwin {

struct MortonKey {
  std::uint64_t value = 0;
  friend auto operator<=>(const MortonKey&, const MortonKey&) = default;
};

/// Which axes take part in bit interleaving (pseudo-2D runs drop z).
using AxisSet = std::array<bool, 3>;

inline int axis_count(const AxisSet& axes) {
  return int(axes[0]) + int(axes[1]) + int(axes[2]);
}

/// Interleaves the bits of the participating coordinates, x lowest:
/// with all three axes, key bits (3b, 3b+1, 3b+2) = (x_b, y_b, z_b).
inline std::uint64_t morton_interleave(const std::array<std::uint64_t, 3>& coords,
                                       const AxisSet& axes = {true, true, true}) {
  const int dims = axis_count(axes);
  if (dims == 0) return 0;
  std::uint64_t key = 0;
  int out = 0;
  for (int b = 0; b < 64 && out < 64; ++b) {
    for (int a = 0; a < 3; ++a) {
      if (!axes[a]) continue;
      if (out >= 64) break;
      key |= ((coords[a] >> b) & 1u) << out;
      ++out;
    }
  }
  return key;
}

inline std::array<std::uint64_t, 3> morton_deinterleave(std::uint64_t key,
                                                        const AxisSet& axes = {true, true, true}) {
  std::array<std::uint64_t, 3> c{0, 0, 0};
  const int dims = axis_count(axes);
  if (dims == 0) return c;
  int in = 0;
  for (int b = 0; in < 64; ++b) {
    for (int a = 0; a < 3 && in < 64; ++a) {
      if (!axes[a]) continue;
      c[a] |= ((key >> in) & 1u) << b;
      ++in;
    }
  }
  return c;
}

/// Encodes hierarchy paths (root block index followed by one child index per
/// level) into Z-order keys. Each level contributes ceil(log2(n)) bits per
/// axis, so siblings are contiguous even for non power-of-two subdivisions;
/// for n == 2 the key equals the classic interleave of integer coordinates.
class MortonCodec {
 public:
  MortonCodec() = default;

  /// radices[0] is the number of level-0 blocks per axis, radices[l] the
  /// subdivision that produced level l.
  MortonCodec(AxisSet axes, std::vector<Index3> radices)
      : axes_(axes), radices_(std::move(radices)) {}

  const AxisSet& axes() const { return axes_; }
  std::size_t depth_capacity() const { return radices_.size(); }

  void set_radix(std::size_t level, const Index3& n) {
    if (radices_.size() <= level) radices_.resize(level + 1, Index3{1, 1, 1});
    radices_[level] = n;
  }
  const Index3& radix(std::size_t level) const { return radices_.at(level); }

  static int digit_bits(int n) {
    return n <= 1 ? 0 : std::bit_width(static_cast<unsigned>(n - 1));
  }

  MortonKey encode(std::span<const Index3> path) const {
    return MortonKey{morton_interleave(coordinates(path, path.size()), axes_)};
  }

  /// Key of `path` extended with zero digits down to `length` entries; used to
  /// order grids of different depths (parents sort just before their first
  /// descendant).
  MortonKey encode_padded(std::span<const Index3> path, std::size_t length) const {
    return MortonKey{morton_interleave(coordinates(path, length), axes_)};
  }

  std::vector<Index3> decode(MortonKey key, std::size_t length) const {
    check_length(length);
    auto coords = morton_deinterleave(key.value, axes_);
    std::vector<Index3> path(length, Index3{0, 0, 0});
    for (int a = 0; a < 3; ++a) {
      std::uint64_t c = coords[a];
      for (std::size_t l = length; l-- > 0;) {
        const int w = digit_bits(radices_[l][a]);
        path[l][a] = static_cast<int>(c & ((std::uint64_t{1} << w) - 1));
        c >>= w;
      }
      if (c != 0) throw Error("morton key out of range for the requested depth");
    }
    return path;
  }

 private:
  void check_length(std::size_t length) const {
    if (length > radices_.size())
      throw Error("morton path deeper than the configured subdivision table");
    int bits = 0;
    for (int a = 0; a < 3; ++a) {
      if (!axes_[a]) continue;
      int axis_bits = 0;
      for (std::size_t l = 0; l < length; ++l) axis_bits += digit_bits(radices_[l][a]);
      bits = std::max(bits, axis_bits);
    }
    if (bits * axis_count(axes_) > 64) throw Error("morton key exceeds 64 bits");
  }

  std::array<std::uint64_t, 3> coordinates(std::span<const Index3> path,
                                           std::size_t length) const {
    check_length(std::max(length, path.size()));
    std::array<std::uint64_t, 3> coords{0, 0, 0};
    for (std::size_t l = 0; l < length; ++l) {
      for (int a = 0; a < 3; ++a) {
        const int n = radices_[l][a];
        const int digit = l < path.size() ? path[l][a] : 0;
        if (digit < 0 || digit >= n)
          throw Error("morton path index " + std::to_string(digit) + " out of range on axis " +
                      axis_name(a) + " at level " + std::to_string(l));
        if (!axes_[a]) continue;
        coords[a] = (coords[a] << digit_bits(n)) | static_cast<std::uint64_t>(digit);
      }
    }
    return coords;
  }

  AxisSet axes_{true, true, true};
  std::vector<Index3> radices_;
};

}  // namespace slwin

#endif
