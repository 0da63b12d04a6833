#ifndef SLWIN_FIELDS_HPP
#define SLWIN_FIELDS_HPP

#include <array>
#include <bitset>
#include <cstdint>
#include <span>
#include <vector>

#include "geometry.hpp"

namespace slwin {

/// Cell-centred quantities. us/vs/ws hold the intermediate (pressure-free)
/// velocity of the fractional step.
enum class Quantity : std::uint8_t { u = 0, v, w, p, us, vs, ws };
inline constexpr int kQuantityCount = 7;

using QuantityMask = std::bitset<kQuantityCount>;

inline QuantityMask mask_of(std::initializer_list<Quantity> qs) {
  QuantityMask m;
  for (auto q : qs) m.set(static_cast<std::size_t>(q));
  return m;
}
inline const QuantityMask kVelocity = mask_of({Quantity::u, Quantity::v, Quantity::w});
inline const QuantityMask kStarred = mask_of({Quantity::us, Quantity::vs, Quantity::ws});
inline const QuantityMask kPressure = mask_of({Quantity::p});
inline const QuantityMask kFlow = kVelocity | kPressure;

inline constexpr Quantity velocity_component(int axis) { return static_cast<Quantity>(axis); }
inline constexpr Quantity starred_component(int axis) {
  return static_cast<Quantity>(static_cast<int>(Quantity::us) + axis);
}
inline constexpr bool is_velocity_like(Quantity q) { return q != Quantity::p; }
inline constexpr int component_axis(Quantity q) {
  const int s = static_cast<int>(q);
  return q == Quantity::p ? -1 : (s >= 4 ? s - 4 : s);
}

/// Collocated arrays over the interior cells plus a one-cell ghost halo.
/// Interior indices run 0..nc-1, ghosts sit at -1 and nc.
class FieldSet {
 public:
  static constexpr int kHalo = 1;

  FieldSet() = default;
  explicit FieldSet(const Index3& cells) : cells_(cells) {
    for (int a = 0; a < 3; ++a) dims_[a] = cells[a] + 2 * kHalo;
    const std::size_t n = static_cast<std::size_t>(product(dims_));
    for (auto& d : data_) d.assign(n, 0.0);
  }

  const Index3& cells() const { return cells_; }
  const Index3& dims() const { return dims_; }
  std::size_t size() const { return data_[0].size(); }

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k + kHalo) * dims_[1] + static_cast<std::size_t>(j + kHalo)) *
               dims_[0] +
           static_cast<std::size_t>(i + kHalo);
  }
  /// Linear offset of a unit step along `axis`.
  std::size_t stride(int axis) const {
    return axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(dims_[0])
                                     : static_cast<std::size_t>(dims_[0]) * dims_[1];
  }

  double& operator()(Quantity q, int i, int j, int k) { return data_[slot(q)][index(i, j, k)]; }
  double operator()(Quantity q, int i, int j, int k) const {
    return data_[slot(q)][index(i, j, k)];
  }

  std::span<double> raw(Quantity q) { return data_[slot(q)]; }
  std::span<const double> raw(Quantity q) const { return data_[slot(q)]; }

  void fill(Quantity q, double value) { std::fill(data_[slot(q)].begin(), data_[slot(q)].end(), value); }

  bool same_shape(const FieldSet& o) const { return cells_ == o.cells_; }

 private:
  static std::size_t slot(Quantity q) { return static_cast<std::size_t>(q); }

  Index3 cells_{0, 0, 0};
  Index3 dims_{0, 0, 0};
  std::array<std::vector<double>, kQuantityCount> data_;
};

}  // namespace slwin

#endif
