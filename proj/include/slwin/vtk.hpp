#ifndef SLWIN_VTK_HPP
#define SLWIN_VTK_HPP

#include <ostream>

#include "window.hpp"

namespace slwin {

/// Legacy VTK unstructured grid from a cell stream. Each cell becomes a
/// quad when the stream is one cell thick along z, otherwise a voxel;
/// points are not shared between cells.
inline void write_vtk_cells(const CellStream& cs, std::ostream& os) {
  bool flat = true;
  if (!cs.cells.empty()) {
    const double z0 = cs.cells.front().center[2], dz = cs.cells.front().width[2];
    for (const auto& c : cs.cells)
      if (c.center[2] != z0 || c.width[2] != dz) flat = false;
  }
  const int corners = flat ? 4 : 8;
  const std::size_t n = cs.cells.size();
  os.precision(17);
  os << "# vtk DataFile Version 3.0\n";
  os << quantity_name(cs.quantity) << " step " << cs.step << " time " << cs.time << "\n";
  os << "ASCII\nDATASET UNSTRUCTURED_GRID\n";
  os << "POINTS " << n * corners << " double\n";
  for (const auto& c : cs.cells) {
    Vec3 lo, hi;
    for (int a = 0; a < 3; ++a) {
      lo[a] = c.center[a] - 0.5 * c.width[a];
      hi[a] = c.center[a] + 0.5 * c.width[a];
    }
    if (flat) {
      // VTK_QUAD winds counter-clockwise.
      os << lo[0] << ' ' << lo[1] << ' ' << c.center[2] << '\n'
         << hi[0] << ' ' << lo[1] << ' ' << c.center[2] << '\n'
         << hi[0] << ' ' << hi[1] << ' ' << c.center[2] << '\n'
         << lo[0] << ' ' << hi[1] << ' ' << c.center[2] << '\n';
    } else {
      // VTK_VOXEL orders x fastest, then y, then z.
      for (int k = 0; k < 2; ++k)
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i)
            os << (i ? hi[0] : lo[0]) << ' ' << (j ? hi[1] : lo[1]) << ' ' << (k ? hi[2] : lo[2]) << '\n';
    }
  }
  os << "CELLS " << n << ' ' << n * (corners + 1) << '\n';
  for (std::size_t c = 0; c < n; ++c) {
    os << corners;
    for (int p = 0; p < corners; ++p) os << ' ' << c * corners + p;
    os << '\n';
  }
  os << "CELL_TYPES " << n << '\n';
  for (std::size_t c = 0; c < n; ++c) os << (flat ? 9 : 11) << '\n';
  os << "CELL_DATA " << n << '\n';
  os << "SCALARS level int 1\nLOOKUP_TABLE default\n";
  for (const auto& c : cs.cells) os << int(c.level) << '\n';
  if (cs.arity() == 3) {
    os << "VECTORS " << quantity_name(cs.quantity) << " double\n";
    for (const auto& c : cs.cells) os << c.values[0] << ' ' << c.values[1] << ' ' << c.values[2] << '\n';
  } else {
    os << "SCALARS " << quantity_name(cs.quantity) << " double 1\nLOOKUP_TABLE default\n";
    for (const auto& c : cs.cells) os << c.values[0] << '\n';
  }
}

}  // namespace slwin

#endif
