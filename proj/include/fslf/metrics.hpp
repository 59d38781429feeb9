#ifndef FSLF_METRICS_HPP
#define FSLF_METRICS_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslf/grid.hpp"

namespace fslf {

struct MetricError : std::runtime_error {
  explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MetricReport {
  int structure = 0;
  int iteration = 0;
  double dice = 0.0;
  double hausdorff = 0.0;
};

// 2|A^B| / (|A|+|B|); two empty masks count as identical.
inline double dice(const LabelVolume& a, const LabelVolume& b) {
  if (!a.same_dims(b)) throw MetricError("dice: dimension mismatch");
  size_t na = 0, nb = 0, ni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    bool fa = a[i] != 0, fb = b[i] != 0;
    na += fa;
    nb += fb;
    ni += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

// Foreground voxels with at least one background (or out-of-volume)
// 6-neighbour.
inline std::vector<std::array<int, 3>> boundary_voxels(const LabelVolume& m) {
  static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < m.nz(); ++z)
    for (int y = 0; y < m.ny(); ++y)
      for (int x = 0; x < m.nx(); ++x) {
        if (!m.at(x, y, z)) continue;
        bool on_boundary = false;
        for (const auto& o : off) {
          int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!m.inside(nx, ny, nz) || !m.at(nx, ny, nz)) {
            on_boundary = true;
            break;
          }
        }
        if (on_boundary) out.push_back({x, y, z});
      }
  return out;
}

namespace metric_detail {

inline double directed_hausdorff(const std::vector<std::array<int, 3>>& a,
                                 const std::vector<std::array<int, 3>>& b) {
  double worst = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
      if (best == 0.0) break;
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

}  // namespace metric_detail

// Classic (100th percentile) symmetric Hausdorff distance between the
// boundary voxel sets, in voxel units.
inline double hausdorff(const LabelVolume& a, const LabelVolume& b) {
  if (!a.same_dims(b)) throw MetricError("hausdorff: dimension mismatch");
  auto ba = boundary_voxels(a);
  auto bb = boundary_voxels(b);
  if (ba.empty() || bb.empty())
    throw MetricError("hausdorff: undefined for an empty mask");
  return std::max(metric_detail::directed_hausdorff(ba, bb),
                  metric_detail::directed_hausdorff(bb, ba));
}

}  // namespace fslf

#endif  // FSLF_METRICS_HPP
