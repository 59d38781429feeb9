#ifndef FSLF_VOLUME_OPS_HPP
#define FSLF_VOLUME_OPS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "fslf/grid.hpp"

namespace fslf {

// Signed distance map of one structure: negative inside, positive outside,
// magnitude = Euclidean distance (voxel units) to the nearest voxel of the
// opposite class. Absent class gets the +/-(nx+ny+nz) sentinel.
struct Sdm {
  VolumeF volume;
  int source_label = 0;
};

inline VolumeF gradient_magnitude(const VolumeF& v) {
  if (v.nx() < 3 || v.ny() < 3 || v.nz() < 3)
    throw GridError("gradient_magnitude: each dimension must be >= 3");
  VolumeF g(v.nx(), v.ny(), v.nz());
  for (int z = 0; z < v.nz(); ++z)
    for (int y = 0; y < v.ny(); ++y)
      for (int x = 0; x < v.nx(); ++x) {
        double dx = 0.5 * (v.at_mirrored(x + 1, y, z) - v.at_mirrored(x - 1, y, z));
        double dy = 0.5 * (v.at_mirrored(x, y + 1, z) - v.at_mirrored(x, y - 1, z));
        double dz = 0.5 * (v.at_mirrored(x, y, z + 1) - v.at_mirrored(x, y, z - 1));
        g.at(x, y, z) = float(std::sqrt(dx * dx + dy * dy + dz * dz));
      }
  return g;
}

// Raster-ordered side^3 cube around a center voxel, mirror-padded.
template <typename T>
std::vector<float> extract_patch3(const Grid3<T>& v, int cx, int cy, int cz,
                                  int side) {
  if (side < 1 || side % 2 == 0)
    throw GridError("extract_patch3: side must be a positive odd integer");
  int h = side / 2;
  std::vector<float> out;
  out.reserve(size_t(side) * side * side);
  for (int dz = -h; dz <= h; ++dz)
    for (int dy = -h; dy <= h; ++dy)
      for (int dx = -h; dx <= h; ++dx)
        out.push_back(float(v.at_mirrored(cx + dx, cy + dy, cz + dz)));
  return out;
}

// Axial (xy) side x side patch through a voxel, mirror-padded. Any side >= 1.
template <typename T>
std::vector<float> extract_patch2(const Grid3<T>& v, int cx, int cy, int cz,
                                  int side) {
  if (side < 1) throw GridError("extract_patch2: side must be >= 1");
  int h0 = (side - 1) / 2;
  std::vector<float> out;
  out.reserve(size_t(side) * side);
  for (int dy = -h0; dy < side - h0; ++dy)
    for (int dx = -h0; dx < side - h0; ++dx)
      out.push_back(float(v.at_mirrored(cx + dx, cy + dy, cz)));
  return out;
}

namespace detail {

// 1D squared distance transform of a sampled function (lower envelope of
// parabolas), Felzenszwalb-Huttenlocher.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  int n = int(f.size());
  d.resize(n);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = double(q - v[k]) * (q - v[k]) + f[v[k]];
  }
}

// Squared Euclidean distance to the nearest set voxel. Non-set voxels start
// at a finite bound above any realizable squared distance so the parabola
// envelope stays well defined.
inline std::vector<double> edt_sq(const LabelVolume& mask, bool to_value) {
  int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  const double FAR =
      double(nx) * nx + double(ny) * ny + double(nz) * nz + 1.0;
  std::vector<double> d(mask.size());
  for (size_t i = 0; i < mask.size(); ++i)
    d[i] = (bool(mask[i]) == to_value) ? 0.0 : FAR;

  std::vector<double> line, out;
  // x pass
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      line.assign(nx, 0.0);
      for (int x = 0; x < nx; ++x) line[x] = d[mask.index(x, y, z)];
      edt_1d(line, out);
      for (int x = 0; x < nx; ++x) d[mask.index(x, y, z)] = out[x];
    }
  // y pass
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x) {
      line.assign(ny, 0.0);
      for (int y = 0; y < ny; ++y) line[y] = d[mask.index(x, y, z)];
      edt_1d(line, out);
      for (int y = 0; y < ny; ++y) d[mask.index(x, y, z)] = out[y];
    }
  // z pass
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      line.assign(nz, 0.0);
      for (int z = 0; z < nz; ++z) line[z] = d[mask.index(x, y, z)];
      edt_1d(line, out);
      for (int z = 0; z < nz; ++z) d[mask.index(x, y, z)] = out[z];
    }
  return d;
}

}  // namespace detail

inline Sdm signed_distance_map(const LabelVolume& labels, int structure) {
  if (labels.size() == 0) throw GridError("signed_distance_map: empty volume");
  LabelVolume mask(labels.nx(), labels.ny(), labels.nz());
  size_t n_fg = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    mask[i] = (labels[i] == structure) ? 1 : 0;
    n_fg += mask[i];
  }
  const float sentinel = float(labels.nx() + labels.ny() + labels.nz());
  Sdm sdm{VolumeF(labels.nx(), labels.ny(), labels.nz()), structure};
  if (n_fg == 0) {
    std::fill(sdm.volume.data().begin(), sdm.volume.data().end(), sentinel);
    return sdm;
  }
  if (n_fg == mask.size()) {
    std::fill(sdm.volume.data().begin(), sdm.volume.data().end(), -sentinel);
    return sdm;
  }
  std::vector<double> d_to_fg = detail::edt_sq(mask, true);
  std::vector<double> d_to_bg = detail::edt_sq(mask, false);
  for (size_t i = 0; i < mask.size(); ++i)
    sdm.volume[i] = mask[i] ? float(-std::sqrt(d_to_bg[i]))
                            : float(std::sqrt(d_to_fg[i]));
  return sdm;
}

// Per-voxel modal label; ties resolved to background (0).
inline LabelVolume majority_vote(const std::vector<LabelVolume>& maps) {
  if (maps.empty()) throw GridError("majority_vote: no input maps");
  for (const auto& m : maps)
    if (!m.same_dims(maps[0]))
      throw GridError("majority_vote: dimension mismatch");
  LabelVolume out(maps[0].nx(), maps[0].ny(), maps[0].nz());
  std::vector<int> counts;
  for (size_t i = 0; i < out.size(); ++i) {
    int max_label = 0;
    for (const auto& m : maps) max_label = std::max(max_label, int(m[i]));
    counts.assign(size_t(max_label) + 1, 0);
    for (const auto& m : maps) ++counts[m[i]];
    int best = 0, best_count = 0;
    bool tie = false;
    for (int l = 0; l <= max_label; ++l) {
      if (counts[l] > best_count) {
        best = l;
        best_count = counts[l];
        tie = false;
      } else if (counts[l] == best_count) {
        tie = true;
      }
    }
    out[i] = uint8_t(tie ? 0 : best);
  }
  return out;
}

// Monotone quantile mapping of src intensities onto the ref distribution.
inline VolumeF histogram_match(const VolumeF& src, const VolumeF& ref,
                               int n_quantiles = 256) {
  if (src.size() == 0 || ref.size() == 0)
    throw GridError("histogram_match: empty volume");
  if (n_quantiles < 1) throw GridError("histogram_match: n_quantiles < 1");

  std::vector<float> s_sorted(src.data()), r_sorted(ref.data());
  std::sort(s_sorted.begin(), s_sorted.end());
  std::sort(r_sorted.begin(), r_sorted.end());

  // Reference quantile table at fractions q/n_quantiles.
  std::vector<double> ref_q(size_t(n_quantiles) + 1);
  for (int q = 0; q <= n_quantiles; ++q) {
    double pos = double(q) / n_quantiles * double(r_sorted.size() - 1);
    size_t lo = size_t(pos);
    size_t hi = std::min(lo + 1, r_sorted.size() - 1);
    double t = pos - double(lo);
    ref_q[q] = (1.0 - t) * r_sorted[lo] + t * r_sorted[hi];
  }

  VolumeF out(src.nx(), src.ny(), src.nz());
  const double n = double(s_sorted.size());
  for (size_t i = 0; i < src.size(); ++i) {
    float v = src[i];
    // Mid-rank CDF fraction, so constant regions land on the median.
    auto lo = std::lower_bound(s_sorted.begin(), s_sorted.end(), v);
    auto hi = std::upper_bound(lo, s_sorted.end(), v);
    double below = double(lo - s_sorted.begin());
    double equal = double(hi - lo);
    double frac = (below + 0.5 * equal) / n;
    double pos = frac * n_quantiles;
    int q = std::min(int(pos), n_quantiles - 1);
    double t = pos - q;
    out[i] = float((1.0 - t) * ref_q[q] + t * ref_q[q + 1]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic phantom: fixed blob geometry warped by a seed-dependent smooth
// displacement field, with distinct per-structure mean intensities and
// additive Gaussian noise. Stands in for pre-aligned atlas/target images.

struct PhantomOptions {
  int dim = 48;
  int n_structures = 2;
  double noise_sigma = 0.0;
  double deform = 0.0;
};

namespace detail {

// Canonical (unwarped) label at a continuous position: ellipsoidal blobs at
// fixed centers, scaled to the grid.
inline int phantom_label_at(double x, double y, double z, int dim,
                            int n_structures) {
  // Centers/radii in unit-cube coordinates.
  static const double cx[4] = {0.34, 0.66, 0.50, 0.30};
  static const double cy[4] = {0.38, 0.62, 0.70, 0.68};
  static const double cz[4] = {0.50, 0.42, 0.62, 0.30};
  static const double rr[4] = {0.15, 0.13, 0.11, 0.10};
  double u = x / (dim - 1), v = y / (dim - 1), w = z / (dim - 1);
  for (int s = 0; s < std::min(n_structures, 4); ++s) {
    double dx = u - cx[s], dy = v - cy[s], dz = w - cz[s];
    // Mild ellipticity so the blobs are not perfect spheres.
    double q = dx * dx + 1.2 * dy * dy + 0.9 * dz * dz;
    if (q <= rr[s] * rr[s]) return s + 1;
  }
  return 0;
}

inline double phantom_mean_intensity(int label) {
  static const double means[5] = {0.15, 0.55, 0.85, 0.40, 0.70};
  return means[label % 5];
}

}  // namespace detail

// Deterministic for a given seed; deform controls the amplitude (in voxels)
// of a low-frequency random warp shared by intensity and labels.
inline std::pair<VolumeF, LabelVolume> generate_phantom(
    uint32_t seed, const PhantomOptions& opt) {
  if (opt.n_structures < 1)
    throw GridError("generate_phantom: n_structures must be >= 1");
  const int dim = opt.dim;
  std::mt19937 rng(seed);

  // Low-resolution displacement control grid, trilinearly upsampled.
  const int cg = 4;
  std::vector<std::array<double, 3>> ctrl(size_t(cg) * cg * cg);
  std::normal_distribution<double> disp(0.0, 1.0);
  for (auto& c : ctrl)
    for (int a = 0; a < 3; ++a) c[a] = opt.deform * disp(rng);

  auto displacement = [&](double x, double y, double z, int axis) {
    double u = x / (dim - 1) * (cg - 1);
    double v = y / (dim - 1) * (cg - 1);
    double w = z / (dim - 1) * (cg - 1);
    int i0 = std::min(int(u), cg - 2), j0 = std::min(int(v), cg - 2),
        k0 = std::min(int(w), cg - 2);
    double fu = u - i0, fv = v - j0, fw = w - k0;
    double acc = 0.0;
    for (int dk = 0; dk < 2; ++dk)
      for (int dj = 0; dj < 2; ++dj)
        for (int di = 0; di < 2; ++di) {
          double wgt = (di ? fu : 1 - fu) * (dj ? fv : 1 - fv) *
                       (dk ? fw : 1 - fw);
          acc += wgt *
                 ctrl[size_t(k0 + dk) * cg * cg + size_t(j0 + dj) * cg +
                      size_t(i0 + di)][axis];
        }
    return acc;
  };

  VolumeF intensity(dim, dim, dim);
  LabelVolume labels(dim, dim, dim);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int z = 0; z < dim; ++z)
    for (int y = 0; y < dim; ++y)
      for (int x = 0; x < dim; ++x) {
        double sx = x + displacement(x, y, z, 0);
        double sy = y + displacement(x, y, z, 1);
        double sz = z + displacement(x, y, z, 2);
        int l = detail::phantom_label_at(sx, sy, sz, dim, opt.n_structures);
        labels.at(x, y, z) = uint8_t(l);
        double val = detail::phantom_mean_intensity(l);
        if (opt.noise_sigma > 0.0) val += opt.noise_sigma * noise(rng);
        intensity.at(x, y, z) = float(val);
      }
  return {std::move(intensity), std::move(labels)};
}

}  // namespace fslf

#endif  // FSLF_VOLUME_OPS_HPP
