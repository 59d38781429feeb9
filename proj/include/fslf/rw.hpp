#ifndef FSLF_RW_HPP
#define FSLF_RW_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/IterativeLinearSolvers>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslf/grid.hpp"
#include "fslf/volume_ops.hpp"

namespace fslf {

struct RwError : std::runtime_error {
  explicit RwError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateSeedingError : RwError {
  explicit DegenerateSeedingError(const std::string& msg) : RwError(msg) {}
};

// SDM band classification: inner shell = foreground seeds, outer shell =
// background seeds, the uncertainty band in between = candidate nodes.
struct NodeSelection {
  std::vector<uint32_t> fg_seeds;
  std::vector<uint32_t> bg_seeds;
  std::vector<uint32_t> candidates;
  double d_threshold = 2.0;
  double epsilon = 1.0;
};

inline NodeSelection select_nodes(const Sdm& sdm, double d_threshold = 2.0,
                                  double epsilon = 1.0) {
  if (d_threshold <= 0.0 || epsilon <= 0.0)
    throw RwError("select_nodes: d_threshold and epsilon must be positive");
  NodeSelection sel;
  sel.d_threshold = d_threshold;
  sel.epsilon = epsilon;
  const VolumeF& d = sdm.volume;
  for (size_t i = 0; i < d.size(); ++i) {
    double v = d[i];
    if (v > -d_threshold && v < d_threshold)
      sel.candidates.push_back(uint32_t(i));
    else if (v >= -(d_threshold + epsilon) && v <= -d_threshold)
      sel.fg_seeds.push_back(uint32_t(i));
    else if (v >= d_threshold && v <= d_threshold + epsilon)
      sel.bg_seeds.push_back(uint32_t(i));
  }
  if (sel.fg_seeds.empty() || sel.bg_seeds.empty())
    throw DegenerateSeedingError(
        "select_nodes: structure too thin for seed bands");
  return sel;
}

inline double lattice_weight(double intensity_i, double intensity_j,
                             double delta) {
  if (delta < 0.0) throw RwError("lattice_weight: delta must be >= 0");
  double d = intensity_i - intensity_j;
  return std::exp(-delta * d * d);
}

// FSLP class errors to terminal weights; both 0.5 when the errors vanish.
inline std::pair<double, double> terminal_weights(double e_fg, double e_bg) {
  if (e_fg < 0.0 || e_bg < 0.0)
    throw RwError("terminal_weights: errors must be non-negative");
  double sum = e_fg + e_bg;
  if (sum == 0.0) return {0.5, 0.5};
  return {e_bg / sum, e_fg / sum};
}

// Reduced fusion graph over candidate voxels only. Lattice edges join
// 6-neighbour candidate pairs; candidate-seed and out-of-band adjacencies
// enter as Dirichlet boundary terms; FSLP terminal weights connect each
// candidate to the virtual foreground/background terminals.
struct FusionGraph {
  int nx = 0, ny = 0, nz = 0;
  std::vector<uint32_t> candidates;           // voxel index per graph node
  std::vector<int32_t> node_of_voxel;         // -1 if not a candidate
  struct Edge {
    int32_t i, j;
    double w;
  };
  std::vector<Edge> lattice;                  // candidate-candidate edges
  struct BoundaryTerm {
    int32_t i;
    double value;  // fixed x of the neighbour (1 fg, 0 bg)
    double w;
  };
  std::vector<BoundaryTerm> boundary;
  std::vector<double> w_fg, w_bg;             // terminal weights per node
};

inline FusionGraph build_graph(const NodeSelection& sel,
                               const VolumeF& target_intensity,
                               const LabelVolume& current_labels,
                               const std::vector<double>& term_fg,
                               const std::vector<double>& term_bg,
                               double delta = 5.0) {
  size_t n = sel.candidates.size();
  if (term_fg.size() != n || term_bg.size() != n)
    throw RwError("build_graph: terminal weight count mismatch");
  FusionGraph g;
  g.nx = target_intensity.nx();
  g.ny = target_intensity.ny();
  g.nz = target_intensity.nz();
  g.candidates = sel.candidates;
  g.node_of_voxel.assign(target_intensity.size(), -1);
  for (size_t i = 0; i < n; ++i) g.node_of_voxel[sel.candidates[i]] = int32_t(i);
  g.w_fg = term_fg;
  g.w_bg = term_bg;

  std::vector<int8_t> band(target_intensity.size(), 0);  // 1 fg seed, 2 bg seed
  for (uint32_t v : sel.fg_seeds) band[v] = 1;
  for (uint32_t v : sel.bg_seeds) band[v] = 2;

  static const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (size_t i = 0; i < n; ++i) {
    int x, y, z;
    target_intensity.coords(sel.candidates[i], x, y, z);
    double ii = target_intensity[sel.candidates[i]];
    for (const auto& o : off) {
      int nxp = x + o[0], nyp = y + o[1], nzp = z + o[2];
      if (!target_intensity.inside(nxp, nyp, nzp)) continue;
      size_t nidx = target_intensity.index(nxp, nyp, nzp);
      double w = lattice_weight(ii, target_intensity[nidx], delta);
      int32_t nj = g.node_of_voxel[nidx];
      if (nj >= 0) {
        if (nj > int32_t(i)) g.lattice.push_back({int32_t(i), nj, w});
      } else if (band[nidx] == 1) {
        g.boundary.push_back({int32_t(i), 1.0, w});
      } else if (band[nidx] == 2) {
        g.boundary.push_back({int32_t(i), 0.0, w});
      } else {
        // Out-of-band neighbour: clamp to its current label.
        double val = current_labels[nidx] ? 1.0 : 0.0;
        g.boundary.push_back({int32_t(i), val, w});
      }
    }
  }
  return g;
}

// Stationarity system of the p=q=2 energy: all edge and terminal weights
// enter squared. Direct sparse Cholesky, conjugate gradients past 1e5 nodes.
inline std::vector<double> solve_random_walker(const FusionGraph& g) {
  int n = int(g.candidates.size());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(g.lattice.size() * 2 + n);
  for (const auto& e : g.lattice) {
    double w2 = e.w * e.w;
    diag[e.i] += w2;
    diag[e.j] += w2;
    trips.emplace_back(e.i, e.j, -w2);
    trips.emplace_back(e.j, e.i, -w2);
  }
  for (const auto& b : g.boundary) {
    double w2 = b.w * b.w;
    diag[b.i] += w2;
    rhs[b.i] += w2 * b.value;
  }
  for (int i = 0; i < n; ++i) {
    double wf2 = g.w_fg[i] * g.w_fg[i];
    double wb2 = g.w_bg[i] * g.w_bg[i];
    diag[i] += wf2 + wb2;
    rhs[i] += wf2;
    if (diag[i] <= 0.0)
      throw RwError("solve_random_walker: isolated zero-weight node at voxel " +
                    std::to_string(g.candidates[size_t(i)]));
    trips.emplace_back(i, i, diag[i]);
  }

  Eigen::SparseMatrix<double> L(n, n);
  L.setFromTriplets(trips.begin(), trips.end());
  Eigen::VectorXd x;
  if (n > 100000) {
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>,
                             Eigen::Lower | Eigen::Upper>
        cg;
    cg.setTolerance(1e-8);
    cg.compute(L);
    x = cg.solve(rhs);
    if (cg.info() != Eigen::Success)
      throw RwError("solve_random_walker: conjugate gradient failed");
  } else {
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> chol(L);
    if (chol.info() != Eigen::Success)
      throw RwError("solve_random_walker: singular system");
    x = chol.solve(rhs);
  }
  return std::vector<double>(x.data(), x.data() + n);
}

// Energy of Eq-form p=q=2 for a given assignment on candidates (boundary
// values fixed). Used to confirm the solve lowers the initial labeling.
inline double rw_energy(const FusionGraph& g, const std::vector<double>& x) {
  double e = 0.0;
  for (const auto& ed : g.lattice) {
    double d = x[ed.i] - x[ed.j];
    e += ed.w * ed.w * d * d;
  }
  for (const auto& b : g.boundary) {
    double d = x[b.i] - b.value;
    e += b.w * b.w * d * d;
  }
  for (size_t i = 0; i < x.size(); ++i) {
    e += g.w_fg[i] * g.w_fg[i] * (x[i] - 1.0) * (x[i] - 1.0);
    e += g.w_bg[i] * g.w_bg[i] * x[i] * x[i];
  }
  return e;
}

// Candidates flip to foreground iff x >= 0.5; everything else keeps its
// current label.
inline LabelVolume update_labels(const std::vector<double>& x,
                                 const FusionGraph& g,
                                 const LabelVolume& current) {
  if (x.size() != g.candidates.size())
    throw RwError("update_labels: solution size mismatch");
  LabelVolume out = current;
  for (size_t i = 0; i < x.size(); ++i)
    out[g.candidates[i]] = x[i] >= 0.5 ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Multi-class combination of per-structure probability volumes.

struct ProbabilityStack {
  std::vector<VolumeF> structure_probs;  // p_ij for structures 1..K
};

// Per voxel: softmax over (p_0, p_1, ..., p_K) with p_0 = 1 - max_j p_j,
// label = argmax. Softmax preserves the argmax, ties go to the lowest id.
inline LabelVolume multiclass_combine(const ProbabilityStack& stack) {
  if (stack.structure_probs.empty())
    throw RwError("multiclass_combine: empty stack");
  const VolumeF& first = stack.structure_probs[0];
  for (const auto& p : stack.structure_probs)
    if (!p.same_dims(first))
      throw RwError("multiclass_combine: dimension mismatch");
  LabelVolume out(first.nx(), first.ny(), first.nz());
  size_t k = stack.structure_probs.size();
  for (size_t i = 0; i < first.size(); ++i) {
    double pmax = 0.0;
    for (size_t j = 0; j < k; ++j)
      pmax = std::max(pmax, double(stack.structure_probs[j][i]));
    double best = 1.0 - pmax;  // background
    int best_label = 0;
    for (size_t j = 0; j < k; ++j) {
      double pj = stack.structure_probs[j][i];
      if (pj > best) {
        best = pj;
        best_label = int(j) + 1;
      }
    }
    out[i] = uint8_t(best_label);
  }
  return out;
}

}  // namespace fslf

#endif  // FSLF_RW_HPP
