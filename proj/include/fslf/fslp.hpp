#ifndef FSLF_FSLP_HPP
#define FSLF_FSLP_HPP

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace fslf {

struct FslpError : std::runtime_error {
  explicit FslpError(const std::string& msg) : std::runtime_error(msg) {}
};

// Reconstruction of a target feature vector from candidate atlas features,
// with simplex-constrained per-segment coefficients alpha weighting the
// intensity / gradient / signature blocks.
struct FslpProblem {
  Eigen::VectorXd y;                   // target feature, rows = sum(segments)
  Eigen::MatrixXd A;                   // candidate features as columns
  std::vector<int> labels;             // 0/1 per column
  std::array<int, 3> segment_lengths;  // (n_1, n_2, n_3)
  double lambda = 1e-3;

  void validate() const {
    if (A.cols() < 1) throw FslpError("FslpProblem: no candidate columns");
    if (labels.size() != size_t(A.cols()))
      throw FslpError("FslpProblem: label count != column count");
    long total = 0;
    for (int n : segment_lengths) total += n;
    if (total != y.size() || y.size() != A.rows())
      throw FslpError("FslpProblem: segment lengths inconsistent with rows");
  }
};

struct FslpSolution {
  Eigen::Vector3d alpha;
  Eigen::VectorXd beta;
  Eigen::VectorXd residual;  // y - A*beta
  double e_fg = 0.0, e_bg = 0.0;
  std::vector<double> objective_trace;
};

namespace fslp_detail {

inline void check_simplex(const Eigen::Vector3d& alpha) {
  double sum = alpha.sum();
  if (std::abs(sum - 1.0) > 1e-9 || alpha.minCoeff() < -1e-9)
    throw FslpError("alpha violates the probability simplex");
}

}  // namespace fslp_detail

// Diagonal action of the feature sensitive matrix: entry i in segment j is
// scaled by alpha_j / sqrt(n_j).
inline Eigen::VectorXd apply_weight(const Eigen::Vector3d& alpha,
                                    const std::array<int, 3>& segment_lengths,
                                    const Eigen::VectorXd& v) {
  fslp_detail::check_simplex(alpha);
  long total = 0;
  for (int n : segment_lengths) total += n;
  if (v.size() != total)
    throw FslpError("apply_weight: vector/segment length mismatch");
  Eigen::VectorXd out(v.size());
  long row = 0;
  for (int j = 0; j < 3; ++j) {
    double s = alpha[j] / std::sqrt(double(segment_lengths[j]));
    out.segment(row, segment_lengths[j]) =
        s * v.segment(row, segment_lengths[j]);
    row += segment_lengths[j];
  }
  return out;
}

// Objective of the joint problem: 0.5*|W_a(y-A*beta)|^2 + lambda*|alpha|^2.
inline double fslp_objective(const FslpProblem& p, const Eigen::Vector3d& alpha,
                             const Eigen::VectorXd& beta) {
  Eigen::VectorXd f = p.y - p.A * beta;
  Eigen::VectorXd wf = apply_weight(alpha, p.segment_lengths, f);
  return 0.5 * wf.squaredNorm() + p.lambda * alpha.squaredNorm();
}

// Least squares in beta with alpha fixed: min |W_a(y - A*beta)|^2, solved by
// orthogonal factorization of the row-scaled system; rank deficiency gets
// the minimum-norm solution.
inline Eigen::VectorXd solve_beta(const FslpProblem& p,
                                  const Eigen::Vector3d& alpha) {
  p.validate();
  fslp_detail::check_simplex(alpha);
  Eigen::MatrixXd As(p.A.rows(), p.A.cols());
  Eigen::VectorXd ys(p.y.size());
  long row = 0;
  for (int j = 0; j < 3; ++j) {
    double s = alpha[j] / std::sqrt(double(p.segment_lengths[j]));
    As.middleRows(row, p.segment_lengths[j]) =
        s * p.A.middleRows(row, p.segment_lengths[j]);
    ys.segment(row, p.segment_lengths[j]) =
        s * p.y.segment(row, p.segment_lengths[j]);
    row += p.segment_lengths[j];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(As);
  return cod.solve(ys);
}

// Quadratic program in alpha with beta fixed. The diagonal matrix
// Lambda_jj = sum_k f_jk^2 / n_j + lambda makes the simplex-constrained
// minimizer closed form: alpha_j proportional to 1 / Lambda_jj.
inline Eigen::Vector3d solve_alpha(const FslpProblem& p,
                                   const Eigen::VectorXd& beta) {
  p.validate();
  Eigen::VectorXd f = p.y - p.A * beta;
  Eigen::Vector3d lam_diag;
  long row = 0;
  for (int j = 0; j < 3; ++j) {
    lam_diag[j] = f.segment(row, p.segment_lengths[j]).squaredNorm() /
                      double(p.segment_lengths[j]) +
                  p.lambda;
    row += p.segment_lengths[j];
  }
  if (lam_diag.minCoeff() <= 0.0)
    throw FslpError("solve_alpha: non-positive Lambda diagonal");
  Eigen::Vector3d inv = lam_diag.cwiseInverse();
  return inv / inv.sum();
}

// Closed-form minimizer of 0.5*a^T diag(d) a over the simplex (for tests and
// direct QP use with an arbitrary positive diagonal).
inline Eigen::Vector3d simplex_qp_diag(const Eigen::Vector3d& diag) {
  if (diag.minCoeff() <= 0.0)
    throw FslpError("simplex_qp_diag: non-positive diagonal");
  Eigen::Vector3d inv = diag.cwiseInverse();
  return inv / inv.sum();
}

struct AlternateOptions {
  int max_iters = 10;
  double tol = 1e-4;
  bool adaptive_lambda = false;
};

// lambda = mean of per-segment mean-square residuals, floored at 1e-8.
inline double adaptive_lambda(const Eigen::VectorXd& f,
                              const std::array<int, 3>& segment_lengths) {
  long total = 0;
  for (int n : segment_lengths) total += n;
  if (f.size() != total)
    throw FslpError("adaptive_lambda: residual/segment length mismatch");
  double acc = 0.0;
  long row = 0;
  for (int j = 0; j < 3; ++j) {
    acc += f.segment(row, segment_lengths[j]).squaredNorm() /
           double(segment_lengths[j]);
    row += segment_lengths[j];
  }
  return std::max(acc / 3.0, 1e-8);
}

// Alternating solver: beta step (least squares) then alpha step (diagonal
// QP), from uniform alpha. An alpha update that fails to lower the joint
// objective is rejected, which keeps the recorded trace non-increasing and
// terminates the loop.
inline FslpSolution alternate(FslpProblem p,
                              const AlternateOptions& opt = {}) {
  p.validate();
  if (opt.max_iters < 1) throw FslpError("alternate: max_iters must be >= 1");
  const int m = int(p.A.cols());

  // The scaled normal matrix is a per-segment Gram combination, so the Gram
  // blocks are computed once and each beta step reduces to an m-by-m solve.
  // A trace-scaled ridge keeps duplicated columns harmless; the step is
  // guarded below so numerical slack can never raise the objective.
  std::array<Eigen::MatrixXd, 3> gram;
  std::array<Eigen::VectorXd, 3> gy;
  long row = 0;
  for (int j = 0; j < 3; ++j) {
    auto Aj = p.A.middleRows(row, p.segment_lengths[j]);
    gram[j].noalias() = Aj.transpose() * Aj;
    gy[j].noalias() =
        Aj.transpose() * p.y.segment(row, p.segment_lengths[j]);
    row += p.segment_lengths[j];
  }
  auto beta_step = [&](const Eigen::Vector3d& a) {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(m, m);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(m);
    for (int j = 0; j < 3; ++j) {
      double s2 = a[j] * a[j] / double(p.segment_lengths[j]);
      M.noalias() += s2 * gram[j];
      b.noalias() += s2 * gy[j];
    }
    double ridge = 1e-12 * (M.trace() / double(m) + 1.0);
    M.diagonal().array() += ridge;
    return Eigen::VectorXd(M.ldlt().solve(b));
  };

  FslpSolution sol;
  sol.alpha = Eigen::Vector3d::Constant(1.0 / 3.0);
  for (int it = 0; it < opt.max_iters; ++it) {
    Eigen::VectorXd beta_new = beta_step(sol.alpha);
    if (it == 0 || fslp_objective(p, sol.alpha, beta_new) <=
                       fslp_objective(p, sol.alpha, sol.beta))
      sol.beta = std::move(beta_new);
    if (opt.adaptive_lambda)
      p.lambda = adaptive_lambda(p.y - p.A * sol.beta, p.segment_lengths);
    double before = fslp_objective(p, sol.alpha, sol.beta);
    Eigen::Vector3d alpha_new = solve_alpha(p, sol.beta);
    double after = fslp_objective(p, alpha_new, sol.beta);
    if (after > before) {
      // Eq-form Lambda is not the exact block minimizer of the joint
      // objective; keep the previous alpha when the step would ascend.
      sol.objective_trace.push_back(before);
      break;
    }
    sol.objective_trace.push_back(after);
    double delta = (alpha_new - sol.alpha).cwiseAbs().maxCoeff();
    sol.alpha = alpha_new;
    if (delta < opt.tol) break;
  }
  sol.residual = p.y - p.A * sol.beta;
  return sol;
}

// Grouped reconstruction errors: beta masked to one class, the other class
// columns zeroed, error measured through the current feature weights.
inline void reconstruction_errors(const FslpProblem& p, FslpSolution& sol) {
  Eigen::VectorXd beta_fg = sol.beta, beta_bg = sol.beta;
  for (long c = 0; c < p.A.cols(); ++c) {
    if (p.labels[size_t(c)] == 1)
      beta_bg[c] = 0.0;
    else
      beta_fg[c] = 0.0;
  }
  auto grouped = [&](const Eigen::VectorXd& b) {
    Eigen::VectorXd f = p.y - p.A * b;
    return apply_weight(sol.alpha, p.segment_lengths, f).squaredNorm();
  };
  sol.e_fg = grouped(beta_fg);
  sol.e_bg = grouped(beta_bg);
}

// ---------------------------------------------------------------------------
// Non-convexity probe for the scalar-segment special case: Hessian of
// E = eta^2 f*^2 + lambda eta^2 in (eta, f*), with closed-form eigenvalues.

struct NonConvexityProbe {
  double f_star = 0.0, eta = 0.0, lambda = 0.0;
  Eigen::Matrix2d hessian;
  std::array<double, 2> eigenvalues;  // descending
  bool has_negative = false;
};

inline NonConvexityProbe nonconvexity_probe(double f_star, double eta,
                                            double lambda) {
  if (eta * eta < 0.0 || eta * eta > 1.0 + 1e-12)
    throw FslpError("nonconvexity_probe: eta^2 must lie in [0, 1]");
  NonConvexityProbe pr;
  pr.f_star = f_star;
  pr.eta = eta;
  pr.lambda = lambda;
  pr.hessian << 2.0 * f_star * f_star + 2.0 * lambda, 4.0 * f_star * eta,
      4.0 * f_star * eta, 2.0 * eta * eta;
  double s = f_star * f_star + eta * eta + lambda;
  double disc = s * s - (4.0 * lambda * eta * eta -
                         12.0 * f_star * f_star * eta * eta);
  double root = std::sqrt(std::max(disc, 0.0));
  pr.eigenvalues = {s + root, s - root};
  pr.has_negative = pr.eigenvalues[1] < 0.0;
  return pr;
}

}  // namespace fslf

#endif  // FSLF_FSLP_HPP
