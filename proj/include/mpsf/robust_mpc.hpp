#pragma once

/**
 * @file
 * @brief Constraint tightening, terminal ellipsoids and assembly of the robust
 * receding-horizon program.
 */

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "controllers.hpp"
#include "dynamics.hpp"
#include "sqp.hpp"

namespace mpsf {

using opt::kInf;

/// lo <= cx x + cu u <= hi.
struct LinearRow
{
  Eigen::RowVectorXd cx;
  Eigen::RowVectorXd cu;
  double lo = -kInf;
  double hi = kInf;

  bool has_input() const { return cu.size() > 0 && cu.lpNorm<Eigen::Infinity>() > 0; }
  bool has_state() const { return cx.size() > 0 && cx.lpNorm<Eigen::Infinity>() > 0; }
};

/**
 * @brief Axis-aligned state and input boxes, plus optional rows coupling both.
 *
 * Infinite bounds are allowed and produce no constraint.
 */
struct ConstraintBoxes
{
  VectorXd x_lb, x_ub;
  VectorXd u_lb, u_ub;
  std::vector<LinearRow> mixed;

  void validate() const
  {
    if (x_lb.size() != x_ub.size() || u_lb.size() != u_ub.size()) { throw std::invalid_argument("constraint box sizes differ"); }
    for (Eigen::Index i = 0; i < x_lb.size(); ++i) {
      if (!(x_lb(i) < x_ub(i))) { throw std::invalid_argument("state box requires lb < ub"); }
    }
    for (Eigen::Index i = 0; i < u_lb.size(); ++i) {
      if (!(u_lb(i) < u_ub(i))) { throw std::invalid_argument("input box requires lb < ub"); }
    }
    for (const auto & r : mixed) {
      if (r.cx.size() != x_lb.size() || r.cu.size() != u_lb.size() || !(r.lo < r.hi)) {
        throw std::invalid_argument("malformed mixed constraint row");
      }
    }
  }

  long n() const { return x_lb.size(); }
  long m() const { return u_lb.size(); }

  /// Every finite bound as a row; state rows first, then inputs, then mixed rows.
  std::vector<LinearRow> rows() const
  {
    std::vector<LinearRow> out;
    const auto nx = n(), nu = m();
    for (Eigen::Index i = 0; i < nx; ++i) {
      if (!std::isfinite(x_lb(i)) && !std::isfinite(x_ub(i))) { continue; }
      LinearRow r{Eigen::RowVectorXd::Zero(nx), Eigen::RowVectorXd::Zero(nu), x_lb(i), x_ub(i)};
      r.cx(i) = 1.0;
      out.push_back(r);
    }
    for (Eigen::Index i = 0; i < nu; ++i) {
      if (!std::isfinite(u_lb(i)) && !std::isfinite(u_ub(i))) { continue; }
      LinearRow r{Eigen::RowVectorXd::Zero(nx), Eigen::RowVectorXd::Zero(nu), u_lb(i), u_ub(i)};
      r.cu(i) = 1.0;
      out.push_back(r);
    }
    out.insert(out.end(), mixed.begin(), mixed.end());
    return out;
  }

  bool contains_state(const VectorXd & x, double tol = 0.0) const
  {
    return ((x - x_ub).array() <= tol).all() && ((x_lb - x).array() <= tol).all();
  }

  bool admits_input(const VectorXd & x, const VectorXd & u, double tol = 0.0) const
  {
    if (((u - u_ub).array() > tol).any() || ((u_lb - u).array() > tol).any()) { return false; }
    for (const auto & r : mixed) {
      const double val = r.cx.dot(x) + r.cu.dot(u);
      if (val < r.lo - tol || val > r.hi + tol) { return false; }
    }
    return true;
  }
};

/**
 * @brief Stage-wise tightening schedule for the error e = x - x_nominal under u = v - K x.
 *
 * The error obeys e+ = Phi e + w with Phi = A - BK. |Phi^j|_2 <= kappa rho^j, where
 * rho is a weighted-norm contraction factor and kappa the condition number of the
 * weight's square root.
 */
struct TubeSchedule
{
  double rho   = 0.0;
  double kappa = 1.0;
  double w_max = 0.0;
  MatrixXd K;
  VectorXd margins;        ///< H+1 entries, margins[0] = 0
  VectorXd input_margins;  ///< H entries, |K| margins[i]
  std::vector<MatrixXd> powers;  ///< Phi^0 .. Phi^H

  int horizon() const { return static_cast<int>(margins.size()) - 1; }
};

/// kappa w_max sum_{j<i} rho^j for i = 0..H.
inline VectorXd geometric_margins(double w_max, double rho, int H, double kappa = 1.0)
{
  VectorXd out(H + 1);
  out(0)      = 0.0;
  double term = kappa * w_max;
  for (int i = 1; i <= H; ++i) {
    out(i) = out(i - 1) + term;
    term *= rho;
  }
  return out;
}

namespace detail {

/// Solves A' W A - W + Q = 0.
inline MatrixXd dlyap(const MatrixXd & A, const MatrixXd & Q)
{
  const auto n = A.rows();
  MatrixXd lhs = MatrixXd::Identity(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      // vec(A' W A) = kron(A', A') vec(W)
      lhs.block(i * n, j * n, n, n) -= A(j, i) * A.transpose();
    }
  }
  const VectorXd w = lhs.partialPivLu().solve(Eigen::Map<const VectorXd>(Q.data(), n * n));
  MatrixXd W       = Eigen::Map<const MatrixXd>(w.data(), n, n);
  return 0.5 * (W + W.transpose());
}

/// |Phi|_W = |W^{1/2} Phi W^{-1/2}|_2.
inline double weighted_norm(const MatrixXd & Phi, const MatrixXd & W)
{
  Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> ges(Phi.transpose() * W * Phi, W, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, ges.eigenvalues().maxCoeff()));
}

inline MatrixXd sqrt_psd(const MatrixXd & M)
{
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (M + M.transpose()));
  return es.operatorSqrt();
}

}  // namespace detail

/**
 * @brief Cost matrix of a given stabilizing gain: P solves Phi' P Phi - P + Q + K'RK = 0
 * with Phi = A - BK.
 *
 * @throws std::runtime_error if A - BK is not Schur stable.
 */
inline LqrGain fixed_gain(const MatrixXd & A, const MatrixXd & B, const MatrixXd & K, const MatrixXd & Q, const MatrixXd & R)
{
  if (K.rows() != B.cols() || K.cols() != A.rows()) { throw std::invalid_argument("fixed_gain: gain has wrong shape"); }
  const MatrixXd Phi = A - B * K;
  if (!(spectral_radius(Phi) < 1.0)) { throw std::runtime_error("fixed_gain: closed loop is not stable"); }
  return {K, detail::dlyap(Phi, Q + K.transpose() * R * K)};
}

/**
 * @brief Tube for the closed loop A - B K, with (A, B) the model Jacobians at (x_eq, u_eq).
 *
 * rho minimizes |A - BK|_W over the identity and the Lyapunov weights
 * W_s = dlyap((A - BK)/s, I) for s on a grid above the spectral radius.
 *
 * @throws std::runtime_error "not incrementally stabilizable with given gain" if rho >= 1.
 */
inline TubeSchedule compute_tube(
  const NominalModel & model,
  UncertaintyBound bound,
  const MatrixXd & K,
  int H,
  const std::optional<VectorXd> & x_eq = std::nullopt,
  const std::optional<VectorXd> & u_eq = std::nullopt)
{
  if (H < 1) { throw std::invalid_argument("horizon must be positive"); }
  const int n = model.state_dim(), m = model.input_dim();
  if (K.rows() != m || K.cols() != n) { throw std::invalid_argument("compute_tube: gain has wrong shape"); }
  const Jacobians J   = model.jacobians(x_eq.value_or(VectorXd::Zero(n)), u_eq.value_or(VectorXd::Zero(m)));
  const MatrixXd Phi  = J.A - J.B * K;
  const double radius = spectral_radius(Phi);
  const MatrixXd I    = MatrixXd::Identity(n, n);

  TubeSchedule t;
  t.K     = K;
  t.w_max = bound.w_max;
  t.rho   = Phi.operatorNorm();
  t.kappa = 1.0;
  if (radius < 1.0) {
    constexpr int grid = 60;
    for (int i = 1; i < grid; ++i) {
      const double s   = radius + (1.0 - radius) * static_cast<double>(i) / grid;
      const MatrixXd W = detail::dlyap(Phi / s, I);
      const double r   = detail::weighted_norm(Phi, W);
      if (r < t.rho) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(W, Eigen::EigenvaluesOnly);
        t.rho   = r;
        t.kappa = std::sqrt(es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff());
      }
    }
  }
  if (!(t.rho < 1.0)) { throw std::runtime_error("not incrementally stabilizable with given gain"); }

  t.margins       = geometric_margins(bound.w_max, t.rho, H, t.kappa);
  t.input_margins = K.operatorNorm() * t.margins.head(H);
  t.powers.reserve(static_cast<std::size_t>(H + 1));
  t.powers.push_back(I);
  for (int j = 1; j <= H; ++j) { t.powers.push_back(Phi * t.powers.back()); }
  return t;
}

enum class Tightening {
  Ball,     ///< |c - d K| times the error-ball radius
  Support,  ///< w_max sum_{j<i} |(c - d K) Phi^j|, exact for the Euclidean disturbance ball
};

/// Amount by which the row is tightened at the given stage.
inline double row_margin(const LinearRow & row, const TubeSchedule & tube, int stage, Tightening mode)
{
  if (stage == 0 || tube.w_max == 0.0) { return 0.0; }
  Eigen::RowVectorXd c = row.cx;
  if (row.cu.size() > 0) { c -= row.cu * tube.K; }
  if (mode == Tightening::Ball) { return c.norm() * tube.margins(stage); }
  double sum = 0.0;
  for (int j = 0; j < stage; ++j) { sum += (c * tube.powers[static_cast<std::size_t>(j)]).norm(); }
  return tube.w_max * sum;
}

enum class TerminalMode {
  Conservative,  ///< w_max |P^{1/2}| disturbance term
  Robust,        ///< w_max |P^{1/2} Phi^H|, the disturbance reaching the last stage
  Nominal,       ///< invariance of the undisturbed closed loop only
};

struct TerminalOptions
{
  TerminalMode mode   = TerminalMode::Conservative;
  Tightening tightening = Tightening::Ball;
  /// Steady states x_s = Gx theta, u_s = Gu theta; empty for a set fixed at the origin.
  MatrixXd Gx;
  MatrixXd Gu;
  /// Fraction of the largest fitting level to use; below 1 leaves theta room to move.
  double level_fraction   = 1.0;
  int monte_carlo_samples = 10000;
  std::uint64_t seed      = 1;
};

/**
 * @brief Ellipsoid {x : (x - Gx theta)' P (x - Gx theta) <= alpha} with controller
 * u = Gu theta - K (x - Gx theta).
 */
struct TerminalSet
{
  MatrixXd P;
  double alpha = 0.0;
  MatrixXd K;
  MatrixXd Gx;
  MatrixXd Gu;
  double rho_P  = 0.0;
  double w_term = 0.0;
  std::vector<opt::ParameterRow> theta_rows;

  int theta_dim() const { return static_cast<int>(Gx.cols()); }
  bool contains(const VectorXd & x, const VectorXd & theta, double tol = 0.0) const
  {
    const VectorXd e = theta.size() > 0 ? VectorXd(x - Gx * theta) : x;
    return e.dot(P * e) <= alpha + tol;
  }
  VectorXd control(const VectorXd & x, const VectorXd & theta) const
  {
    if (theta.size() == 0) { return -K * x; }
    return Gu * theta - K * (x - Gx * theta);
  }
};

/**
 * @brief Largest terminal level that fits the stage-H tightened constraints.
 *
 * The fit uses the closed-form support sqrt(alpha c P^{-1} c') of each row at
 * theta = 0. Nonlinear models additionally pass a Monte-Carlo invariance check of the
 * closed loop; alpha is bisected down until it passes.
 *
 * @throws std::runtime_error "terminal set empty" if no positive level exists.
 */
inline TerminalSet compute_terminal_set(
  const NominalModel & model, const ConstraintBoxes & boxes, const TubeSchedule & tube, const LqrGain & gain, const TerminalOptions & options = {})
{
  boxes.validate();
  const int n = model.state_dim(), m = model.input_dim();
  const int H = tube.horizon();
  TerminalSet ts;
  ts.P  = 0.5 * (gain.P + gain.P.transpose());
  ts.K  = gain.K;
  ts.Gx = options.Gx.size() > 0 ? options.Gx : MatrixXd(n, 0);
  ts.Gu = options.Gu.size() > 0 ? options.Gu : MatrixXd(m, ts.Gx.cols());

  const Jacobians J     = model.jacobians(VectorXd::Zero(n), VectorXd::Zero(m));
  const MatrixXd Phi    = J.A - J.B * ts.K;
  const MatrixXd Phalf  = detail::sqrt_psd(ts.P);
  const MatrixXd Pinv   = ts.P.inverse();
  ts.rho_P              = (Phalf * Phi * Phalf.inverse()).operatorNorm();
  switch (options.mode) {
  case TerminalMode::Conservative: ts.w_term = tube.w_max * Phalf.operatorNorm(); break;
  case TerminalMode::Robust: {
    MatrixXd PhiH = MatrixXd::Identity(n, n);
    for (int j = 0; j < H; ++j) { PhiH = Phi * PhiH; }
    ts.w_term = tube.w_max * (Phalf * PhiH).operatorNorm();
    break;
  }
  case TerminalMode::Nominal: ts.w_term = 0.0; break;
  }

  struct FitRow
  {
    Eigen::RowVectorXd g;
    double width;  ///< |c_eff P^{-1/2}|
    double lo, hi;
  };
  std::vector<FitRow> fit;
  double alpha_max = kInf;
  for (const auto & row : boxes.rows()) {
    const Eigen::RowVectorXd c = row.cx - row.cu * ts.K;
    const double width         = std::sqrt(std::max(0.0, c.dot(Pinv * c.transpose())));
    const double margin        = row_margin(row, tube, H, options.tightening);
    const double lo = row.lo + margin, hi = row.hi - margin;
    const double room = std::min(hi, -lo);
    if (!(room > 0)) { throw std::runtime_error("terminal set empty"); }
    if (width > 0) { alpha_max = std::min(alpha_max, (room / width) * (room / width)); }
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(ts.Gx.cols());
    if (g.size() > 0) { g = row.cx * ts.Gx + row.cu * ts.Gu; }
    fit.push_back({g, width, lo, hi});
  }
  if (!std::isfinite(alpha_max)) { throw std::runtime_error("terminal set unbounded: no constraint limits the ellipsoid"); }
  if (!(options.level_fraction > 0 && options.level_fraction <= 1)) { throw std::invalid_argument("level_fraction must lie in (0, 1]"); }
  alpha_max *= options.level_fraction;

  auto invariant = [&](double alpha) {
    if (model.is_linear() || options.monte_carlo_samples <= 0) { return true; }
    const Eigen::LLT<MatrixXd> llt(ts.P);
    const MatrixXd Linv = llt.matrixU().solve(MatrixXd::Identity(n, n));  // x = Linv y maps |y| = 1 onto x'Px = 1
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> uni;
    const double r = std::sqrt(alpha);
    for (int s = 0; s < options.monte_carlo_samples; ++s) {
      VectorXd y(n);
      for (int i = 0; i < n; ++i) { y(i) = normal(rng); }
      const double scale = s % 2 == 0 ? 1.0 : std::pow(uni(rng), 1.0 / n);
      const VectorXd x   = Linv * (r * scale * y.normalized());
      const VectorXd u   = -ts.K * x;
      const VectorXd xn  = model.step(x, u);
      if (std::sqrt(std::max(0.0, xn.dot(ts.P * xn))) + ts.w_term > r) { return false; }
    }
    return true;
  };

  double alpha = alpha_max;
  if (!invariant(alpha)) {
    double lo = 0.0, hi = alpha_max;
    for (int it = 0; it < 60 && hi - lo > 1e-9 * alpha_max; ++it) {
      const double mid = 0.5 * (lo + hi);
      (invariant(mid) ? lo : hi) = mid;
    }
    alpha = lo;
  }
  ts.alpha = alpha;
  const double root = std::sqrt(alpha);
  if (!(alpha > 0) || root * ts.rho_P + ts.w_term > root * (1.0 + 1e-12)) { throw std::runtime_error("terminal set empty"); }

  for (const auto & f : fit) {
    if (f.g.size() == 0 || f.g.lpNorm<Eigen::Infinity>() < 1e-12) { continue; }
    ts.theta_rows.push_back({f.g, f.lo + root * f.width, f.hi - root * f.width});
  }
  return ts;
}

/// Robust horizon program; the decision variables are the pre-stabilized inputs.
using HorizonProgram = opt::ShootingProblem;

/**
 * @brief Tightened program at state x_k.
 *
 * State rows at stage 0 are omitted since x_k is fixed.
 *
 * @throws std::runtime_error "horizon too long for uncertainty" when a tightened row is empty.
 */
inline HorizonProgram assemble_program(
  const NominalModel & model,
  const ConstraintBoxes & boxes,
  const TubeSchedule & tube,
  const TerminalSet & terminal,
  const VectorXd & x_k,
  int H,
  Tightening mode = Tightening::Ball)
{
  if (H != tube.horizon()) { throw std::invalid_argument("assemble_program: horizon differs from tube"); }
  if (x_k.size() != model.state_dim()) { throw std::invalid_argument("assemble_program: state has wrong size"); }
  HorizonProgram prog{model, H, x_k, tube.K, {}, std::nullopt, terminal.theta_dim(), terminal.theta_rows};
  const auto rows = boxes.rows();
  for (int i = 0; i <= H; ++i) {
    for (const auto & r : rows) {
      if (i == 0 && !r.has_input()) { continue; }
      if (i == H && r.has_input()) { continue; }
      const double mgn = row_margin(r, tube, i, mode);
      const double lo = r.lo + mgn, hi = r.hi - mgn;
      if (lo > hi) { throw std::runtime_error("horizon too long for uncertainty"); }
      prog.rows.push_back({i, r.cx, r.cu, lo, hi});
    }
  }
  const Eigen::LLT<MatrixXd> llt(terminal.P);
  if (llt.info() != Eigen::Success) { throw std::invalid_argument("terminal shape matrix must be positive definite"); }
  prog.terminal = opt::TerminalBall{llt.matrixU(), terminal.Gx, std::sqrt(terminal.alpha)};
  return prog;
}

}  // namespace mpsf
