#pragma once

/**
 * @file
 * @brief Sequential quadratic programming for input-tracking programs over a
 * single-shooting horizon.
 *
 * Decision variables are pre-stabilized inputs v_j with u_j = v_j - K x_j, plus an
 * optional parameter vector theta that moves the terminal ellipsoid. Each iteration
 * linearizes the dynamics along the current rollout, condenses the states out and
 * solves one dense QP in (dv, dtheta).
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dynamics.hpp"
#include "qp.hpp"

namespace mpsf::opt {

/// lo <= cx x_stage + cu u_stage <= hi. cu is ignored at the final stage.
struct StageRow
{
  int stage = 0;
  Eigen::RowVectorXd cx;
  Eigen::RowVectorXd cu;
  double lo = -kInf;
  double hi = kInf;
};

/// |Lt (x_H - Gx theta)|_2 <= radius.
struct TerminalBall
{
  MatrixXd Lt;
  MatrixXd Gx;
  double radius = 0.0;
};

/// lo <= g theta <= hi.
struct ParameterRow
{
  Eigen::RowVectorXd g;
  double lo = -kInf;
  double hi = kInf;
};

struct ShootingProblem
{
  NominalModel model;
  int horizon = 1;
  VectorXd x0;
  /// Pre-stabilizing gain, u = v - K x.
  MatrixXd K;
  std::vector<StageRow> rows;
  std::optional<TerminalBall> terminal;
  int theta_dim = 0;
  std::vector<ParameterRow> theta_rows;
};

/// J(u) = 1/2 u'Qu + q'u + constant over the stacked inputs [u_0; ...; u_{H-1}].
struct InputQuadratic
{
  MatrixXd Q;
  VectorXd q;
  double constant = 0.0;

  double value(const VectorXd & u) const { return 0.5 * u.dot(Q * u) + q.dot(u) + constant; }
};

struct Rollout
{
  MatrixXd X;  ///< n x (H+1)
  MatrixXd U;  ///< m x H

  VectorXd stacked_inputs() const { return Eigen::Map<const VectorXd>(U.data(), U.size()); }
};

struct SqpSettings
{
  double step_tolerance      = 1e-7;
  int max_iterations         = 50;
  double feasibility_tolerance = 1e-6;
  /// Stop once the subproblem predicts less relative decrease than this.
  double decrease_tolerance  = 1e-8;
  double initial_trust_radius = 1.0;
  double min_trust_radius    = 1e-10;
  /// Ridge on each subproblem, relative to the largest Hessian diagonal. It makes the
  /// subproblems strongly convex without moving the fixed point of the iteration.
  /// The weight shrinks tenfold per iteration down to the minimum.
  double proximal_weight     = 1e-4;
  double min_proximal_weight = 1e-5;
  QpSettings qp;
};

struct SqpResult
{
  VectorXd v;
  VectorXd theta;
  Rollout trajectory;
  QpStatus status     = QpStatus::MaxIter;
  double kkt_residual = kInf;
  int iterations      = 0;
  int qp_iterations   = 0;
  double objective    = kInf;
  VectorXd qp_lambda;
};

inline Rollout simulate(const ShootingProblem & prob, const VectorXd & v)
{
  const int n = prob.model.state_dim(), m = prob.model.input_dim(), H = prob.horizon;
  if (v.size() != H * m) { throw std::invalid_argument("simulate: v has wrong size"); }
  Rollout r{MatrixXd(n, H + 1), MatrixXd(m, H)};
  r.X.col(0) = prob.x0;
  for (int j = 0; j < H; ++j) {
    r.U.col(j)     = v.segment(j * m, m) - prob.K * r.X.col(j);
    r.X.col(j + 1) = prob.model.step(r.X.col(j), r.U.col(j));
  }
  return r;
}

/// Pre-stabilized inputs that reproduce a given input sequence along its own rollout.
inline VectorXd to_prestabilized(const ShootingProblem & prob, const Rollout & r)
{
  const int m = prob.model.input_dim();
  VectorXd v(prob.horizon * m);
  for (int j = 0; j < prob.horizon; ++j) { v.segment(j * m, m) = r.U.col(j) + prob.K * r.X.col(j); }
  return v;
}

namespace detail {

/// Calls visit(violation) for every row, parameter row and the terminal ball.
template <class Visit>
void for_each_violation(const ShootingProblem & prob, const Rollout & r, const VectorXd & theta, Visit && visit)
{
  for (const auto & row : prob.rows) {
    double val = row.cx.dot(r.X.col(row.stage));
    if (row.stage < prob.horizon && row.cu.size() > 0) { val += row.cu.dot(r.U.col(row.stage)); }
    visit(std::max({row.lo - val, val - row.hi, 0.0}));
  }
  if (prob.terminal) {
    const auto & t = *prob.terminal;
    VectorXd xs    = r.X.col(prob.horizon);
    if (prob.theta_dim > 0) { xs -= t.Gx * theta; }
    visit(std::max(0.0, (t.Lt * xs).norm() - t.radius));
  }
  for (const auto & row : prob.theta_rows) {
    const double val = row.g.dot(theta);
    visit(std::max({row.lo - val, val - row.hi, 0.0}));
  }
}

}  // namespace detail

/// l1 norm of all constraint violations along a rollout, each reduced by `slack`.
inline double constraint_violation(const ShootingProblem & prob, const Rollout & r, const VectorXd & theta, double slack = 0.0)
{
  double sum = 0.0;
  detail::for_each_violation(prob, r, theta, [&](double v) { sum += std::max(0.0, v - slack); });
  return sum;
}

/// Largest single constraint violation along a rollout.
inline double max_violation(const ShootingProblem & prob, const Rollout & r, const VectorXd & theta)
{
  double worst = 0.0;
  detail::for_each_violation(prob, r, theta, [&](double v) { worst = std::max(worst, v); });
  return worst;
}

/// Sensitivities of the rollout to dv: dx_j = Sx[j] dv, du_j = Su[j] dv.
struct Sensitivities
{
  std::vector<MatrixXd> Sx;
  std::vector<MatrixXd> Su;
};

inline Sensitivities rollout_sensitivities(const ShootingProblem & prob, const Rollout & r)
{
  const int n = prob.model.state_dim(), m = prob.model.input_dim(), H = prob.horizon;
  Sensitivities s;
  s.Sx.assign(static_cast<std::size_t>(H + 1), MatrixXd::Zero(n, H * m));
  s.Su.assign(static_cast<std::size_t>(H), MatrixXd::Zero(m, H * m));
  std::optional<Jacobians> fixed;
  if (prob.model.is_linear()) { fixed = prob.model.jacobians(r.X.col(0), r.U.col(0)); }
  for (int j = 0; j < H; ++j) {
    const auto J = fixed ? *fixed : prob.model.jacobians(r.X.col(j), r.U.col(j));
    auto & su    = s.Su[static_cast<std::size_t>(j)];
    su           = -prob.K * s.Sx[static_cast<std::size_t>(j)];
    su.middleCols(j * m, m) += MatrixXd::Identity(m, m);
    s.Sx[static_cast<std::size_t>(j + 1)] = J.A * s.Sx[static_cast<std::size_t>(j)] + J.B * su;
  }
  return s;
}

/**
 * @brief Condensed QP in z = [dv; dtheta] around a rollout.
 *
 * Row order: stage rows with nonzero sensitivity, parameter rows, trust-region rows,
 * then the terminal ball block. `curvature`, when given, holds the part of a trial
 * rollout the linearization missed; adding it to the constraint constants gives the
 * second-order correction subproblem.
 */
inline DenseQp build_condensed_qp(
  const ShootingProblem & prob,
  const InputQuadratic & obj,
  const Rollout & r,
  const VectorXd & theta,
  const Sensitivities & s,
  double trust_radius        = kInf,
  const Rollout * curvature  = nullptr)
{
  const int m = prob.model.input_dim(), H = prob.horizon;
  const int nv = H * m, nt = prob.theta_dim, d = nv + nt;

  MatrixXd Su(nv, nv);
  for (int j = 0; j < H; ++j) { Su.middleRows(j * m, m) = s.Su[static_cast<std::size_t>(j)]; }

  DenseQp qp;
  qp.H = MatrixXd::Zero(d, d);
  qp.g = VectorXd::Zero(d);
  qp.H.topLeftCorner(nv, nv) = Su.transpose() * obj.Q * Su;
  qp.g.head(nv)              = Su.transpose() * (obj.Q * r.stacked_inputs() + obj.q);

  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> lo, hi;
  for (const auto & row : prob.rows) {
    Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(d);
    a.head(nv)           = row.cx * s.Sx[static_cast<std::size_t>(row.stage)];
    double val           = row.cx.dot(r.X.col(row.stage));
    if (row.stage < H && row.cu.size() > 0) {
      a.head(nv) += row.cu * s.Su[static_cast<std::size_t>(row.stage)];
      val += row.cu.dot(r.U.col(row.stage));
      if (curvature) { val += row.cu.dot(curvature->U.col(row.stage)); }
    }
    if (curvature) { val += row.cx.dot(curvature->X.col(row.stage)); }
    if (a.lpNorm<Eigen::Infinity>() == 0.0) { continue; }
    rows.push_back(a);
    lo.push_back(row.lo - val);
    hi.push_back(row.hi - val);
  }
  for (const auto & row : prob.theta_rows) {
    Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(d);
    a.tail(nt)           = row.g;
    const double val     = row.g.dot(theta);
    rows.push_back(a);
    lo.push_back(row.lo - val);
    hi.push_back(row.hi - val);
  }
  if (std::isfinite(trust_radius)) {
    for (int i = 0; i < nv; ++i) {
      Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(d);
      a(i)                 = 1.0;
      rows.push_back(a);
      lo.push_back(-trust_radius);
      hi.push_back(trust_radius);
    }
  }
  const Index box_rows = static_cast<Index>(rows.size());
  Index ball_rows      = 0;
  if (prob.terminal) { ball_rows = prob.terminal->Lt.rows(); }

  qp.C.resize(box_rows + ball_rows, d);
  qp.lb.resize(box_rows + ball_rows);
  qp.ub.resize(box_rows + ball_rows);
  for (Index i = 0; i < box_rows; ++i) {
    qp.C.row(i) = rows[static_cast<std::size_t>(i)];
    qp.lb(i)    = lo[static_cast<std::size_t>(i)];
    qp.ub(i)    = hi[static_cast<std::size_t>(i)];
  }
  if (prob.terminal) {
    const auto & t = *prob.terminal;
    qp.C.block(box_rows, 0, ball_rows, nv) = t.Lt * s.Sx[static_cast<std::size_t>(H)];
    VectorXd off                           = r.X.col(H);
    if (curvature) { off += curvature->X.col(H); }
    if (nt > 0) {
      qp.C.block(box_rows, nv, ball_rows, nt) = -t.Lt * t.Gx;
      off -= t.Gx * theta;
    }
    qp.lb.tail(ball_rows).setConstant(-kInf);
    qp.ub.tail(ball_rows).setConstant(kInf);
    qp.balls.push_back({box_rows, ball_rows, -(t.Lt * off), t.radius});
  }
  return qp;
}

/// Trial rollout minus its first-order prediction from `base`.
inline Rollout linearization_miss(const ShootingProblem & prob, const Rollout & base, const Rollout & trial, const Sensitivities & s, const VectorXd & dv)
{
  Rollout miss{trial.X - base.X, trial.U - base.U};
  for (int j = 0; j <= prob.horizon; ++j) { miss.X.col(j) -= s.Sx[static_cast<std::size_t>(j)] * dv; }
  for (int j = 0; j < prob.horizon; ++j) { miss.U.col(j) -= s.Su[static_cast<std::size_t>(j)] * dv; }
  return miss;
}

/**
 * @brief Gauss-Newton SQP with an l1 merit function and an infinity-norm trust region.
 *
 * The first subproblem is solved without a trust region. Every subproblem carries a
 * small, shrinking proximal ridge, so linear models also take a few exact steps before the step
 * norm drops below tolerance. Rejected steps get one second-order correction.
 */
inline SqpResult solve_sqp(
  const ShootingProblem & prob,
  const InputQuadratic & obj,
  const VectorXd & v0,
  const VectorXd & theta0,
  QpSolver & solver,
  const SqpSettings & settings = {},
  const std::optional<VectorXd> & lambda_hint = std::nullopt)
{
  const int m = prob.model.input_dim(), H = prob.horizon, nv = H * m, nt = prob.theta_dim;
  if (v0.size() != nv || theta0.size() != nt) { throw std::invalid_argument("solve_sqp: initial guess has wrong size"); }
  if (obj.Q.rows() != nv || obj.q.size() != nv) { throw std::invalid_argument("solve_sqp: objective has wrong size"); }
  solver.settings() = settings.qp;

  SqpResult res;
  res.v          = v0;
  res.theta      = theta0;
  res.trajectory = simulate(prob, res.v);

  double mu     = 1e2;
  double radius = kInf;
  const auto merit_of = [&](const Rollout & r, const VectorXd & th) {
    return obj.value(r.stacked_inputs()) + mu * constraint_violation(prob, r, th);
  };
  double merit = merit_of(res.trajectory, res.theta);
  std::optional<QpWarmStart> warm;
  if (lambda_hint) { warm = QpWarmStart{VectorXd::Zero(nv + nt), *lambda_hint}; }

  Sensitivities sens = rollout_sensitivities(prob, res.trajectory);
  for (int it = 0; it < settings.max_iterations; ++it) {
    res.iterations = it + 1;
    DenseQp qp     = build_condensed_qp(prob, obj, res.trajectory, res.theta, sens, radius);
    const double weight = std::max(settings.proximal_weight * std::pow(0.1, it), settings.min_proximal_weight);
    const double ridge  = weight * std::max(1.0, qp.H.diagonal().maxCoeff());
    qp.H.diagonal().array() += ridge;
    QpSolution sol = solver.solve(qp, warm && warm->lambda.size() == qp.C.rows() ? warm : std::nullopt);
    res.qp_iterations += sol.iterations;
    bool dropped_radius = false;
    if (sol.status == QpStatus::Infeasible && std::isfinite(radius)) {
      dropped_radius = true;
      radius = kInf;
      qp     = build_condensed_qp(prob, obj, res.trajectory, res.theta, sens, radius);
      qp.H.diagonal().array() += ridge;
      sol    = solver.solve(qp);
      res.qp_iterations += sol.iterations;
    }
    if (sol.status != QpStatus::Optimal) {
      res.status       = (sol.status == QpStatus::Infeasible && it == 0) ? QpStatus::Infeasible : QpStatus::MaxIter;
      res.kkt_residual = sol.kkt_residual;
      return res;
    }
    warm             = QpWarmStart{VectorXd::Zero(nv + nt), sol.lambda};
    res.qp_lambda    = sol.lambda;
    res.kkt_residual = sol.kkt_residual;

    const VectorXd dv = sol.z.head(nv);
    const VectorXd dt = sol.z.tail(nt);
    const double step = sol.z.size() > 0 ? sol.z.lpNorm<Eigen::Infinity>() : 0.0;
    mu                = std::max(mu, 2.0 * sol.lambda.lpNorm<Eigen::Infinity>() + 1.0);

    // No meaningful decrease left: the current point is stationary to solver precision.
    const double predicted = -qp.objective(sol.z);
    const double current   = obj.value(res.trajectory.stacked_inputs());
    if (step > settings.step_tolerance && predicted <= settings.decrease_tolerance * (1.0 + std::abs(current))
        && max_violation(prob, res.trajectory, res.theta) <= settings.feasibility_tolerance) {
      // take the final step when it keeps feasibility; it removes most of the proximal bias
      Rollout last = simulate(prob, res.v + dv);
      if (last.X.allFinite() && max_violation(prob, last, res.theta + dt) <= settings.feasibility_tolerance
          && merit_of(last, res.theta + dt) <= merit_of(res.trajectory, res.theta)) {
        res.v += dv;
        res.theta += dt;
        res.trajectory = std::move(last);
      }
      res.objective = obj.value(res.trajectory.stacked_inputs());
      res.status    = QpStatus::Optimal;
      return res;
    }
    if (step <= settings.step_tolerance) {
      res.v += dv;
      res.theta += dt;
      res.trajectory = simulate(prob, res.v);
      res.objective  = obj.value(res.trajectory.stacked_inputs());
      const bool feasible = max_violation(prob, res.trajectory, res.theta) <= settings.feasibility_tolerance;
      res.status          = feasible ? QpStatus::Optimal : QpStatus::MaxIter;
      return res;
    }
    if (prob.model.is_linear()) {
      // the linearization is exact; only the proximal term separates the step from the optimum
      res.v += dv;
      res.theta += dt;
      res.trajectory = simulate(prob, res.v);
      continue;
    }

    merit = merit_of(res.trajectory, res.theta);
    const VectorXd v_try     = res.v + dv;
    const VectorXd theta_try = res.theta + dt;
    Rollout trial            = simulate(prob, v_try);
    const double merit_try   = merit_of(trial, theta_try);
    bool accept                = trial.X.allFinite() && merit_try <= merit + 1e-10 * (1.0 + std::abs(merit));
    VectorXd v_acc = v_try, theta_acc = theta_try;
    if (!accept && trial.X.allFinite()) {
      // Second-order correction against the Maratos effect.
      const Rollout miss   = linearization_miss(prob, res.trajectory, trial, sens, dv);
      DenseQp qp_soc       = build_condensed_qp(prob, obj, res.trajectory, res.theta, sens, radius, &miss);
      qp_soc.H.diagonal().array() += ridge;
      const QpSolution soc = solver.solve(qp_soc, QpWarmStart{sol.z, sol.lambda});
      res.qp_iterations += soc.iterations;
      if (soc.status == QpStatus::Optimal) {
        v_acc            = res.v + soc.z.head(nv);
        theta_acc        = res.theta + soc.z.tail(nt);
        Rollout corrected = simulate(prob, v_acc);
        const double merit_soc = merit_of(corrected, theta_acc);
        if (corrected.X.allFinite() && merit_soc <= merit + 1e-10 * (1.0 + std::abs(merit))) {
          accept = true;
          trial  = std::move(corrected);
        }
      }
    }
    if (accept) {
      res.v          = v_acc;
      res.theta      = theta_acc;
      res.trajectory = std::move(trial);
      sens           = rollout_sensitivities(prob, res.trajectory);
      radius         = std::isfinite(radius) ? std::max(radius, 2.0 * dv.lpNorm<Eigen::Infinity>()) : kInf;
    } else {
      if (dropped_radius) {
        // the trust region cannot shrink without losing feasibility of the subproblem
        res.objective = obj.value(res.trajectory.stacked_inputs());
        res.status    = max_violation(prob, res.trajectory, res.theta) <= settings.feasibility_tolerance ? QpStatus::Optimal : QpStatus::MaxIter;
        return res;
      }
      radius = 0.25 * dv.lpNorm<Eigen::Infinity>();
      if (radius < settings.min_trust_radius) { break; }
    }
  }
  res.objective = obj.value(res.trajectory.stacked_inputs());
  res.status    = QpStatus::MaxIter;
  return res;
}

}  // namespace mpsf::opt
