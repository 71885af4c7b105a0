#pragma once

/**
 * @file
 * @brief Model predictive safety filter with one-step, multi-step and rate-regularized
 * objectives.
 */

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "controllers.hpp"
#include "dynamics.hpp"
#include "robust_mpc.hpp"
#include "sqp.hpp"

namespace mpsf {

enum class Variant { OneStep, MultiStep, OneStepRegularized };

struct FilterSpec
{
  Variant variant = Variant::OneStep;
  int M           = 1;   ///< filtering horizon of the multi-step objective
  int M_r         = 1;   ///< regularization horizon
  double gamma    = 0.85;
  MatrixXd R;
  MatrixXd R_r;
  int H = 1;

  void validate(int m) const
  {
    if (H < 1) { throw std::invalid_argument("filter horizon must be positive"); }
    if (variant == Variant::MultiStep && (M < 1 || M > H)) { throw std::invalid_argument("M must satisfy 1 <= M <= H"); }
    if (variant == Variant::OneStepRegularized && (M_r < 1 || M_r > H)) { throw std::invalid_argument("M_r must satisfy 1 <= M_r <= H"); }
    if (!(gamma > 0)) { throw std::invalid_argument("gamma must be positive"); }
    for (const MatrixXd * W : {&R, &R_r}) {
      if (W->rows() != m || W->cols() != m) { throw std::invalid_argument("cost matrix has wrong size"); }
      if ((*W - W->transpose()).norm() > 1e-12) { throw std::invalid_argument("cost matrix must be symmetric"); }
      if (Eigen::SelfAdjointEigenSolver<MatrixXd>(*W).eigenvalues().minCoeff() < -1e-12) {
        throw std::invalid_argument("cost matrix must be positive semidefinite");
      }
    }
  }

  /// Number of predicted uncertified inputs the objective consumes.
  int prediction_length() const { return variant == Variant::MultiStep ? M : 1; }

  static FilterSpec one_step(int H, int m)
  {
    return {Variant::OneStep, 1, 1, 0.85, MatrixXd::Identity(m, m), MatrixXd::Identity(m, m), H};
  }
  static FilterSpec multi_step(int M, int H, int m)
  {
    return {Variant::MultiStep, M, 1, 0.85, MatrixXd::Identity(m, m), MatrixXd::Identity(m, m), H};
  }
  static FilterSpec regularized(int M_r, int H, int m)
  {
    return {Variant::OneStepRegularized, 1, M_r, 0.85, MatrixXd::Identity(m, m), MatrixXd::Identity(m, m), H};
  }
};

inline std::string variant_name(const FilterSpec & spec)
{
  switch (spec.variant) {
  case Variant::OneStep: return "one_step";
  case Variant::MultiStep: return "multi_step_" + std::to_string(spec.M);
  case Variant::OneStepRegularized: return "regularized_" + std::to_string(spec.M_r);
  }
  return "unknown";
}

/// w(j) = gamma^j.
inline double weight(const FilterSpec & spec, int j)
{
  if (j < 0) { throw std::invalid_argument("weight index must be nonnegative"); }
  return std::pow(spec.gamma, j);
}

struct PredictedPlan
{
  MatrixXd states;  ///< n x (M+1)
  MatrixXd inputs;  ///< m x M
};

/// Nominal rollout of the uncertified policy: u_j = pi(x_j, k + j), x_{j+1} = f(x_j, u_j).
inline PredictedPlan predict_uncertified(const Policy & policy, const NominalModel & model, const VectorXd & x_k, int M, long k = 0)
{
  if (M < 1) { throw std::invalid_argument("prediction length must be positive"); }
  PredictedPlan p{MatrixXd(model.state_dim(), M + 1), MatrixXd(model.input_dim(), M)};
  p.states.col(0) = x_k;
  for (int j = 0; j < M; ++j) {
    p.inputs.col(j)     = policy(p.states.col(j), k + j);
    p.states.col(j + 1) = model.step(p.states.col(j), p.inputs.col(j));
  }
  return p;
}

namespace detail {

/// Adds w |u_j - r|^2_W to the quadratic.
inline void add_tracking(opt::InputQuadratic & J, int j, const MatrixXd & W, const VectorXd & r, double w)
{
  const auto m = W.rows();
  J.Q.block(j * m, j * m, m, m) += 2.0 * w * W;
  J.q.segment(j * m, m) -= 2.0 * w * (W * r);
  J.constant += w * r.dot(W * r);
}

}  // namespace detail

/**
 * @brief Objective over the stacked horizon inputs for the given variant.
 *
 * The multi-step targets are the predicted uncertified inputs; the regularizer
 * penalizes u_0 - prev_u and successive differences up to M_r.
 */
inline opt::InputQuadratic filter_objective(const FilterSpec & spec, const PredictedPlan & plan, const VectorXd & u_uncert, const VectorXd & prev_u)
{
  const auto m = u_uncert.size();
  const int H  = spec.H;
  opt::InputQuadratic J{MatrixXd::Zero(H * m, H * m), VectorXd::Zero(H * m), 0.0};
  switch (spec.variant) {
  case Variant::OneStep: detail::add_tracking(J, 0, spec.R, u_uncert, 1.0); break;
  case Variant::MultiStep:
    if (plan.inputs.cols() < spec.M) { throw std::invalid_argument("predicted plan shorter than M"); }
    detail::add_tracking(J, 0, spec.R, u_uncert, 1.0);
    for (int j = 1; j < spec.M; ++j) { detail::add_tracking(J, j, spec.R, plan.inputs.col(j), weight(spec, j)); }
    break;
  case Variant::OneStepRegularized:
    detail::add_tracking(J, 0, spec.R, u_uncert, 1.0);
    detail::add_tracking(J, 0, spec.R_r, prev_u, 1.0);
    for (int j = 1; j < spec.M_r; ++j) {
      const double w = weight(spec, j);
      const MatrixXd blk = 2.0 * w * spec.R_r;
      J.Q.block(j * m, j * m, m, m) += blk;
      J.Q.block((j - 1) * m, (j - 1) * m, m, m) += blk;
      J.Q.block(j * m, (j - 1) * m, m, m) -= blk;
      J.Q.block((j - 1) * m, j * m, m, m) -= blk;
    }
    break;
  }
  return J;
}

/// Robust program ingredients that stay fixed over an experiment.
struct RobustDesign
{
  NominalModel model;
  ConstraintBoxes boxes;
  TubeSchedule tube;
  TerminalSet terminal;
  Tightening tightening = Tightening::Support;

  int horizon() const { return tube.horizon(); }
  HorizonProgram program(const VectorXd & x) const { return assemble_program(model, boxes, tube, terminal, x, horizon(), tightening); }
};

/**
 * @brief Tube and terminal set from one stabilizing gain.
 *
 * The same gain serves as tube feedback, pre-stabilization and terminal controller.
 */
inline RobustDesign make_design(
  const NominalModel & model, const ConstraintBoxes & boxes, UncertaintyBound bound, const LqrGain & gain, int H, TerminalOptions options = {})
{
  TubeSchedule tube = compute_tube(model, bound, gain.K, H);
  TerminalSet term  = compute_terminal_set(model, boxes, tube, gain, options);
  RobustDesign d{model, boxes, std::move(tube), std::move(term), options.tightening};
  d.program(VectorXd::Zero(model.state_dim()));  // surfaces "horizon too long for uncertainty" early
  return d;
}

enum class CertStatus { Certified, FallbackApplied };

struct CertificationResult
{
  VectorXd u_cert;
  CertStatus status         = CertStatus::Certified;
  opt::QpStatus solver_status = opt::QpStatus::Optimal;
  opt::Rollout plan;
  VectorXd correction;
  double solve_time   = 0.0;
  double kkt_residual = 0.0;
  int sqp_iterations  = 0;
  int qp_iterations   = 0;
};

class InfeasibleStart : public std::runtime_error
{
public:
  InfeasibleStart() : std::runtime_error("initial state infeasible") {}
};

/**
 * @brief Receding-horizon safety filter.
 *
 * Keeps the last accepted plan in pre-stabilized coordinates. Shifting that plan by
 * one stage and appending the terminal controller gives the recursive-feasibility
 * candidate, which seeds the next solve and is applied verbatim when a solve fails.
 */
class SafetyFilter
{
public:
  SafetyFilter(FilterSpec spec, RobustDesign design, opt::SqpSettings settings = {})
      : spec_(std::move(spec)), design_(std::move(design)), settings_(settings)
  {
    spec_.H = design_.horizon();
    spec_.validate(design_.model.input_dim());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(spec_.R);
    R_half_ = es.operatorSqrt();
  }

  const FilterSpec & spec() const { return spec_; }
  const RobustDesign & design() const { return design_; }
  opt::SqpSettings & settings() { return settings_; }
  bool has_plan() const { return plan_v_.has_value(); }

  void reset()
  {
    plan_v_.reset();
    plan_theta_.reset();
    plan_lambda_.reset();
    prev_applied_.reset();
  }

  /**
   * @brief Solve the filter program at program.x0.
   * @throws InfeasibleStart if the solve fails and there is no stored plan.
   */
  CertificationResult certify(const HorizonProgram & program, const PredictedPlan & plan, const VectorXd & prev_u, const VectorXd & u_uncert)
  {
    if ((plan.states.col(0) - program.x0).norm() > 1e-12) { throw std::invalid_argument("plan does not start at the program state"); }
    const auto t0 = std::chrono::steady_clock::now();
    const auto J  = filter_objective(spec_, plan, u_uncert, prev_u);

    VectorXd v0, theta0;
    if (plan_v_) {
      v0     = shifted_candidate();
      theta0 = *plan_theta_;
    } else {
      v0     = initial_guess(program, plan);
      theta0 = initial_theta(program.x0);
    }

    const auto res = opt::solve_sqp(program, J, v0, theta0, solver_, settings_, plan_lambda_);

    CertificationResult out;
    out.solver_status  = res.status;
    out.kkt_residual   = res.kkt_residual;
    out.sqp_iterations = res.iterations;
    out.qp_iterations  = res.qp_iterations;
    if (res.status == opt::QpStatus::Optimal) {
      out.status   = CertStatus::Certified;
      out.plan     = res.trajectory;
      plan_v_      = res.v;
      plan_theta_  = res.theta;
      plan_lambda_ = res.qp_lambda;
    } else {
      if (!plan_v_) { throw InfeasibleStart(); }
      out.status   = CertStatus::FallbackApplied;
      plan_v_      = v0;
      out.plan     = opt::simulate(program, v0);
      plan_lambda_.reset();
    }
    out.u_cert     = project_input(program.x0, out.plan.U.col(0));
    out.correction = R_half_ * (u_uncert - out.u_cert);
    out.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  /// Predict, assemble and certify at state x and step k; tracks the applied input for the rate term.
  CertificationResult filter(const Policy & policy, const VectorXd & x, long k)
  {
    const PredictedPlan plan = predict_uncertified(policy, design_.model, x, spec_.prediction_length(), k);
    const VectorXd u_uncert  = plan.inputs.col(0);
    const VectorXd prev_u    = prev_applied_.value_or(u_uncert);
    auto res                 = certify(design_.program(x), plan, prev_u, u_uncert);
    prev_applied_            = res.u_cert;
    return res;
  }

private:
  /// Previous plan shifted by one stage, closed with the terminal controller.
  VectorXd shifted_candidate() const
  {
    const int m = design_.model.input_dim(), H = spec_.H;
    VectorXd v(H * m);
    v.head((H - 1) * m) = plan_v_->tail((H - 1) * m);
    const auto & T      = design_.terminal;
    if (T.theta_dim() > 0) {
      v.tail(m) = T.Gu * *plan_theta_ + T.K * (T.Gx * *plan_theta_);
    } else {
      v.tail(m).setZero();
    }
    return v;
  }

  /// Uncertified inputs over the predicted part, terminal-style feedback afterwards.
  VectorXd initial_guess(const HorizonProgram & program, const PredictedPlan & plan) const
  {
    const int m = design_.model.input_dim(), H = spec_.H;
    VectorXd v     = VectorXd::Zero(H * m);
    const auto len = std::min<Eigen::Index>(plan.inputs.cols(), H);
    for (Eigen::Index j = 0; j < len; ++j) { v.segment(j * m, m) = plan.inputs.col(j) + program.K * plan.states.col(j); }
    return v;
  }

  VectorXd initial_theta(const VectorXd & x) const
  {
    const auto & G = design_.terminal.Gx;
    if (G.cols() == 0) { return VectorXd(0); }
    return G.completeOrthogonalDecomposition().solve(x);
  }

  /// Removes solver-tolerance violations of the stage-0 input rows; bounds hold exactly afterwards.
  VectorXd project_input(const VectorXd & x, VectorXd u) const
  {
    const auto rows = design_.boxes.rows();
    for (int pass = 0; pass < 20; ++pass) {
      bool clean = true;
      for (const auto & r : rows) {
        if (!r.has_input()) { continue; }
        const double val  = r.cx.dot(x) + r.cu.dot(u);
        const double nn   = r.cu.squaredNorm();
        const double slack = 1e-12 * (1.0 + std::abs(val));
        if (val > r.hi) {
          u -= (val - r.hi + slack) / nn * r.cu.transpose();
          clean = false;
        } else if (val < r.lo) {
          u += (r.lo - val + slack) / nn * r.cu.transpose();
          clean = false;
        }
      }
      if (clean) { break; }
    }
    return u.cwiseMax(design_.boxes.u_lb).cwiseMin(design_.boxes.u_ub);
  }

  FilterSpec spec_;
  RobustDesign design_;
  opt::SqpSettings settings_;
  opt::QpSolver solver_;
  MatrixXd R_half_;
  std::optional<VectorXd> plan_v_;
  std::optional<VectorXd> plan_theta_;
  std::optional<VectorXd> plan_lambda_;
  std::optional<VectorXd> prev_applied_;
};

}  // namespace mpsf
