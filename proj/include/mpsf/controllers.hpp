#pragma once

/**
 * @file
 * @brief Black-box control policies and discrete LQR synthesis.
 */

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "dynamics.hpp"

namespace mpsf {

/**
 * @brief Uncertified control policy u = pi(x, k).
 *
 * The step index carries the clock of time-varying references; the policy keeps no
 * mutable state, so repeated queries with the same arguments agree.
 */
class Policy
{
public:
  using QueryFn = std::function<VectorXd(const VectorXd &, long)>;

  Policy() = default;
  explicit Policy(QueryFn fn) : fn_(std::move(fn)) {}

  VectorXd query(const VectorXd & x, long step = 0) const { return fn_(x, step); }
  VectorXd operator()(const VectorXd & x, long step = 0) const { return fn_(x, step); }
  explicit operator bool() const { return static_cast<bool>(fn_); }

private:
  QueryFn fn_;
};

/// Infinite-horizon LQR solution: u = -K x with cost matrix P.
struct LqrGain
{
  MatrixXd K;
  MatrixXd P;
};

struct DareSettings
{
  double tolerance = 1e-10;
  int max_iterations = 10000;
};

/**
 * @brief Solve the discrete algebraic Riccati equation by fixed-point iteration.
 *
 * Iterates P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA from P = Q until the Frobenius
 * norm of the update drops below the tolerance.
 *
 * @throws std::runtime_error "DARE diverged" when the iteration does not settle,
 * which happens for pairs (A, B) that are not stabilizable.
 */
inline LqrGain solve_dare(const MatrixXd & A, const MatrixXd & B, const MatrixXd & Q, const MatrixXd & R, const DareSettings & settings = {})
{
  const auto n = A.rows();
  const auto m = B.cols();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != m || R.cols() != m) {
    throw std::invalid_argument("solve_dare: inconsistent dimensions");
  }
  if ((Q - Q.transpose()).norm() > 1e-10 || (R - R.transpose()).norm() > 1e-10) {
    throw std::invalid_argument("solve_dare: Q and R must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig_r(R);
  if (eig_r.eigenvalues().minCoeff() <= 0) { throw std::invalid_argument("solve_dare: R must be positive definite"); }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig_q(Q);
  if (eig_q.eigenvalues().minCoeff() < -1e-12) { throw std::invalid_argument("solve_dare: Q must be positive semidefinite"); }

  MatrixXd P = Q;
  for (int it = 0; it < settings.max_iterations; ++it) {
    const MatrixXd BtP  = B.transpose() * P;
    const MatrixXd gain = (R + BtP * B).ldlt().solve(BtP * A);
    MatrixXd next       = Q + A.transpose() * P * A - A.transpose() * P * B * gain;
    next                = 0.5 * (next + next.transpose());
    if (!next.allFinite()) { break; }
    const double change = (next - P).norm();
    P = std::move(next);
    if (change <= settings.tolerance) {
      const MatrixXd K = (R + B.transpose() * P * B).ldlt().solve(B.transpose() * P * A);
      return {K, P};
    }
  }
  throw std::runtime_error("DARE diverged");
}

inline LqrGain solve_dare(const LinearModel & lin, const MatrixXd & Q, const MatrixXd & R) { return solve_dare(lin.A, lin.B, Q, R); }

/// Largest eigenvalue magnitude.
inline double spectral_radius(const MatrixXd & M) { return Eigen::EigenSolver<MatrixXd>(M, false).eigenvalues().cwiseAbs().maxCoeff(); }

/// Reference state and feedforward input at one step.
struct ReferencePoint
{
  VectorXd x;
  VectorXd u;
};

using ReferenceProvider = std::function<ReferencePoint(long)>;

inline ReferenceProvider constant_reference(VectorXd x_ref, VectorXd u_ref)
{
  return [x_ref = std::move(x_ref), u_ref = std::move(u_ref)](long) { return ReferencePoint{x_ref, u_ref}; };
}

/**
 * @brief Sinusoidal position reference with its velocity, plus a least-squares feedforward.
 *
 * position(t) = amplitude sin(2 pi t / period); the velocity coordinate carries the
 * analytic derivative. The feedforward input solves min |B u - (x_ref(k+1) - f(x_ref(k), 0))|
 * with B the model Jacobian at the reference.
 */
inline ReferenceProvider sinusoid_reference(
  const NominalModel & model, double amplitude, double period, int position_index, int velocity_index)
{
  const int n    = model.state_dim();
  const int m    = model.input_dim();
  const double dt = model.dt();
  const double omega = 2.0 * std::numbers::pi / period;
  auto state_at = [=](long k) {
    VectorXd x = VectorXd::Zero(n);
    const double t = static_cast<double>(k) * dt;
    x(position_index) = amplitude * std::sin(omega * t);
    if (velocity_index >= 0) { x(velocity_index) = amplitude * omega * std::cos(omega * t); }
    return x;
  };
  return [model, state_at, m](long k) {
    const VectorXd xr   = state_at(k);
    const VectorXd zero = VectorXd::Zero(m);
    const Jacobians J   = model.jacobians(xr, zero);
    const VectorXd gap  = state_at(k + 1) - model.step(xr, zero);
    const VectorXd uff  = J.B.completeOrthogonalDecomposition().solve(gap);
    return ReferencePoint{xr, uff};
  };
}

/// u = -K (x - x_ref(k)) + u_ref(k).
inline Policy lqr_policy(const LqrGain & gain, ReferenceProvider reference)
{
  return Policy([K = gain.K, reference = std::move(reference)](const VectorXd & x, long k) -> VectorXd {
    const ReferencePoint r = reference(k);
    if (x.size() != K.cols() || r.x.size() != K.cols() || r.u.size() != K.rows()) {
      throw std::invalid_argument("lqr_policy: dimension mismatch");
    }
    return -K * (x - r.x) + r.u;
  });
}

/**
 * @brief Deterministic unsafe controller: a scaled LQR law toward a target that lies
 * outside the state constraints.
 */
struct AggressiveSpec
{
  LqrGain gain;
  VectorXd target_state;
  VectorXd target_input;
  double gain_scale = 1.0;
};

inline Policy aggressive_policy(const AggressiveSpec & spec)
{
  if (!(spec.gain_scale > 0)) { throw std::invalid_argument("gain_scale must be positive"); }
  return Policy([K = (spec.gain_scale * spec.gain.K).eval(), xt = spec.target_state, ut = spec.target_input](
                  const VectorXd & x, long) -> VectorXd { return -K * (x - xt) + ut; });
}

}  // namespace mpsf
