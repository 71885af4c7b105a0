#pragma once

/**
 * @file
 * @brief Discrete-time nominal models, bounded additive disturbances and
 * model-mismatch estimation.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>

namespace mpsf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Discrete-time Jacobians of a step map, A = d step / dx and B = d step / du.
struct Jacobians
{
  MatrixXd A;
  MatrixXd B;
};

/**
 * @brief Discrete-time nominal model x+ = f(x, u).
 *
 * Immutable after construction; the stored callables must be pure.
 */
class NominalModel
{
public:
  using StepFn     = std::function<VectorXd(const VectorXd &, const VectorXd &)>;
  using JacobianFn = std::function<Jacobians(const VectorXd &, const VectorXd &)>;

  NominalModel(int n, int m, double dt, StepFn step, JacobianFn jacobians, bool linear = false)
      : n_(n), m_(m), dt_(dt), step_(std::move(step)), jacobians_(std::move(jacobians)), linear_(linear)
  {
    if (n <= 0 || m <= 0) { throw std::invalid_argument("model dimensions must be positive"); }
    if (!(dt > 0)) { throw std::invalid_argument("model step period must be positive"); }
  }

  int state_dim() const { return n_; }
  int input_dim() const { return m_; }
  double dt() const { return dt_; }
  /// True when the step map is affine in (x, u); the Jacobians are then constant.
  bool is_linear() const { return linear_; }

  VectorXd step(const VectorXd & x, const VectorXd & u) const { return step_(x, u); }
  Jacobians jacobians(const VectorXd & x, const VectorXd & u) const { return jacobians_(x, u); }

private:
  int n_;
  int m_;
  double dt_;
  StepFn step_;
  JacobianFn jacobians_;
  bool linear_;
};

/// Euclidean-ball bound on the additive one-step model error, W = {w : |w|_2 <= w_max}.
struct UncertaintyBound
{
  double w_max = 0.0;

  explicit UncertaintyBound(double w = 0.0) : w_max(w)
  {
    if (!(w >= 0.0) || !std::isfinite(w)) { throw std::invalid_argument("w_max must be finite and nonnegative"); }
  }
};

struct CartpoleParams
{
  double cart_mass  = 1.0;  ///< kg
  double pole_mass  = 0.1;  ///< kg
  double half_length = 0.5; ///< m
  double gravity    = 9.8;  ///< m/s^2

  void validate() const
  {
    if (!(cart_mass > 0 && pole_mass > 0 && half_length > 0 && gravity > 0)) {
      throw std::invalid_argument("cartpole parameters must be strictly positive");
    }
  }
};

struct LinearModel
{
  MatrixXd A;
  MatrixXd B;
};

/// Continuous-time dynamics x_dot = F(x, u).
using ContinuousDynamics = std::function<VectorXd(const VectorXd &, const VectorXd &)>;

/**
 * @brief Frictionless cartpole accelerations for state [x, x_dot, theta, theta_dot].
 *
 * Solves the coupled equations exactly: the pole equation is solved for theta_ddot
 * first, then substituted into the cart equation.
 *
 * @return (x_ddot, theta_ddot)
 */
inline std::pair<double, double>
cartpole_accelerations(const VectorXd & x, double force, const CartpoleParams & p)
{
  const double theta_dot = x(3);
  const double s         = std::sin(x(2));
  const double c         = std::cos(x(2));
  const double total     = p.cart_mass + p.pole_mass;

  const double temp        = (-force - p.pole_mass * p.half_length * theta_dot * theta_dot * s) / total;
  const double theta_ddot  = (p.gravity * s + c * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * c * c / total));
  const double x_ddot =
    (force + p.pole_mass * p.half_length * (theta_dot * theta_dot * s - theta_ddot * c)) / total;
  return {x_ddot, theta_ddot};
}

inline ContinuousDynamics cartpole_dynamics(const CartpoleParams & params)
{
  params.validate();
  return [params](const VectorXd & x, const VectorXd & u) {
    const auto [x_ddot, theta_ddot] = cartpole_accelerations(x, u(0), params);
    VectorXd dx(4);
    dx << x(1), x_ddot, x(3), theta_ddot;
    return dx;
  };
}

namespace detail {

/// Central finite-difference Jacobians of a continuous vector field.
inline Jacobians continuous_jacobians(const ContinuousDynamics & f, const VectorXd & x, const VectorXd & u)
{
  const auto n = x.size();
  const auto m = u.size();
  Jacobians J{MatrixXd(n, n), MatrixXd(n, m)};
  VectorXd xp = x, xm = x, up = u, um = u;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
    xp(i) = x(i) + h;
    xm(i) = x(i) - h;
    J.A.col(i) = (f(xp, u) - f(xm, u)) / (2 * h);
    xp(i) = xm(i) = x(i);
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(u(i)));
    up(i) = u(i) + h;
    um(i) = u(i) - h;
    J.B.col(i) = (f(x, up) - f(x, um)) / (2 * h);
    up(i) = um(i) = u(i);
  }
  return J;
}

}  // namespace detail

/**
 * @brief Fixed-step fourth-order Runge-Kutta discretization with zero-order hold on u.
 *
 * Jacobians are propagated through the four stages by the chain rule, using
 * central differences of the continuous vector field at each stage.
 */
inline NominalModel discretize_rk4(ContinuousDynamics f, int n, int m, double dt)
{
  if (!(dt > 0)) { throw std::invalid_argument("dt must be positive"); }
  auto step = [f, dt](const VectorXd & x, const VectorXd & u) -> VectorXd {
    const VectorXd k1 = f(x, u);
    const VectorXd k2 = f(x + 0.5 * dt * k1, u);
    const VectorXd k3 = f(x + 0.5 * dt * k2, u);
    const VectorXd k4 = f(x + dt * k3, u);
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  };
  auto jac = [f, dt, n](const VectorXd & x, const VectorXd & u) -> Jacobians {
    const MatrixXd I = MatrixXd::Identity(n, n);

    const VectorXd k1 = f(x, u);
    const Jacobians J1 = detail::continuous_jacobians(f, x, u);
    const MatrixXd dk1x = J1.A, dk1u = J1.B;

    const VectorXd x2 = x + 0.5 * dt * k1;
    const VectorXd k2 = f(x2, u);
    const Jacobians J2 = detail::continuous_jacobians(f, x2, u);
    const MatrixXd dk2x = J2.A * (I + 0.5 * dt * dk1x);
    const MatrixXd dk2u = J2.A * (0.5 * dt * dk1u) + J2.B;

    const VectorXd x3 = x + 0.5 * dt * k2;
    const VectorXd k3 = f(x3, u);
    const Jacobians J3 = detail::continuous_jacobians(f, x3, u);
    const MatrixXd dk3x = J3.A * (I + 0.5 * dt * dk2x);
    const MatrixXd dk3u = J3.A * (0.5 * dt * dk2u) + J3.B;

    const VectorXd x4 = x + dt * k3;
    const Jacobians J4 = detail::continuous_jacobians(f, x4, u);
    const MatrixXd dk4x = J4.A * (I + dt * dk3x);
    const MatrixXd dk4u = J4.A * (dt * dk3u) + J4.B;

    return {I + dt / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x), dt / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)};
  };
  return NominalModel(n, m, dt, std::move(step), std::move(jac));
}

/// Discrete linear model x+ = A x + B u.
inline NominalModel make_linear_model(const LinearModel & lin, double dt)
{
  if (lin.A.rows() != lin.A.cols() || lin.B.rows() != lin.A.rows()) {
    throw std::invalid_argument("inconsistent linear model dimensions");
  }
  const MatrixXd A = lin.A, B = lin.B;
  return NominalModel(
    static_cast<int>(A.rows()),
    static_cast<int>(B.cols()),
    dt,
    [A, B](const VectorXd & x, const VectorXd & u) -> VectorXd { return A * x + B * u; },
    [A, B](const VectorXd &, const VectorXd &) { return Jacobians{A, B}; },
    true);
}

inline NominalModel cartpole_model(const CartpoleParams & params, double dt = 1.0 / 15.0)
{
  return discretize_rk4(cartpole_dynamics(params), 4, 1, dt);
}

/// Position/velocity model of a setpoint-tracking quadrotor, identified at 25 Hz.
inline LinearModel quadrotor_linear_matrices()
{
  LinearModel lin{MatrixXd(2, 2), MatrixXd(2, 1)};
  lin.A << 0.9756, 0.0287, -0.2793, 0.8535;
  lin.B << 0.0231, 0.2854;
  return lin;
}

inline NominalModel quadrotor_linear_model() { return make_linear_model(quadrotor_linear_matrices(), 0.04); }

/// One recorded transition of the true system.
struct Transition
{
  VectorXd x;
  VectorXd u;
  VectorXd x_next;
};

/// w_max = max_k |x_{k+1} - f(x_k, u_k)|_2 over recorded transitions.
inline UncertaintyBound estimate_w_max(std::span<const Transition> data, const NominalModel & model)
{
  if (data.empty()) { throw std::invalid_argument("no data"); }
  double w = 0.0;
  for (const auto & t : data) { w = std::max(w, (t.x_next - model.step(t.x, t.u)).norm()); }
  return UncertaintyBound(w);
}

enum class DisturbanceMode {
  Uniform,   ///< uniform in the w_max ball
  Boundary,  ///< uniform direction, norm exactly w_max
};

/**
 * @brief Seeded sampler of disturbances in the w_max ball.
 *
 * Owns its generator; one instance per rollout.
 */
class DisturbanceSampler
{
public:
  DisturbanceSampler(UncertaintyBound bound, std::uint64_t seed, DisturbanceMode mode = DisturbanceMode::Uniform)
      : bound_(bound), mode_(mode), rng_(seed)
  {}

  VectorXd sample(Eigen::Index n)
  {
    VectorXd w = VectorXd::Zero(n);
    if (bound_.w_max == 0.0) { return w; }
    std::normal_distribution<double> normal(0.0, 1.0);
    do {
      for (Eigen::Index i = 0; i < n; ++i) { w(i) = normal(rng_); }
    } while (w.norm() < 1e-12);
    w.normalize();
    double radius = bound_.w_max;
    if (mode_ == DisturbanceMode::Uniform) {
      std::uniform_real_distribution<double> uniform(0.0, 1.0);
      radius *= std::pow(uniform(rng_), 1.0 / static_cast<double>(n));
    }
    return radius * w;
  }

  const UncertaintyBound & bound() const { return bound_; }
  DisturbanceMode mode() const { return mode_; }

private:
  UncertaintyBound bound_;
  DisturbanceMode mode_;
  std::mt19937_64 rng_;
};

/// True-plant surrogate: nominal step plus a sampled disturbance in W.
inline VectorXd disturbed_step(const NominalModel & model, const VectorXd & x, const VectorXd & u, DisturbanceSampler & sampler)
{
  return model.step(x, u) + sampler.sample(model.state_dim());
}

/// Single-shot variant: fresh sampler seeded with `seed`.
inline VectorXd disturbed_step(
  const NominalModel & model,
  const VectorXd & x,
  const VectorXd & u,
  UncertaintyBound bound,
  std::uint64_t seed,
  DisturbanceMode mode = DisturbanceMode::Uniform)
{
  DisturbanceSampler sampler(bound, seed, mode);
  return disturbed_step(model, x, u, sampler);
}

}  // namespace mpsf
