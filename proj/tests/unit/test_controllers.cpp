#include <gtest/gtest.h>

#include <mpsf/controllers.hpp>

#include <cmath>
#include <numbers>
#include <random>

using namespace mpsf;

namespace {

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

double dare_residual(const MatrixXd & A, const MatrixXd & B, const MatrixXd & Q, const MatrixXd & R, const MatrixXd & P)
{
  const MatrixXd BtP = B.transpose() * P;
  const MatrixXd rhs = Q + A.transpose() * P * A - A.transpose() * P * B * (R + BtP * B).inverse() * BtP * A;
  return (P - rhs).norm();
}

}  // namespace

TEST(SolveDare, ScalarGoldenRatio)
{
  const auto g = solve_dare(scalar(1), scalar(1), scalar(1), scalar(1));
  const double phi = (1 + std::sqrt(5.0)) / 2;
  EXPECT_NEAR(g.P(0, 0), phi, 1e-9);
  EXPECT_NEAR(g.K(0, 0), phi - 1, 1e-9);
}

TEST(SolveDare, ZeroDynamicsGivesStageCost)
{
  MatrixXd Q(2, 2);
  Q << 2, 0.5, 0.5, 1;
  const auto g = solve_dare(MatrixXd::Zero(2, 2), MatrixXd::Ones(2, 1), Q, scalar(3));
  EXPECT_LE((g.P - Q).norm(), 1e-12);
  EXPECT_LE(g.K.norm(), 1e-12);
}

TEST(SolveDare, QuadrotorClosedLoopStable)
{
  const auto lin = quadrotor_linear_matrices();
  const auto g   = solve_dare(lin, MatrixXd::Identity(2, 2), scalar(1));
  EXPECT_LT(spectral_radius(lin.A - lin.B * g.K), 1.0);
}

TEST(SolveDare, UnstabilizablePairDiverges)
{
  MatrixXd A(2, 2), B(2, 1);
  A << 2, 0, 0, 0.5;
  B << 0, 1;
  try {
    solve_dare(A, B, MatrixXd::Identity(2, 2), scalar(1));
    FAIL();
  } catch (const std::runtime_error & e) {
    EXPECT_STREQ(e.what(), "DARE diverged");
  }
}

TEST(SolveDare, RejectsIndefiniteInputWeight)
{
  EXPECT_THROW(solve_dare(scalar(1), scalar(1), scalar(1), scalar(0)), std::invalid_argument);
}

TEST(LqrPolicy, AtReferenceGivesFeedforward)
{
  MatrixXd K(1, 2);
  K << 0.618, 0.1;
  const VectorXd xr = VectorXd::Constant(2, 0.3);
  const auto pi     = lqr_policy({K, MatrixXd::Identity(2, 2)}, constant_reference(xr, VectorXd::Zero(1)));
  EXPECT_EQ(pi(xr)(0), 0.0);
}

TEST(LqrPolicy, ScalarHandArithmetic)
{
  const auto pi = lqr_policy({scalar(0.618), scalar(1)}, constant_reference(VectorXd::Zero(1), VectorXd::Zero(1)));
  EXPECT_DOUBLE_EQ(pi(VectorXd::Ones(1))(0), -0.618);
}

TEST(LqrPolicy, SinusoidReferenceShape)
{
  const auto model = quadrotor_linear_model();
  const auto ref   = sinusoid_reference(model, 1.0, 5.0, 0, 1);
  const double w   = 2 * std::numbers::pi / 5.0;
  for (long k : {0L, 10L, 31L, 62L, 125L}) {
    const auto r = ref(k);
    const double t = k * model.dt();
    EXPECT_NEAR(r.x(0), std::sin(w * t), 1e-12);
    EXPECT_NEAR(r.x(1), w * std::cos(w * t), 1e-12);
  }
  EXPECT_NEAR(ref(125).x(0), 0.0, 1e-12);  // one full period at 25 Hz
}

TEST(LqrPolicy, TracksSinusoidOnNominalModel)
{
  const auto model = quadrotor_linear_model();
  const auto lin   = quadrotor_linear_matrices();
  const auto g     = solve_dare(lin, MatrixXd::Identity(2, 2), scalar(1));
  const auto ref   = sinusoid_reference(model, 1.0, 5.0, 0, 1);
  const auto pi    = lqr_policy(g, ref);
  VectorXd x       = VectorXd::Zero(2);
  double late_err  = 0.0;
  for (long k = 0; k < 500; ++k) {
    if (k > 250) { late_err = std::max(late_err, std::abs(x(0) - ref(k).x(0))); }
    x = model.step(x, pi(x, k));
  }
  EXPECT_LT(late_err, 0.2);
}

TEST(AggressivePolicy, PushesOutwardAtBoundary)
{
  const auto lin = quadrotor_linear_matrices();
  const auto g   = solve_dare(lin, MatrixXd::Identity(2, 2), scalar(1));
  VectorXd target(2);
  target << 2.0, 0.0;
  const auto pi = aggressive_policy({g, target, target, 2.0});
  VectorXd at_edge(2);
  at_edge << 0.75, 0.0;
  EXPECT_GT(pi(at_edge)(0), 0.75);
}

TEST(AggressivePolicy, ViolatesFromStartAtLeastFiveTimes)
{
  const auto model = quadrotor_linear_model();
  const auto g     = solve_dare(quadrotor_linear_matrices(), MatrixXd::Identity(2, 2), scalar(1));
  VectorXd target(2);
  target << 2.0, 0.0;
  const auto pi = aggressive_policy({g, target, target, 1.0});
  VectorXd x    = VectorXd::Zero(2);
  int violations = 0;
  for (long k = 0; k < 200; ++k) {
    x = model.step(x, pi(x, k));
    if (std::abs(x(0)) > 0.75 || std::abs(x(1)) > 0.5) { ++violations; }
  }
  EXPECT_GE(violations, 5);
}

TEST(AggressivePolicy, Deterministic)
{
  const auto g = solve_dare(quadrotor_linear_matrices(), MatrixXd::Identity(2, 2), scalar(1));
  const auto pi = aggressive_policy({g, VectorXd::Ones(2), VectorXd::Ones(1), 3.0});
  const VectorXd x = VectorXd::Constant(2, 0.4);
  EXPECT_EQ(pi(x, 3), pi(x, 3));
}

TEST(ControllersProperty, DareResidualAndStability)
{
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  int solved = 0;
  for (int s = 0; s < 50; ++s) {
    const int n = 2 + s % 3, m = 1 + s % 2;
    MatrixXd A(n, n), B(n, m), L(n, n), Rr(m, m);
    for (int i = 0; i < A.size(); ++i) { A.data()[i] = 0.5 * n01(rng); }
    for (int i = 0; i < B.size(); ++i) { B.data()[i] = n01(rng); }
    for (int i = 0; i < L.size(); ++i) { L.data()[i] = n01(rng); }
    for (int i = 0; i < Rr.size(); ++i) { Rr.data()[i] = n01(rng); }
    const MatrixXd Q = L * L.transpose() + 0.1 * MatrixXd::Identity(n, n);
    const MatrixXd R = Rr * Rr.transpose() + 0.1 * MatrixXd::Identity(m, m);
    try {
      const auto g = solve_dare(A, B, Q, R);
      EXPECT_LE(dare_residual(A, B, Q, R, g.P), 1e-8);
      EXPECT_LT(spectral_radius(A - B * g.K), 1.0);
      EXPECT_LE((g.P - g.P.transpose()).norm(), 1e-12 * g.P.norm());
      EXPECT_GT(Eigen::SelfAdjointEigenSolver<MatrixXd>(g.P).eigenvalues().minCoeff(), 0.0);
      ++solved;
    } catch (const std::runtime_error &) {
    }
  }
  EXPECT_GE(solved, 45);
}

TEST(ControllersProperty, PoliciesArePure)
{
  const auto model = quadrotor_linear_model();
  const auto g     = solve_dare(quadrotor_linear_matrices(), MatrixXd::Identity(2, 2), scalar(1));
  const auto pi    = lqr_policy(g, sinusoid_reference(model, 1.5, 10.0, 0, 1));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(-1, 1);
  for (int s = 0; s < 100; ++s) {
    VectorXd x(2);
    x << d(rng), d(rng);
    const long k = s * 7;
    EXPECT_EQ(pi(x, k), pi(x, k));
  }
}
