#include <gtest/gtest.h>

#include <mpsf/dynamics.hpp>

#include <cmath>
#include <random>
#include <vector>

using namespace mpsf;

namespace {

// Mass-matrix form of the cartpole equations solved as a 2x2 linear system; independent
// of the substitution order used by the library.
std::pair<double, double> cartpole_reference(const VectorXd & x, double F, const CartpoleParams & p)
{
  const double th = x(2), w = x(3);
  const double mt = p.cart_mass + p.pole_mass, ml = p.pole_mass * p.half_length;
  Eigen::Matrix2d M;
  M << mt, ml * std::cos(th), std::cos(th), 4.0 / 3.0 * p.half_length;
  const Eigen::Vector2d rhs(F + ml * w * w * std::sin(th), p.gravity * std::sin(th));
  const Eigen::Vector2d acc = M.lu().solve(rhs);
  return {acc(0), acc(1)};
}

VectorXd vec(std::initializer_list<double> v)
{
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) { out(i++) = d; }
  return out;
}

void expect_jacobians_match(const NominalModel & model, const VectorXd & x, const VectorXd & u)
{
  const Jacobians J = model.jacobians(x, u);
  const int n = model.state_dim(), m = model.input_dim();
  MatrixXd A(n, n), B(n, m);
  for (int i = 0; i < n; ++i) {
    const double h = 1e-6;
    VectorXd xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    A.col(i) = (model.step(xp, u) - model.step(xm, u)) / (2 * h);
  }
  for (int i = 0; i < m; ++i) {
    const double h = 1e-6;
    VectorXd up = u, um = u;
    up(i) += h;
    um(i) -= h;
    B.col(i) = (model.step(x, up) - model.step(x, um)) / (2 * h);
  }
  EXPECT_LE((J.A - A).norm(), 1e-5 * std::max(1.0, A.norm()));
  EXPECT_LE((J.B - B).norm(), 1e-5 * std::max(1.0, B.norm()));
}

}  // namespace

TEST(CartpoleAccelerations, EquilibriumIsAtRest)
{
  const auto [xdd, thdd] = cartpole_accelerations(VectorXd::Zero(4), 0.0, {});
  EXPECT_EQ(xdd, 0.0);
  EXPECT_EQ(thdd, 0.0);
}

TEST(CartpoleAccelerations, UnitForceAtUpright)
{
  const auto [xdd, thdd] = cartpole_accelerations(VectorXd::Zero(4), 1.0, {1.0, 0.1, 0.5, 9.8});
  EXPECT_NEAR(xdd, 0.97561, 1e-5);
  EXPECT_NEAR(thdd, -1.46341, 1e-5);
  const auto [rx, rth] = cartpole_reference(VectorXd::Zero(4), 1.0, {});
  EXPECT_NEAR(xdd, rx, 1e-12);
  EXPECT_NEAR(thdd, rth, 1e-12);
}

TEST(CartpoleAccelerations, GravityOnlyAtSmallAngle)
{
  const auto [xdd, thdd] = cartpole_accelerations(vec({0, 0, 0.1, 0}), 0.0, {});
  EXPECT_NEAR(thdd, 1.57378, 1e-5);
  EXPECT_NEAR(thdd, cartpole_reference(vec({0, 0, 0.1, 0}), 0.0, {}).second, 1e-12);
  (void)xdd;
}

TEST(CartpoleAccelerations, AgreesWithMassMatrixFormEverywhere)
{
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-3.0, 3.0);
  for (int s = 0; s < 200; ++s) {
    const VectorXd x = vec({d(rng), d(rng), d(rng), d(rng)});
    const double F   = 5 * d(rng);
    const auto [a, b] = cartpole_accelerations(x, F, {});
    const auto [ra, rb] = cartpole_reference(x, F, {});
    EXPECT_NEAR(a, ra, 1e-10);
    EXPECT_NEAR(b, rb, 1e-10);
  }
}

TEST(CartpoleParams, RejectsNonPositive)
{
  EXPECT_THROW((CartpoleParams{0.0, 0.1, 0.5, 9.8}.validate()), std::invalid_argument);
  EXPECT_THROW((CartpoleParams{1.0, 0.1, -0.5, 9.8}.validate()), std::invalid_argument);
}

TEST(DiscretizeRk4, KeepsEquilibrium)
{
  const auto model = cartpole_model({});
  EXPECT_EQ(model.step(VectorXd::Zero(4), VectorXd::Zero(1)), VectorXd::Zero(4));
}

TEST(DiscretizeRk4, CartpoleRateIsFifteenHertz) { EXPECT_DOUBLE_EQ(cartpole_model({}).dt(), 1.0 / 15.0); }

TEST(DiscretizeRk4, ExponentialDecay)
{
  const auto model = discretize_rk4([](const VectorXd & x, const VectorXd &) -> VectorXd { return -x; }, 1, 1, 0.1);
  const double h = 0.1;
  const double poly = 1 - h + h * h / 2 - h * h * h / 6 + h * h * h * h / 24;
  const double next = model.step(vec({1.0}), vec({0.0}))(0);
  EXPECT_NEAR(next, poly, 1e-15);
  EXPECT_LE(std::abs(next - std::exp(-h)), 1e-7);
}

TEST(DiscretizeRk4, RejectsNonPositiveStep)
{
  EXPECT_THROW(discretize_rk4([](const VectorXd & x, const VectorXd &) -> VectorXd { return x; }, 1, 1, 0.0), std::invalid_argument);
}

TEST(QuadrotorModel, UnitInputResponse)
{
  const auto model = quadrotor_linear_model();
  const VectorXd next = model.step(VectorXd::Zero(2), vec({1.0}));
  EXPECT_DOUBLE_EQ(next(0), 0.0231);
  EXPECT_DOUBLE_EQ(next(1), 0.2854);
}

TEST(QuadrotorModel, UnitPositionResponse)
{
  const VectorXd next = quadrotor_linear_model().step(vec({1.0, 0.0}), vec({0.0}));
  EXPECT_DOUBLE_EQ(next(0), 0.9756);
  EXPECT_DOUBLE_EQ(next(1), -0.2793);
}

TEST(QuadrotorModel, OriginAndRate)
{
  const auto model = quadrotor_linear_model();
  EXPECT_EQ(model.step(VectorXd::Zero(2), VectorXd::Zero(1)), VectorXd::Zero(2));
  EXPECT_EQ(model.state_dim(), 2);
  EXPECT_EQ(model.input_dim(), 1);
  EXPECT_DOUBLE_EQ(model.dt(), 0.04);
  EXPECT_TRUE(model.is_linear());
}

TEST(EstimateWMax, PerfectModelGivesZero)
{
  const auto model = cartpole_model({});
  std::vector<Transition> data;
  VectorXd x = vec({0.1, 0, 0.05, 0});
  for (int k = 0; k < 20; ++k) {
    const VectorXd u  = vec({std::sin(k * 0.3)});
    const VectorXd xn = model.step(x, u);
    data.push_back({x, u, xn});
    x = xn;
  }
  EXPECT_EQ(estimate_w_max(data, model).w_max, 0.0);
}

TEST(EstimateWMax, SingleResidual)
{
  const auto model = quadrotor_linear_model();
  const std::vector<Transition> data{{VectorXd::Zero(2), VectorXd::Zero(1), vec({0.02, 0.02})}};
  EXPECT_NEAR(estimate_w_max(data, model).w_max, 0.028284, 1e-6);
}

TEST(EstimateWMax, EmptyDataIsAnError)
{
  try {
    estimate_w_max(std::vector<Transition>{}, quadrotor_linear_model());
    FAIL();
  } catch (const std::invalid_argument & e) {
    EXPECT_STREQ(e.what(), "no data");
  }
}

TEST(EstimateWMax, ReferenceBoundsAreRepresentable)
{
  EXPECT_EQ(UncertaintyBound(0.0014).w_max, 0.0014);
  EXPECT_EQ(UncertaintyBound(0.0449).w_max, 0.0449);
  EXPECT_THROW(UncertaintyBound(-1e-3), std::invalid_argument);
}

TEST(DisturbedStep, ZeroBoundMatchesNominal)
{
  const auto model = cartpole_model({});
  const VectorXd x = vec({0.1, -0.2, 0.05, 0.3}), u = vec({1.5});
  EXPECT_EQ(disturbed_step(model, x, u, UncertaintyBound(0.0), 9), model.step(x, u));
}

TEST(DisturbedStep, StaysInBall)
{
  const auto model = quadrotor_linear_model();
  const VectorXd x = vec({0.3, 0.1}), u = vec({0.2});
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    EXPECT_LE((disturbed_step(model, x, u, UncertaintyBound(0.0449), seed) - model.step(x, u)).norm(), 0.0449 * (1 + 1e-12));
  }
}

TEST(DisturbedStep, DeterministicPerSeed)
{
  const auto model = quadrotor_linear_model();
  const VectorXd x = vec({0.3, 0.1}), u = vec({0.2});
  EXPECT_EQ(disturbed_step(model, x, u, UncertaintyBound(0.1), 42), disturbed_step(model, x, u, UncertaintyBound(0.1), 42));
  EXPECT_NE(disturbed_step(model, x, u, UncertaintyBound(0.1), 42), disturbed_step(model, x, u, UncertaintyBound(0.1), 43));
}

TEST(DynamicsProperty, JacobiansMatchFiniteDifferences)
{
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  const auto cart = cartpole_model({});
  const auto quad = quadrotor_linear_model();
  for (int s = 0; s < 100; ++s) {
    expect_jacobians_match(cart, vec({d(rng), d(rng), 0.5 * d(rng), d(rng)}), vec({10 * d(rng)}));
    expect_jacobians_match(quad, vec({d(rng), d(rng)}), vec({d(rng)}));
  }
}

TEST(DynamicsProperty, DisturbanceNeverExceedsBound)
{
  for (auto mode : {DisturbanceMode::Uniform, DisturbanceMode::Boundary}) {
    DisturbanceSampler sampler(UncertaintyBound(0.0014), 5, mode);
    for (int s = 0; s < 10000; ++s) {
      const double r = sampler.sample(4).norm();
      EXPECT_LE(r, 0.0014 * (1 + 1e-12));
      if (mode == DisturbanceMode::Boundary) { EXPECT_NEAR(r, 0.0014, 1e-15); }
    }
  }
}

TEST(DynamicsProperty, EstimatedBoundNeverExceedsTrueBound)
{
  const auto model = cartpole_model({});
  DisturbanceSampler sampler(UncertaintyBound(0.0014), 21);
  std::vector<Transition> data;
  VectorXd x = VectorXd::Zero(4);
  for (int k = 0; k < 300; ++k) {
    const VectorXd u  = vec({2.0 * std::sin(0.2 * k)});
    const VectorXd xn = disturbed_step(model, x, u, sampler);
    data.push_back({x, u, xn});
    x = xn;
  }
  const double w = estimate_w_max(data, model).w_max;
  EXPECT_LE(w, 0.0014 * (1 + 1e-9));
  EXPECT_GT(w, 0.0);
}
