#include <gtest/gtest.h>

#include <mpsf/filter.hpp>

#include <cmath>
#include <random>

using namespace mpsf;

namespace {

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }
VectorXd vec2(double a, double b) { return (VectorXd(2) << a, b).finished(); }

constexpr double kW = 0.001;

ConstraintBoxes quadrotor_boxes()
{
  ConstraintBoxes b;
  b.x_lb = vec2(-0.75, -0.5);
  b.x_ub = -b.x_lb;
  b.u_lb = VectorXd::Constant(1, -kInf);
  b.u_ub = VectorXd::Constant(1, kInf);
  b.mixed.push_back({(Eigen::RowVectorXd(2) << -1.0, 0.0).finished(), Eigen::RowVectorXd::Ones(1), -0.25, 0.25});
  return b;
}

LqrGain quadrotor_gain() { return solve_dare(quadrotor_linear_matrices(), MatrixXd::Identity(2, 2), scalar(10.0)); }

RobustDesign quadrotor_design()
{
  TerminalOptions opt;
  opt.tightening = Tightening::Support;
  return make_design(quadrotor_linear_model(), quadrotor_boxes(), UncertaintyBound(kW), quadrotor_gain(), 10, opt);
}

Policy zero_lqr(const LqrGain & g) { return lqr_policy(g, constant_reference(VectorXd::Zero(2), VectorXd::Zero(1))); }

Policy push_right()
{
  return aggressive_policy({quadrotor_gain(), vec2(2.0, 0.0), VectorXd::Constant(1, 2.0), 3.0});
}

// Pre-stabilized coordinates of a certified plan: v_i = u_i + K x_i.
VectorXd to_v(const opt::Rollout & r, const MatrixXd & K)
{
  const auto H = r.U.cols();
  VectorXd v(H);
  for (Eigen::Index i = 0; i < H; ++i) { v(i) = r.U(0, i) + (K * r.X.col(i))(0); }
  return v;
}

}  // namespace

TEST(PredictUncertified, EquilibriumStaysAtZero)
{
  const auto p = predict_uncertified(zero_lqr(quadrotor_gain()), quadrotor_linear_model(), VectorXd::Zero(2), 5);
  EXPECT_EQ(p.states, MatrixXd::Zero(2, 6));
  EXPECT_EQ(p.inputs, MatrixXd::Zero(1, 5));
}

TEST(PredictUncertified, SingleStepIsPolicyOutput)
{
  const auto pi = push_right();
  const VectorXd x = vec2(0.3, -0.1);
  const auto p  = predict_uncertified(pi, quadrotor_linear_model(), x, 1);
  ASSERT_EQ(p.inputs.cols(), 1);
  EXPECT_EQ(p.inputs.col(0), pi(x));
  EXPECT_EQ(p.states.col(0), x);
}

TEST(PredictUncertified, HandRolloutOfThreeSteps)
{
  MatrixXd K(1, 2);
  K << 0.618, 0.1;
  const auto pi = zero_lqr({K, MatrixXd::Identity(2, 2)});
  const auto p  = predict_uncertified(pi, quadrotor_linear_model(), vec2(1.0, 0.0), 3);
  EXPECT_NEAR(p.inputs(0, 0), -0.618, 1e-15);
  EXPECT_NEAR(p.inputs(0, 1), -0.5485306356, 1e-12);
  EXPECT_NEAR(p.inputs(0, 2), -0.48229257958411753, 1e-12);
  EXPECT_NEAR(p.states(0, 1), 0.9613242, 1e-12);
  EXPECT_NEAR(p.states(1, 1), -0.4556772, 1e-12);
  EXPECT_NEAR(p.states(0, 3), 0.8553613267396757, 1e-12);
  EXPECT_NEAR(p.states(1, 3), -1.0871236366218229, 1e-12);
}

TEST(PredictUncertified, RejectsEmptyHorizon)
{
  EXPECT_THROW(predict_uncertified(push_right(), quadrotor_linear_model(), VectorXd::Zero(2), 0), std::invalid_argument);
}

TEST(Weight, GeometricDecay)
{
  const auto spec = FilterSpec::multi_step(10, 10, 1);
  EXPECT_EQ(weight(spec, 0), 1.0);
  EXPECT_DOUBLE_EQ(weight(spec, 1), 0.85);
  EXPECT_NEAR(weight(spec, 5), 0.4437, 1e-4);
}

TEST(FilterSpec, Validation)
{
  EXPECT_THROW(FilterSpec::multi_step(11, 10, 1).validate(1), std::invalid_argument);
  EXPECT_THROW(FilterSpec::regularized(0, 10, 1).validate(1), std::invalid_argument);
  auto s  = FilterSpec::one_step(10, 1);
  s.gamma = 0.0;
  EXPECT_THROW(s.validate(1), std::invalid_argument);
  EXPECT_EQ(variant_name(FilterSpec::multi_step(5, 10, 1)), "multi_step_5");
  EXPECT_EQ(variant_name(FilterSpec::regularized(10, 10, 1)), "regularized_10");
}

TEST(FilterObjective, RegularizedPenalizesRates)
{
  auto spec = FilterSpec::regularized(3, 4, 1);
  PredictedPlan plan{MatrixXd::Zero(2, 2), MatrixXd::Zero(1, 1)};
  const auto J = filter_objective(spec, plan, VectorXd::Constant(1, 1.0), VectorXd::Constant(1, 0.5));
  // u = (1, 1, 1, 0): |1 - 1|^2 + |1 - 0.5|^2 + 0.85 |0|^2 + 0.85^2 |0|^2
  const VectorXd u = (VectorXd(4) << 1, 1, 1, 0).finished();
  EXPECT_NEAR(J.value(u), 0.25, 1e-12);
  const VectorXd u2 = (VectorXd(4) << 1, 2, 2, 7).finished();
  EXPECT_NEAR(J.value(u2), 0.25 + 0.85, 1e-12);
}

TEST(FilterObjective, MultiStepTracksPredictedInputs)
{
  auto spec = FilterSpec::multi_step(3, 4, 1);
  PredictedPlan plan{MatrixXd::Zero(2, 4), (MatrixXd(1, 3) << 1, 2, 3).finished()};
  const auto J = filter_objective(spec, plan, VectorXd::Constant(1, 1.0), VectorXd::Zero(1));
  EXPECT_NEAR(J.value((VectorXd(4) << 1, 2, 3, 9).finished()), 0.0, 1e-12);
  EXPECT_NEAR(J.value((VectorXd(4) << 1, 2, 4, 9).finished()), 0.85 * 0.85, 1e-12);
}

TEST(Certify, DeepInteriorPassesThrough)
{
  SafetyFilter f(FilterSpec::one_step(10, 1), quadrotor_design());
  const auto pi  = zero_lqr(quadrotor_gain());
  const auto res = f.filter(pi, VectorXd::Zero(2), 0);
  EXPECT_EQ(res.status, CertStatus::Certified);
  EXPECT_NEAR(res.u_cert(0), 0.0, 1e-6);
  EXPECT_LE(res.correction.norm(), 1e-6);
}

TEST(Certify, MultiStepOfOneMatchesOneStep)
{
  const auto design = quadrotor_design();
  const auto pi     = push_right();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> px(-0.6, 0.6), pv(-0.35, 0.35);
  int compared = 0;
  for (int s = 0; s < 1000 && compared < 100; ++s) {
    const VectorXd x = vec2(px(rng), pv(rng));
    SafetyFilter a(FilterSpec::one_step(10, 1), design), b(FilterSpec::multi_step(1, 10, 1), design);
    try {
      const auto ra = a.filter(pi, x, 0);
      const auto rb = b.filter(pi, x, 0);
      EXPECT_NEAR(ra.u_cert(0), rb.u_cert(0), 1e-6);
      ++compared;
    } catch (const InfeasibleStart &) {
      EXPECT_THROW(b.filter(pi, x, 0), InfeasibleStart);
    }
  }
  EXPECT_EQ(compared, 100);
}

TEST(Certify, AggressivePolicyIsCorrectedAndKeptSafe)
{
  const auto design = quadrotor_design();
  const auto pi     = push_right();
  const auto model  = quadrotor_linear_model();
  DisturbanceSampler sampler(UncertaintyBound(kW), 3);
  for (auto spec : {FilterSpec::one_step(10, 1), FilterSpec::multi_step(10, 10, 1), FilterSpec::regularized(10, 10, 1)}) {
    SafetyFilter f(spec, design);
    VectorXd x       = VectorXd::Zero(2);
    int modified     = 0;
    double max_x     = -kInf;
    for (long k = 0; k < 500; ++k) {
      const auto res = f.filter(pi, x, k);
      if (std::abs(res.u_cert(0) - pi(x, k)(0)) > 1e-6) { ++modified; }
      ASSERT_TRUE(design.boxes.admits_input(x, res.u_cert)) << "step " << k;
      x = disturbed_step(model, x, res.u_cert, sampler);
      max_x = std::max(max_x, x(0));
      ASSERT_TRUE(design.boxes.contains_state(x)) << "step " << k;
    }
    EXPECT_GT(modified, 0);
    EXPECT_LE(max_x, 0.75);
  }
}

TEST(Certify, InfeasibleStartIsReported)
{
  SafetyFilter f(FilterSpec::one_step(10, 1), quadrotor_design());
  try {
    f.filter(push_right(), vec2(0.74, 0.49), 0);
    FAIL();
  } catch (const InfeasibleStart & e) {
    EXPECT_STREQ(e.what(), "initial state infeasible");
  }
}

TEST(FilterProperty, MinimalInterventionOnInteriorStates)
{
  const auto design = quadrotor_design();
  const auto pi     = zero_lqr(quadrotor_gain());
  const auto & T    = design.terminal;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u01;
  const MatrixXd U = Eigen::LLT<MatrixXd>(T.P).matrixU();
  for (int s = 0; s < 100; ++s) {
    VectorXd y = vec2(n01(rng), n01(rng)).normalized() * std::sqrt(u01(rng)) * std::sqrt(T.alpha);
    const VectorXd x = U.triangularView<Eigen::Upper>().solve(y);
    for (auto spec : {FilterSpec::one_step(10, 1), FilterSpec::multi_step(10, 10, 1)}) {
      SafetyFilter f(spec, design);
      const auto res = f.filter(pi, x, 0);
      ASSERT_EQ(res.status, CertStatus::Certified);
      EXPECT_NEAR(res.u_cert(0), pi(x)(0), 1e-6);
    }
  }
}

TEST(FilterProperty, ShiftedPlanStaysFeasibleUnderDisturbance)
{
  const auto design = quadrotor_design();
  const auto model  = quadrotor_linear_model();
  const auto pi     = push_right();
  SafetyFilter f(FilterSpec::multi_step(5, 10, 1), design);
  VectorXd x = vec2(0.2, 0.1);
  DisturbanceSampler walk(UncertaintyBound(kW), 17);
  std::mt19937_64 rng(23);
  for (long k = 0; k < 20; ++k) {
    const auto res = f.filter(pi, x, k);
    ASSERT_EQ(res.status, CertStatus::Certified);
    const VectorXd v = to_v(res.plan, design.tube.K);
    VectorXd shifted(10);
    shifted.head(9) = v.tail(9);
    shifted(9)      = 0.0;  // terminal controller u = -K x
    for (int d = 0; d < 1000 / 20; ++d) {
      DisturbanceSampler s(UncertaintyBound(kW), rng(), d % 2 == 0 ? DisturbanceMode::Boundary : DisturbanceMode::Uniform);
      const VectorXd xn   = disturbed_step(model, x, res.u_cert, s);
      const auto prog     = design.program(xn);
      const auto rollout  = opt::simulate(prog, shifted);
      EXPECT_LE(opt::max_violation(prog, rollout, VectorXd(0)), 1e-9);
      EXPECT_TRUE(design.boxes.admits_input(xn, rollout.U.col(0), 1e-9));
    }
    x = disturbed_step(model, x, res.u_cert, walk);
  }
}
