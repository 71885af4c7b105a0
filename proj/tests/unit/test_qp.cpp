#include <gtest/gtest.h>

#include <mpsf/qp.hpp>

#include <random>

using namespace mpsf::opt;

namespace {

// Brute-force reference: try every assignment of {free, lower, upper} to the rows,
// solve the equality-constrained problem, keep the best primal-feasible point.
VectorXd enumerate_active_sets(const DenseQp & qp)
{
  const Index d = qp.num_variables();
  const Index p = qp.num_constraints();
  long total = 1;
  for (Index i = 0; i < p; ++i) { total *= 3; }

  VectorXd best;
  double best_obj = kInf;
  for (long code = 0; code < total; ++code) {
    std::vector<std::pair<Index, double>> rows;
    long c = code;
    bool skip = false;
    for (Index i = 0; i < p; ++i) {
      const int s = static_cast<int>(c % 3);
      c /= 3;
      if (s == 1) {
        if (!std::isfinite(qp.lb(i))) { skip = true; }
        rows.emplace_back(i, qp.lb(i));
      } else if (s == 2) {
        if (!std::isfinite(qp.ub(i))) { skip = true; }
        rows.emplace_back(i, qp.ub(i));
      }
    }
    if (skip || static_cast<Index>(rows.size()) > d) { continue; }
    const Index na = static_cast<Index>(rows.size());
    MatrixXd K = MatrixXd::Zero(d + na, d + na);
    VectorXd rhs(d + na);
    K.topLeftCorner(d, d) = qp.H;
    rhs.head(d) = -qp.g;
    for (Index k = 0; k < na; ++k) {
      K.block(d + k, 0, 1, d) = qp.C.row(rows[k].first);
      K.block(0, d + k, d, 1) = qp.C.row(rows[k].first).transpose();
      rhs(d + k) = rows[k].second;
    }
    Eigen::FullPivLU<MatrixXd> lu(K);
    if (!lu.isInvertible()) { continue; }
    const VectorXd z = lu.solve(rhs).head(d);
    const VectorXd Cz = qp.C * z;
    bool feasible = true;
    for (Index i = 0; i < p; ++i) {
      if (Cz(i) < qp.lb(i) - 1e-9 || Cz(i) > qp.ub(i) + 1e-9) { feasible = false; }
    }
    if (!feasible) { continue; }
    const double obj = qp.objective(z);
    if (obj < best_obj) {
      best_obj = obj;
      best = z;
    }
  }
  return best;
}

DenseQp random_qp(std::mt19937_64 & rng)
{
  std::uniform_int_distribution<int> dim(1, 6), rows(0, 8);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int d = dim(rng), p = rows(rng);
  DenseQp qp;
  MatrixXd M(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) { M(i, j) = n01(rng); }
  }
  qp.H = M * M.transpose() + 0.1 * MatrixXd::Identity(d, d);
  qp.g.resize(d);
  for (int i = 0; i < d; ++i) { qp.g(i) = 3.0 * n01(rng); }
  qp.C.resize(p, d);
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < d; ++j) { qp.C(i, j) = n01(rng); }
  }
  VectorXd z0(d);
  for (int i = 0; i < d; ++i) { z0(i) = 0.5 * n01(rng); }
  const VectorXd c0 = qp.C * z0;
  qp.lb.resize(p);
  qp.ub.resize(p);
  for (int i = 0; i < p; ++i) {
    qp.lb(i) = u01(rng) < 0.2 ? -kInf : c0(i) - u01(rng);
    qp.ub(i) = u01(rng) < 0.2 ? kInf : c0(i) + u01(rng);
  }
  return qp;
}

}  // namespace

TEST(Qp, UnconstrainedMinimum)
{
  DenseQp qp{MatrixXd::Identity(2, 2), VectorXd::Constant(2, -1.0), MatrixXd(0, 2), VectorXd(0), VectorXd(0), {}};
  const auto sol = solve_qp(qp);
  EXPECT_EQ(sol.status, QpStatus::Optimal);
  EXPECT_NEAR(sol.z(0), 1.0, 1e-9);
  EXPECT_NEAR(sol.z(1), 1.0, 1e-9);
}

TEST(Qp, ClippedScalar)
{
  DenseQp qp{MatrixXd::Identity(1, 1), VectorXd::Constant(1, -2.0), MatrixXd::Identity(1, 1), VectorXd::Zero(1), VectorXd::Ones(1), {}};
  const auto sol = solve_qp(qp);
  ASSERT_EQ(sol.status, QpStatus::Optimal);
  EXPECT_NEAR(sol.z(0), 1.0, 1e-9);
  EXPECT_NEAR(sol.lambda(0), 1.0, 1e-7);  // upper bound active
  EXPECT_LE(sol.kkt_residual, 1e-6);
}

TEST(Qp, RandomInstancesMatchEnumeration)
{
  std::mt19937_64 rng(20240611);
  for (int trial = 0; trial < 30; ++trial) {
    DenseQp qp = random_qp(rng);
    const VectorXd ref = enumerate_active_sets(qp);
    ASSERT_GT(ref.size(), 0) << "trial " << trial;
    const auto sol = solve_qp(qp);
    ASSERT_EQ(sol.status, QpStatus::Optimal) << "trial " << trial;
    EXPECT_LE(sol.kkt_residual, 1e-6);
    EXPECT_LE((sol.z - ref).lpNorm<Eigen::Infinity>(), 1e-5) << "trial " << trial;
    EXPECT_GE(sol.objective, qp.objective(ref) - 1e-5);
  }
}

TEST(Qp, BallProjection)
{
  DenseQp qp;
  qp.H = MatrixXd::Identity(2, 2);
  qp.g = VectorXd(2);
  qp.g << -3.0, -4.0;
  qp.C = MatrixXd::Identity(2, 2);
  qp.lb = VectorXd::Constant(2, -kInf);
  qp.ub = VectorXd::Constant(2, kInf);
  qp.balls.push_back({0, 2, VectorXd::Zero(2), 1.0});
  const auto sol = solve_qp(qp);
  ASSERT_EQ(sol.status, QpStatus::Optimal);
  EXPECT_NEAR(sol.z(0), 0.6, 1e-7);
  EXPECT_NEAR(sol.z(1), 0.8, 1e-7);
}

TEST(Qp, OffsetBallWithBox)
{
  // min |z|^2 over the unit ball centred at (2, 0), intersected with z1 >= 1.5
  DenseQp qp;
  qp.H = 2.0 * MatrixXd::Identity(2, 2);
  qp.g = VectorXd::Zero(2);
  qp.C = MatrixXd(3, 2);
  qp.C << 1, 0, 0, 1, 1, 0;
  qp.lb = VectorXd(3);
  qp.ub = VectorXd(3);
  qp.lb << -kInf, -kInf, 1.5;
  qp.ub << kInf, kInf, kInf;
  VectorXd c(2);
  c << 2.0, 0.0;
  qp.balls.push_back({0, 2, c, 1.0});
  const auto sol = solve_qp(qp);
  ASSERT_EQ(sol.status, QpStatus::Optimal);
  EXPECT_NEAR(sol.z(0), 1.5, 1e-7);
  EXPECT_NEAR(sol.z(1), 0.0, 1e-7);
}

TEST(Qp, DetectsInfeasibility)
{
  DenseQp qp;
  qp.H = MatrixXd::Identity(1, 1);
  qp.g = VectorXd::Zero(1);
  qp.C = MatrixXd::Ones(2, 1);
  qp.lb = VectorXd(2);
  qp.ub = VectorXd(2);
  qp.lb << -kInf, 1.0;
  qp.ub << -1.0, kInf;
  EXPECT_EQ(solve_qp(qp).status, QpStatus::Infeasible);
}

TEST(Qp, DetectsBallInfeasibility)
{
  DenseQp qp;
  qp.H = MatrixXd::Identity(2, 2);
  qp.g = VectorXd::Zero(2);
  qp.C = MatrixXd(3, 2);
  qp.C << 1, 0, 0, 1, 1, 0;
  qp.lb = VectorXd(3);
  qp.ub = VectorXd(3);
  qp.lb << -kInf, -kInf, 2.0;
  qp.ub << kInf, kInf, kInf;
  qp.balls.push_back({0, 2, VectorXd::Zero(2), 1.0});
  EXPECT_EQ(solve_qp(qp).status, QpStatus::Infeasible);
}

TEST(Qp, RejectsMalformed)
{
  DenseQp qp{MatrixXd::Identity(2, 2), VectorXd::Zero(2), MatrixXd::Identity(1, 2), VectorXd::Ones(1), VectorXd::Zero(1), {}};
  EXPECT_THROW(solve_qp(qp), std::invalid_argument);
}

TEST(Qp, DeterministicAndWarmStarted)
{
  std::mt19937_64 rng(7);
  DenseQp qp = random_qp(rng);
  QpSolver a, b;
  const auto s1 = a.solve(qp);
  const auto s2 = b.solve(qp);
  EXPECT_EQ(s1.iterations, s2.iterations);
  EXPECT_EQ(s1.z, s2.z);

  const auto s3 = a.solve(qp, QpWarmStart{s1.z, s1.lambda});
  EXPECT_EQ(s3.status, QpStatus::Optimal);
  EXPECT_LE(s3.iterations, s1.iterations);
  EXPECT_LE((s3.z - s1.z).norm(), 1e-6);
}
