#pragma once

/**
 * @file
 * @brief Dense convex quadratic programs solved by operator splitting (ADMM).
 *
 * Problem form
 *
 *   minimize    1/2 z' H z + g' z
 *   subject to  lb <= C z <= ub                  (box rows)
 *               |C_b z - center_b|_2 <= radius_b (ball blocks, a contiguous set of rows)
 *
 * The iteration follows the splitting used by OSQP: Ruiz equilibration, a cached
 * factorization of H + sigma I + C' diag(rho) C, over-relaxation, adaptive rho and
 * an infeasibility certificate from successive dual differences. Converged iterates
 * are polished by solving the equality-constrained KKT system of the detected
 * active set.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace mpsf::opt {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Rows [offset, offset + size) of C must lie in a Euclidean ball.
struct BallBlock
{
  Index offset = 0;
  Index size   = 0;
  VectorXd center;
  double radius = 0.0;
};

struct DenseQp
{
  MatrixXd H;
  VectorXd g;
  MatrixXd C;
  VectorXd lb;
  VectorXd ub;
  /// Rows covered by a ball block ignore lb/ub.
  std::vector<BallBlock> balls;

  Index num_variables() const { return g.size(); }
  Index num_constraints() const { return C.rows(); }

  /// Throws std::invalid_argument on inconsistent data; symmetrizes H.
  void validate_and_symmetrize()
  {
    const Index d = g.size();
    if (H.rows() != d || H.cols() != d) { throw std::invalid_argument("DenseQp: H must be d x d"); }
    if (C.cols() != d && C.rows() > 0) { throw std::invalid_argument("DenseQp: C must have d columns"); }
    if (C.rows() == 0) { C.resize(0, d); }
    if (lb.size() != C.rows() || ub.size() != C.rows()) { throw std::invalid_argument("DenseQp: bounds must match C rows"); }
    for (Index i = 0; i < lb.size(); ++i) {
      if (!(lb(i) <= ub(i))) { throw std::invalid_argument("DenseQp: lb > ub"); }
    }
    for (const auto & b : balls) {
      if (b.offset < 0 || b.size <= 0 || b.offset + b.size > C.rows() || b.center.size() != b.size || !(b.radius >= 0)) {
        throw std::invalid_argument("DenseQp: malformed ball block");
      }
    }
    H = 0.5 * (H + H.transpose()).eval();
  }

  double objective(const VectorXd & z) const { return 0.5 * z.dot(H * z) + g.dot(z); }
};

enum class QpStatus { Optimal, Infeasible, MaxIter };

inline std::string_view to_string(QpStatus s)
{
  switch (s) {
  case QpStatus::Optimal: return "optimal";
  case QpStatus::Infeasible: return "infeasible";
  case QpStatus::MaxIter: return "max_iter";
  }
  return "unknown";
}

struct QpSolution
{
  VectorXd z;
  VectorXd lambda;
  QpStatus status     = QpStatus::MaxIter;
  double kkt_residual = kInf;
  int iterations      = 0;
  bool polished       = false;
  double objective    = kInf;
};

struct QpSettings
{
  double rho   = 0.1;
  double sigma = 1e-6;
  double alpha = 1.6;

  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  /// primal infeasibility certificate tolerance
  double eps_primal_inf = 1e-8;
  /// Optimal is only reported when the KKT residual is at most this value.
  double kkt_tolerance = 1e-6;

  int max_iter       = 20000;
  int check_interval = 10;
  int adapt_interval = 50;
  bool adaptive_rho  = true;

  bool scaling        = true;
  int scaling_iter    = 10;
  bool polish         = true;
  double polish_delta = 1e-9;
  int polish_newton   = 30;
  int polish_passes   = 4;
  /// Polish is also tried once both residuals fall below this, unscaled.
  double polish_trigger = 1e-3;
};

struct QpWarmStart
{
  VectorXd z;
  VectorXd lambda;
};

namespace detail {

/// Row-to-ball map: -1 for box rows, else index into balls.
inline std::vector<int> ball_membership(const DenseQp & qp)
{
  std::vector<int> owner(static_cast<std::size_t>(qp.C.rows()), -1);
  for (std::size_t b = 0; b < qp.balls.size(); ++b) {
    for (Index i = 0; i < qp.balls[b].size; ++i) { owner[static_cast<std::size_t>(qp.balls[b].offset + i)] = static_cast<int>(b); }
  }
  return owner;
}

}  // namespace detail

/**
 * @brief KKT residual of a primal-dual pair.
 *
 * Maximum of stationarity |Hz + g + C'lambda|_inf, primal infeasibility, and
 * complementarity. Sign convention: lambda_i >= 0 on active upper bounds,
 * lambda_i <= 0 on active lower bounds, and lambda_b = mu (y_b - c_b)/|y_b - c_b|
 * with mu >= 0 on an active ball.
 */
inline double kkt_residual(const DenseQp & qp, const VectorXd & z, const VectorXd & lambda)
{
  const VectorXd Cz = qp.C * z;
  double res = (qp.H * z + qp.g + qp.C.transpose() * lambda).lpNorm<Eigen::Infinity>();
  const auto owner = detail::ball_membership(qp);

  for (Index i = 0; i < qp.C.rows(); ++i) {
    if (owner[static_cast<std::size_t>(i)] >= 0) { continue; }
    res = std::max(res, std::max({qp.lb(i) - Cz(i), Cz(i) - qp.ub(i), 0.0}));
    const double l = lambda(i);
    if (l > 0) {
      res = std::max(res, std::isfinite(qp.ub(i)) ? std::min(l, std::abs(qp.ub(i) - Cz(i))) : l);
    } else if (l < 0) {
      res = std::max(res, std::isfinite(qp.lb(i)) ? std::min(-l, std::abs(Cz(i) - qp.lb(i))) : -l);
    }
  }
  for (const auto & b : qp.balls) {
    const VectorXd y  = Cz.segment(b.offset, b.size) - b.center;
    const VectorXd lb = lambda.segment(b.offset, b.size);
    const double ny   = y.norm();
    res               = std::max(res, std::max(ny - b.radius, 0.0));
    const double nl   = lb.norm();
    if (nl == 0.0) { continue; }
    if (ny == 0.0) {
      res = std::max(res, nl);
      continue;
    }
    const VectorXd dir = y / ny;
    const double mu    = std::max(0.0, lb.dot(dir));
    res                = std::max(res, (lb - mu * dir).lpNorm<Eigen::Infinity>());
    res                = std::max(res, std::min(mu, std::abs(b.radius - ny)));
  }
  return res;
}

/**
 * @brief ADMM solver with preallocated workspace.
 *
 * One instance per thread; the workspace is reused across solves of equal size.
 */
class QpSolver
{
public:
  explicit QpSolver(QpSettings settings = {}) : prm_(settings) {}

  const QpSettings & settings() const { return prm_; }
  QpSettings & settings() { return prm_; }

  QpSolution solve(DenseQp qp, const std::optional<QpWarmStart> & warm = std::nullopt)
  {
    qp.validate_and_symmetrize();
    setup(qp);
    return iterate(qp, warm);
  }

private:
  void setup(const DenseQp & qp)
  {
    d_ = qp.num_variables();
    p_ = qp.num_constraints();
    owner_ = detail::ball_membership(qp);

    D_.setOnes(d_);
    E_.setOnes(p_);
    c_ = 1.0;
    if (prm_.scaling) { ruiz(qp); }

    Hs_ = c_ * D_.asDiagonal() * qp.H * D_.asDiagonal();
    gs_ = c_ * D_.cwiseProduct(qp.g);
    Cs_ = E_.asDiagonal() * qp.C * D_.asDiagonal();
    ls_.resize(p_);
    us_.resize(p_);
    for (Index i = 0; i < p_; ++i) {
      ls_(i) = std::isfinite(qp.lb(i)) ? E_(i) * qp.lb(i) : -kInf;
      us_(i) = std::isfinite(qp.ub(i)) ? E_(i) * qp.ub(i) : kInf;
    }
    balls_ = qp.balls;
    for (auto & b : balls_) {
      const double e = E_(b.offset);
      b.center *= e;
      b.radius *= e;
    }

    rho_vec_.resize(p_);
    rho_ = prm_.rho;
    set_rho_vector();
  }

  void ruiz(const DenseQp & qp)
  {
    MatrixXd H = qp.H;
    MatrixXd C = qp.C;
    VectorXd g = qp.g;
    VectorXd dD(d_), dE(p_);
    for (int it = 0; it < prm_.scaling_iter; ++it) {
      for (Index j = 0; j < d_; ++j) {
        double nrm = H.col(j).lpNorm<Eigen::Infinity>();
        if (p_ > 0) { nrm = std::max(nrm, C.col(j).lpNorm<Eigen::Infinity>()); }
        dD(j) = nrm < 1e-4 ? 1.0 : 1.0 / std::sqrt(std::min(nrm, 1e4));
      }
      for (Index i = 0; i < p_; ++i) {
        const double nrm = C.row(i).lpNorm<Eigen::Infinity>();
        dE(i)            = nrm < 1e-4 ? 1.0 : 1.0 / std::sqrt(std::min(nrm, 1e4));
      }
      // a ball block keeps its shape only under a uniform row scaling
      for (const auto & b : qp.balls) {
        const double s = dE.segment(b.offset, b.size).minCoeff();
        dE.segment(b.offset, b.size).setConstant(s);
      }
      H = dD.asDiagonal() * H * dD.asDiagonal();
      C = dE.asDiagonal() * C * dD.asDiagonal();
      g = dD.cwiseProduct(g);
      D_ = D_.cwiseProduct(dD);
      E_ = E_.cwiseProduct(dE);

      double mean_col = 0.0;
      for (Index j = 0; j < d_; ++j) { mean_col += H.col(j).lpNorm<Eigen::Infinity>(); }
      mean_col /= std::max<Index>(d_, 1);
      const double gamma = std::max(mean_col, g.lpNorm<Eigen::Infinity>());
      const double cs    = gamma < 1e-4 ? 1.0 : 1.0 / std::min(gamma, 1e4);
      H *= cs;
      g *= cs;
      c_ *= cs;
    }
  }

  void set_rho_vector()
  {
    for (Index i = 0; i < p_; ++i) {
      const bool eq = owner_[static_cast<std::size_t>(i)] < 0 && us_(i) - ls_(i) < 1e-12;
      const bool free_row = owner_[static_cast<std::size_t>(i)] < 0 && !std::isfinite(ls_(i)) && !std::isfinite(us_(i));
      rho_vec_(i) = free_row ? 1e-6 : (eq ? 1e3 * rho_ : rho_);
    }
    factor();
  }

  void factor()
  {
    K_ = Hs_;
    K_.diagonal().array() += prm_.sigma;
    if (p_ > 0) { K_.noalias() += Cs_.transpose() * rho_vec_.asDiagonal() * Cs_; }
    llt_.compute(K_);
  }

  void project(VectorXd & y) const
  {
    for (Index i = 0; i < p_; ++i) {
      if (owner_[static_cast<std::size_t>(i)] < 0) { y(i) = std::clamp(y(i), ls_(i), us_(i)); }
    }
    for (const auto & b : balls_) {
      auto seg         = y.segment(b.offset, b.size);
      const VectorXd r = seg - b.center;
      const double nr  = r.norm();
      if (nr > b.radius) { seg = b.center + r * (b.radius / nr); }
    }
  }

  QpSolution unscale(const DenseQp & qp, const VectorXd & zs, const VectorXd & lams) const
  {
    QpSolution sol;
    sol.z      = D_.cwiseProduct(zs);
    sol.lambda = E_.cwiseProduct(lams) / c_;
    sol.kkt_residual = kkt_residual(qp, sol.z, sol.lambda);
    sol.objective    = qp.objective(sol.z);
    return sol;
  }

  bool primal_infeasible(const DenseQp & qp, const VectorXd & dlam) const
  {
    VectorXd v = E_.cwiseProduct(dlam);
    // components pushing against an infinite bound carry no certificate
    for (Index i = 0; i < p_; ++i) {
      if (owner_[static_cast<std::size_t>(i)] >= 0) { continue; }
      if (v(i) > 0 && !std::isfinite(qp.ub(i))) { v(i) = 0; }
      if (v(i) < 0 && !std::isfinite(qp.lb(i))) { v(i) = 0; }
    }
    const double nv = v.lpNorm<Eigen::Infinity>();
    if (nv < 1e-14) { return false; }
    const double ctv = (qp.C.transpose() * v).lpNorm<Eigen::Infinity>();
    if (ctv > prm_.eps_primal_inf * nv) { return false; }
    double support = 0.0;
    for (Index i = 0; i < p_; ++i) {
      if (owner_[static_cast<std::size_t>(i)] >= 0) { continue; }
      if (v(i) > 0) { support += qp.ub(i) * v(i); }
      if (v(i) < 0) { support += qp.lb(i) * v(i); }
    }
    for (const auto & b : qp.balls) {
      const VectorXd vb = v.segment(b.offset, b.size);
      support += b.center.dot(vb) + b.radius * vb.norm();
    }
    return support < -prm_.eps_primal_inf * nv;
  }

  /// Equality-constrained KKT point for a fixed active set, in scaled space.
  ///
  /// Active balls enter as |C_b z - c|^2 = r^2 and are handled by Newton steps. The
  /// Jacobian carries a small proximal regularization so directions left free by the
  /// Hessian and the active rows stay where the ADMM iterate put them.
  bool solve_active_set(
    const std::vector<Index> & rows, const VectorXd & targets, const std::vector<std::size_t> & balls, VectorXd & z, VectorXd & nu, VectorXd & mu) const
  {
    const Index nr = static_cast<Index>(rows.size()), nb = static_cast<Index>(balls.size()), n = d_ + nr + nb;
    const double delta = prm_.polish_delta;
    for (int it = 0; it < prm_.polish_newton; ++it) {
      VectorXd F(n);
      MatrixXd J = MatrixXd::Zero(n, n);
      F.head(d_)                 = Hs_ * z + gs_;
      J.topLeftCorner(d_, d_)    = Hs_;
      for (Index k = 0; k < nr; ++k) {
        const Index i = rows[static_cast<std::size_t>(k)];
        F.head(d_) += nu(k) * Cs_.row(i).transpose();
        F(d_ + k) = Cs_.row(i).dot(z) - targets(k);
        J.block(0, d_ + k, d_, 1) = Cs_.row(i).transpose();
        J.block(d_ + k, 0, 1, d_) = Cs_.row(i);
      }
      for (Index k = 0; k < nb; ++k) {
        const auto & b     = balls_[balls[static_cast<std::size_t>(k)]];
        const auto Cb      = Cs_.middleRows(b.offset, b.size);
        const VectorXd r   = Cb * z - b.center;
        const VectorXd grd = Cb.transpose() * r;
        F.head(d_) += mu(k) * grd;
        F(d_ + nr + k) = 0.5 * (r.squaredNorm() - b.radius * b.radius);
        J.topLeftCorner(d_, d_) += mu(k) * Cb.transpose() * Cb;
        J.block(0, d_ + nr + k, d_, 1) = grd;
        J.block(d_ + nr + k, 0, 1, d_) = grd.transpose();
      }
      if (F.lpNorm<Eigen::Infinity>() <= 1e-13) { return true; }
      J.topLeftCorner(d_, d_).diagonal().array() += delta;
      J.bottomRightCorner(nr + nb, nr + nb).diagonal().array() -= delta;
      const VectorXd step = J.partialPivLu().solve(-F);
      if (!step.allFinite()) { return false; }
      z += step.head(d_);
      nu += step.segment(d_, nr);
      mu += step.tail(nb);
    }
    return z.allFinite();
  }

  /// Polish the ADMM iterate by solving the KKT system of its active set; scaled space.
  std::optional<QpSolution> polish(const DenseQp & qp, const VectorXd & zs, const VectorXd & ys, const VectorXd & lams) const
  {
    // side: 0 inactive, -1 lower, +1 upper, 2 equality
    std::vector<int> side(static_cast<std::size_t>(p_), 0);
    std::vector<char> ball_on(balls_.size(), 0);
    for (Index i = 0; i < p_; ++i) {
      if (owner_[static_cast<std::size_t>(i)] >= 0) { continue; }
      if (us_(i) - ls_(i) < 1e-12) {
        side[static_cast<std::size_t>(i)] = 2;
      } else if (std::isfinite(ls_(i)) && ys(i) - ls_(i) < -lams(i)) {
        side[static_cast<std::size_t>(i)] = -1;
      } else if (std::isfinite(us_(i)) && us_(i) - ys(i) < lams(i)) {
        side[static_cast<std::size_t>(i)] = 1;
      }
    }
    for (std::size_t bi = 0; bi < balls_.size(); ++bi) {
      const auto & b  = balls_[bi];
      const double nr = (ys.segment(b.offset, b.size) - b.center).norm();
      const double nl = lams.segment(b.offset, b.size).norm();
      ball_on[bi]     = nr > 0 && b.radius - nr < nl;
    }

    std::optional<QpSolution> best;
    for (int pass = 0; pass < prm_.polish_passes; ++pass) {
      std::vector<Index> rows;
      std::vector<std::size_t> balls;
      for (Index i = 0; i < p_; ++i) {
        if (side[static_cast<std::size_t>(i)] != 0) { rows.push_back(i); }
      }
      for (std::size_t bi = 0; bi < balls_.size(); ++bi) {
        if (ball_on[bi]) { balls.push_back(bi); }
      }
      VectorXd z = zs, nu(static_cast<Index>(rows.size())), mu(static_cast<Index>(balls.size()));
      VectorXd targets(static_cast<Index>(rows.size()));
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index i             = rows[k];
        nu(static_cast<Index>(k)) = lams(i);
        targets(static_cast<Index>(k)) = side[static_cast<std::size_t>(i)] == -1 ? ls_(i) : us_(i);
      }
      for (std::size_t k = 0; k < balls.size(); ++k) {
        const auto & b   = balls_[balls[k]];
        const VectorXd r = ys.segment(b.offset, b.size) - b.center;
        mu(static_cast<Index>(k)) = std::max(0.0, lams.segment(b.offset, b.size).dot(r)) / std::max(r.squaredNorm(), 1e-300);
      }
      if (!solve_active_set(rows, targets, balls, z, nu, mu)) { break; }

      VectorXd lam = VectorXd::Zero(p_);
      for (std::size_t k = 0; k < rows.size(); ++k) { lam(rows[k]) = nu(static_cast<Index>(k)); }
      for (std::size_t k = 0; k < balls.size(); ++k) {
        const auto & b = balls_[balls[k]];
        lam.segment(b.offset, b.size) = mu(static_cast<Index>(k)) * (Cs_.middleRows(b.offset, b.size) * z - b.center);
      }
      QpSolution out = unscale(qp, z, lam);
      out.polished   = true;
      if (!best || out.kkt_residual < best->kkt_residual) { best = out; }
      if (out.kkt_residual <= prm_.kkt_tolerance) { break; }

      // Adjust the guess: release rows with wrong-sign multipliers, add violated rows.
      bool changed     = false;
      const VectorXd y = Cs_ * z;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = static_cast<std::size_t>(rows[k]);
        const double l = nu(static_cast<Index>(k));
        if ((side[i] == 1 && l < 0) || (side[i] == -1 && l > 0)) {
          side[i] = 0;
          changed = true;
        }
      }
      for (Index i = 0; i < p_; ++i) {
        const auto si = static_cast<std::size_t>(i);
        if (owner_[si] >= 0 || side[si] != 0) { continue; }
        if (y(i) > us_(i)) {
          side[si] = 1;
          changed  = true;
        } else if (y(i) < ls_(i)) {
          side[si] = -1;
          changed  = true;
        }
      }
      for (std::size_t k = 0; k < balls.size(); ++k) {
        if (mu(static_cast<Index>(k)) < 0) {
          ball_on[balls[k]] = 0;
          changed           = true;
        }
      }
      for (std::size_t bi = 0; bi < balls_.size(); ++bi) {
        const auto & b = balls_[bi];
        if (!ball_on[bi] && (y.segment(b.offset, b.size) - b.center).norm() > b.radius) {
          ball_on[bi] = 1;
          changed     = true;
        }
      }
      if (!changed) { break; }
    }
    return best;
  }

  QpSolution iterate(const DenseQp & qp, const std::optional<QpWarmStart> & warm)
  {
    z_.setZero(d_);
    lam_.setZero(p_);
    if (warm && warm->z.size() == d_) { z_ = warm->z.cwiseQuotient(D_); }
    if (warm && warm->lambda.size() == p_) { lam_ = c_ * warm->lambda.cwiseQuotient(E_); }
    y_ = Cs_ * z_;
    project(y_);
    lam_prev_ = lam_;

    QpSolution best;
    best.kkt_residual = kInf;
    int polish_block  = 0;

    for (int iter = 1; iter <= prm_.max_iter; ++iter) {
      rhs_ = prm_.sigma * z_ - gs_;
      if (p_ > 0) { rhs_.noalias() += Cs_.transpose() * (rho_vec_.cwiseProduct(y_) - lam_); }
      zt_ = llt_.solve(rhs_);
      yt_.noalias() = Cs_ * zt_;
      z_ = prm_.alpha * zt_ + (1.0 - prm_.alpha) * z_;
      yh_ = prm_.alpha * yt_ + (1.0 - prm_.alpha) * y_;
      ynew_ = yh_ + lam_.cwiseQuotient(rho_vec_);
      project(ynew_);
      lam_ += rho_vec_.cwiseProduct(yh_ - ynew_);
      y_ = ynew_;

      const bool check = iter % prm_.check_interval == 0 || iter == prm_.max_iter;
      if (!check) {
        if (iter % prm_.check_interval == prm_.check_interval - 1) { lam_prev_ = lam_; }
        continue;
      }

      // residuals in unscaled units
      const VectorXd Cz  = Cs_ * z_;
      const VectorXd Hz  = Hs_ * z_;
      const VectorXd Ctl = Cs_.transpose() * lam_;
      const double prim  = p_ > 0 ? (Cz - y_).cwiseQuotient(E_).lpNorm<Eigen::Infinity>() : 0.0;
      const double dual  = (Hz + gs_ + Ctl).cwiseQuotient(D_).lpNorm<Eigen::Infinity>() / c_;
      const double prim_scale =
        p_ > 0 ? std::max(Cz.cwiseQuotient(E_).lpNorm<Eigen::Infinity>(), y_.cwiseQuotient(E_).lpNorm<Eigen::Infinity>()) : 0.0;
      const double dual_scale = std::max(
                                  {Hz.cwiseQuotient(D_).lpNorm<Eigen::Infinity>(),
                                   Ctl.cwiseQuotient(D_).lpNorm<Eigen::Infinity>(),
                                   gs_.cwiseQuotient(D_).lpNorm<Eigen::Infinity>()})
                                / c_;

      const bool converged = prim <= prm_.eps_abs + prm_.eps_rel * prim_scale && dual <= prm_.eps_abs + prm_.eps_rel * dual_scale;
      const bool near      = prm_.polish && iter >= polish_block && prim <= prm_.polish_trigger * (1.0 + prim_scale)
                        && dual <= prm_.polish_trigger * (1.0 + dual_scale);
      if (converged || near) {
        QpSolution cand = unscale(qp, z_, lam_);
        if (prm_.polish && iter >= polish_block) {
          if (auto pol = polish(qp, z_, y_, lam_); pol && pol->kkt_residual <= std::min(cand.kkt_residual, prm_.kkt_tolerance)) {
            cand = std::move(*pol);
          } else {
            polish_block = iter + 10 * prm_.check_interval;
          }
        }
        cand.iterations = iter;
        if (cand.kkt_residual <= prm_.kkt_tolerance) {
          cand.status = QpStatus::Optimal;
          return cand;
        }
        if (cand.kkt_residual < best.kkt_residual) { best = std::move(cand); }
      }

      if (p_ > 0 && primal_infeasible(qp, lam_ - lam_prev_)) {
        QpSolution inf = unscale(qp, z_, lam_);
        inf.status     = QpStatus::Infeasible;
        inf.iterations = iter;
        return inf;
      }
      lam_prev_ = lam_;

      if (prm_.adaptive_rho && p_ > 0 && iter % prm_.adapt_interval == 0) {
        const double ps  = std::max(Cz.lpNorm<Eigen::Infinity>(), y_.lpNorm<Eigen::Infinity>());
        const double ds  = std::max({Hz.lpNorm<Eigen::Infinity>(), Ctl.lpNorm<Eigen::Infinity>(), gs_.lpNorm<Eigen::Infinity>()});
        const double pr  = (Cz - y_).lpNorm<Eigen::Infinity>() / (ps + 1e-30);
        const double dr  = (Hz + gs_ + Ctl).lpNorm<Eigen::Infinity>() / (ds + 1e-30);
        const double fac = std::sqrt(pr / (dr + 1e-30));
        const double rho_new = std::clamp(rho_ * fac, 1e-6, 1e6);
        if (rho_new > 5.0 * rho_ || rho_new < 0.2 * rho_) {
          rho_ = rho_new;
          set_rho_vector();
        }
      }
    }

    QpSolution last = unscale(qp, z_, lam_);
    if (last.kkt_residual < best.kkt_residual) { best = std::move(last); }
    best.status     = QpStatus::MaxIter;
    best.iterations = prm_.max_iter;
    return best;
  }

  QpSettings prm_;
  Index d_ = 0, p_ = 0;
  std::vector<int> owner_;
  std::vector<BallBlock> balls_;
  VectorXd D_, E_;
  double c_ = 1.0;
  MatrixXd Hs_, Cs_, K_;
  VectorXd gs_, ls_, us_, rho_vec_;
  double rho_ = 0.1;
  Eigen::LLT<MatrixXd> llt_;
  VectorXd z_, y_, lam_, lam_prev_, rhs_, zt_, yt_, yh_, ynew_;
};

/// Convenience wrapper with default settings.
inline QpSolution solve_qp(const DenseQp & qp, const std::optional<VectorXd> & warm_z = std::nullopt)
{
  QpSolver solver;
  std::optional<QpWarmStart> warm;
  if (warm_z) { warm = QpWarmStart{*warm_z, {}}; }
  return solver.solve(qp, warm);
}

}  // namespace mpsf::opt
