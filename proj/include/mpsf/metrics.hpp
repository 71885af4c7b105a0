#pragma once

/**
 * @file
 * @brief Intervention and chattering metrics over a closed-loop log.
 */

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mpsf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// One row per time step.
struct ExperimentLog
{
  double dt = 0.0;
  MatrixXd states;    ///< K x n
  MatrixXd u_uncert;  ///< K x m
  MatrixXd u_cert;    ///< K x m
  MatrixXd applied;   ///< K x m
  VectorXd solve_times;
  std::vector<bool> violations;

  long steps() const { return u_uncert.rows(); }

  void validate() const
  {
    const auto K = steps();
    if (u_cert.rows() != K || applied.rows() != K || (states.size() > 0 && states.rows() != K)) {
      throw std::invalid_argument("log rows disagree");
    }
    if (u_cert.cols() != u_uncert.cols() || applied.cols() != u_uncert.cols()) { throw std::invalid_argument("log input widths disagree"); }
  }
};

/// Unique symmetric PSD square root. Throws for matrices that are not symmetric PSD.
inline MatrixXd psd_sqrt(const MatrixXd & R)
{
  if (R.rows() != R.cols()) { throw std::invalid_argument("R must be square"); }
  if ((R - R.transpose()).norm() > 1e-12 * std::max(1.0, R.norm())) { throw std::invalid_argument("R must be symmetric"); }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(R);
  const double tol = 1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) { throw std::invalid_argument("R must be positive semidefinite"); }
  const VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

/// Rows c_k = R^{1/2} (u_uncert_k - u_cert_k).
inline MatrixXd correction_matrix(const ExperimentLog & log, const MatrixXd & R)
{
  log.validate();
  const MatrixXd S = psd_sqrt(R);
  if (S.rows() != log.u_uncert.cols()) { throw std::invalid_argument("R does not match the input dimension"); }
  return (log.u_uncert - log.u_cert) * S;  // S is symmetric
}

inline double magnitude_of_corrections(const MatrixXd & C) { return C.norm(); }

/// Steps with |c_k| / |u_cert_k|_R >= eps; the denominator is floored at 1e-9.
inline long number_of_corrections(const ExperimentLog & log, const MatrixXd & C, const MatrixXd & R, double eps)
{
  if (!(eps > 0)) { throw std::invalid_argument("eps must be positive"); }
  if (C.rows() != log.steps()) { throw std::invalid_argument("correction matrix does not match the log"); }
  long count = 0;
  for (Eigen::Index k = 0; k < C.rows(); ++k) {
    const VectorXd u   = log.u_cert.row(k).transpose();
    const double denom = std::max(std::sqrt(std::max(0.0, u.dot(R * u))), 1e-9);
    if (C.row(k).norm() / denom >= eps) { ++count; }
  }
  return count;
}

inline double max_correction(const MatrixXd & C)
{
  if (C.rows() == 0) { throw std::invalid_argument("empty correction matrix"); }
  return C.rowwise().norm().maxCoeff();
}

/// Frobenius norm of the stacked R^{1/2} (u_k - u_{k-1}) / dt for k = 1..K-1.
inline double rate_of_change(const MatrixXd & inputs, double dt, const MatrixXd & R)
{
  if (inputs.rows() < 2) { throw std::invalid_argument("rate of change needs at least two steps"); }
  if (!(dt > 0)) { throw std::invalid_argument("dt must be positive"); }
  const MatrixXd S    = psd_sqrt(R);
  const auto K        = inputs.rows();
  const MatrixXd diff = (inputs.bottomRows(K - 1) - inputs.topRows(K - 1)) / dt;
  return (diff * S).norm();
}

/// Rate of change of the applied inputs.
inline double rate_of_change(const ExperimentLog & log, const MatrixXd & R) { return rate_of_change(log.applied, log.dt, R); }

struct MetricSummary
{
  double magnitude        = 0.0;
  long count              = 0;
  double max_correction   = 0.0;
  double rate_applied     = 0.0;
  double rate_uncertified = 0.0;
};

inline MetricSummary summarize(const ExperimentLog & log, const MatrixXd & R, double eps)
{
  const MatrixXd C = correction_matrix(log, R);
  MetricSummary s;
  s.magnitude        = magnitude_of_corrections(C);
  s.count            = number_of_corrections(log, C, R, eps);
  s.max_correction   = max_correction(C);
  s.rate_applied     = rate_of_change(log.applied, log.dt, R);
  s.rate_uncertified = rate_of_change(log.u_uncert, log.dt, R);
  return s;
}

}  // namespace mpsf
