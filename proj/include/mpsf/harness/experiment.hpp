#pragma once

/**
 * @file
 * @brief Closed-loop trials, start-state sampling and filter comparisons.
 */

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <optional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "../controllers.hpp"
#include "../dynamics.hpp"
#include "../filter.hpp"
#include "../metrics.hpp"
#include "../robust_mpc.hpp"
#include "config.hpp"

namespace mpsf::harness {

/// Everything a trial needs that stays fixed over an experiment.
struct Task
{
  ExperimentConfig config;
  NominalModel model;
  Policy policy;
  RobustDesign design;
  MatrixXd R;  ///< correction weight of the metrics
};

inline NominalModel make_model(const ExperimentConfig & c)
{
  if (c.system == SystemKind::Cartpole) { return cartpole_model(c.cartpole, c.dt); }
  return quadrotor_linear_model();
}

inline Policy make_policy(const ExperimentConfig & c, const NominalModel & model)
{
  const Jacobians J = model.jacobians(VectorXd::Zero(model.state_dim()), VectorXd::Zero(model.input_dim()));
  const LqrGain gain = solve_dare(J.A, J.B, c.controller_Q.asDiagonal(), c.controller_R.asDiagonal());
  if (c.controller == ControllerKind::Aggressive) {
    return aggressive_policy({gain, c.target, VectorXd::Zero(model.input_dim()), c.gain_scale});
  }
  ReferenceProvider ref = c.task == TaskKind::Track
                            ? sinusoid_reference(model, c.amplitude, c.period, 0, 1)
                            : constant_reference(VectorXd::Zero(model.state_dim()), VectorXd::Zero(model.input_dim()));
  LqrGain scaled = gain;
  scaled.K *= c.gain_scale;
  return lqr_policy(scaled, std::move(ref));
}

/// Steady states of the linearization at the origin: the kernel of [A - I, B].
inline std::pair<MatrixXd, MatrixXd> steady_state_basis(const NominalModel & model)
{
  const int n = model.state_dim(), m = model.input_dim();
  const Jacobians J = model.jacobians(VectorXd::Zero(n), VectorXd::Zero(m));
  MatrixXd E(n, n + m);
  E << J.A - MatrixXd::Identity(n, n), J.B;
  Eigen::FullPivLU<MatrixXd> lu(E);
  lu.setThreshold(1e-10);
  if (lu.dimensionOfKernel() == 0) { return {MatrixXd(n, 0), MatrixXd(m, 0)}; }
  const MatrixXd N = lu.kernel();
  return {N.topRows(n), N.bottomRows(m)};
}

inline RobustDesign make_robust_design(const ExperimentConfig & c, const NominalModel & model)
{
  const int n = model.state_dim(), m = model.input_dim();
  const Jacobians J  = model.jacobians(VectorXd::Zero(n), VectorXd::Zero(m));
  const MatrixXd Q   = c.design_Q.asDiagonal();
  const MatrixXd R   = c.design_R.asDiagonal();
  const LqrGain gain = c.tube_gain ? fixed_gain(J.A, J.B, *c.tube_gain, Q, R) : solve_dare(J.A, J.B, Q, R);
  TerminalOptions options;
  options.mode           = c.terminal;
  options.tightening     = c.tightening;
  options.level_fraction = c.level_fraction;
  if (c.steady_states) { std::tie(options.Gx, options.Gu) = steady_state_basis(model); }
  return make_design(model, c.boxes, c.bound, gain, c.H, options);
}

/// Builds model, controller and robust design. Design failures surface as ConfigError.
inline Task build_task(const ExperimentConfig & c)
{
  NominalModel model = make_model(c);
  Policy policy;
  std::optional<RobustDesign> design;
  try {
    policy = make_policy(c, model);
    design = make_robust_design(c, model);
  } catch (const std::runtime_error & e) {
    throw ConfigError(std::string("cannot build task: ") + e.what());
  } catch (const std::invalid_argument & e) {
    throw ConfigError(std::string("cannot build task: ") + e.what());
  }
  return Task{c, std::move(model), std::move(policy), std::move(*design), c.filter_R.asDiagonal()};
}

inline FilterSpec make_filter_spec(const ExperimentConfig & c, const VariantSpec & v)
{
  return {v.variant, v.M, v.M_r, c.gamma, c.filter_R.asDiagonal(), c.filter_R_r.asDiagonal(), c.H};
}

/// Seed of the disturbance sequence of trial i; shared by every variant.
inline std::uint64_t trial_seed(const ExperimentConfig & c, int i) { return c.seed + static_cast<std::uint64_t>(i); }

struct TrialArtifact
{
  std::string variant;
  std::uint64_t seed = 0;
  VectorXd start;
  ExperimentLog log;
  std::vector<std::string> solver_status;  ///< "none" for unfiltered steps
  std::vector<bool> fallback;
  VectorXd correction_norms;

  long violation_count() const { return static_cast<long>(std::count(log.violations.begin(), log.violations.end(), true)); }
  long fallback_count() const { return static_cast<long>(std::count(fallback.begin(), fallback.end(), true)); }
  long status_count(std::string_view s) const { return static_cast<long>(std::count(solver_status.begin(), solver_status.end(), s)); }
  double max_kkt_residual = 0.0;  ///< over optimal solves
};

/**
 * @brief One closed loop: query the policy, certify (unless unfiltered), apply the
 * disturbed step.
 *
 * Step k is flagged as a violation when x_k leaves the state box or the applied input
 * leaves the input constraints; the state after the last step is checked as well.
 *
 * @throws InfeasibleStart when the first solve fails.
 */
inline TrialArtifact run_trial(const Task & task, const VariantSpec & variant, const VectorXd & x0, std::uint64_t seed)
{
  const auto & c = task.config;
  const int n = task.model.state_dim(), m = task.model.input_dim(), K = c.steps;
  if (x0.size() != n) { throw std::invalid_argument("start state has wrong size"); }

  TrialArtifact a;
  a.variant = variant.name();
  a.seed    = seed;
  a.start   = x0;
  a.log.dt  = task.model.dt();
  a.log.states.resize(K, n);
  a.log.u_uncert.resize(K, m);
  a.log.u_cert.resize(K, m);
  a.log.applied.resize(K, m);
  a.log.solve_times = VectorXd::Zero(K);
  a.log.violations.assign(static_cast<std::size_t>(K), false);
  a.solver_status.assign(static_cast<std::size_t>(K), "none");
  a.fallback.assign(static_cast<std::size_t>(K), false);
  a.correction_norms = VectorXd::Zero(K);

  std::optional<SafetyFilter> filter;
  if (variant.filtered) { filter.emplace(make_filter_spec(c, variant), task.design); }
  DisturbanceSampler disturbance(c.bound, seed, c.disturbance);
  const MatrixXd R_half = psd_sqrt(task.R);

  VectorXd x = x0;
  for (int k = 0; k < K; ++k) {
    const auto row = static_cast<std::size_t>(k);
    a.log.states.row(k) = x.transpose();
    const VectorXd u_uncert = task.policy(x, k);
    VectorXd u = u_uncert;
    if (filter) {
      const CertificationResult r = filter->filter(task.policy, x, k);
      u                  = r.u_cert;
      a.solver_status[row] = std::string(opt::to_string(r.solver_status));
      a.fallback[row]    = r.status == CertStatus::FallbackApplied;
      if (c.record_solve_times) { a.log.solve_times(k) = r.solve_time; }
      if (r.solver_status == opt::QpStatus::Optimal) { a.max_kkt_residual = std::max(a.max_kkt_residual, r.kkt_residual); }
    }
    a.log.u_uncert.row(k)  = u_uncert.transpose();
    a.log.u_cert.row(k)    = u.transpose();
    a.log.applied.row(k)   = u.transpose();
    a.correction_norms(k)  = (R_half * (u_uncert - u)).norm();
    bool violated          = !task.design.boxes.contains_state(x) || !task.design.boxes.admits_input(x, u);
    x                      = disturbed_step(task.model, x, u, disturbance);
    if (k == K - 1 && !task.design.boxes.contains_state(x)) { violated = true; }
    a.log.violations[row] = violated;
  }
  return a;
}

/**
 * @brief Start states of the experiment.
 *
 * Fixed mode repeats the configured state. Sample mode draws uniformly from the sample
 * box (within the state constraints) and keeps a state when the unfiltered loop violates
 * the constraints at least min_violations times and the one-step filter keeps it safe.
 * Both checks use the disturbance seed of the trial the state will start.
 *
 * @throws std::runtime_error "no qualifying start states" after max_rejections rejections.
 */
inline std::vector<VectorXd> sample_start_states(const Task & task)
{
  const auto & c = task.config;
  if (c.start == StartMode::Fixed) { return std::vector<VectorXd>(static_cast<std::size_t>(c.trials), c.start_state); }

  std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const VariantSpec none = parse_variant("none"), one_step = parse_variant("one_step");
  std::vector<VectorXd> out;
  long rejections = 0;
  while (static_cast<int>(out.size()) < c.trials) {
    if (rejections >= c.max_rejections) { throw std::runtime_error("no qualifying start states"); }
    VectorXd x(c.n());
    for (int i = 0; i < c.n(); ++i) { x(i) = c.sample_lb(i) + (c.sample_ub(i) - c.sample_lb(i)) * uni(rng); }
    const std::uint64_t seed = trial_seed(c, static_cast<int>(out.size()));
    bool keep = task.design.boxes.contains_state(x) && run_trial(task, none, x, seed).violation_count() >= c.min_violations;
    if (keep) {
      try {
        keep = run_trial(task, one_step, x, seed).violation_count() == 0;
      } catch (const InfeasibleStart &) {
        keep = false;
      }
    }
    if (keep) {
      out.push_back(x);
    } else {
      ++rejections;
    }
  }
  return out;
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads. The first exception is rethrown.
template <class Fn>
void parallel_for(int count, int workers, Fn && fn)
{
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) { fn(i); }
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) { error = std::current_exception(); }
        }
      }
    });
  }
  for (auto & t : pool) { t.join(); }
  if (error) { std::rethrow_exception(error); }
}

/// Result of one (variant, start) cell; `error` is set when the trial could not run.
struct Cell
{
  std::optional<TrialArtifact> trial;
  std::string error;
};

struct Comparison
{
  std::vector<VariantSpec> variants;
  std::vector<VectorXd> starts;
  std::vector<std::vector<Cell>> cells;  ///< [variant][trial]
};

/// Runs every variant from every start with shared disturbance seeds. Failed cells keep their error.
inline Comparison compare_filters(const Task & task, const std::vector<VariantSpec> & variants, const std::vector<VectorXd> & starts, int workers = 1)
{
  if (variants.empty()) { throw std::invalid_argument("compare needs at least one variant"); }
  Comparison out{variants, starts, std::vector<std::vector<Cell>>(variants.size(), std::vector<Cell>(starts.size()))};
  // trial-major order interleaves the variants, so slow drift of the machine does not bias solve times
  const int count = static_cast<int>(variants.size());
  parallel_for(count * static_cast<int>(starts.size()), workers, [&](int job) {
    const auto v = static_cast<std::size_t>(job % count);
    const auto t = static_cast<std::size_t>(job / count);
    Cell & cell  = out.cells[v][t];
    try {
      cell.trial = run_trial(task, variants[v], starts[t], trial_seed(task.config, static_cast<int>(t)));
    } catch (const std::exception & e) {
      cell.error = e.what();
    }
  });
  return out;
}

}  // namespace mpsf::harness
