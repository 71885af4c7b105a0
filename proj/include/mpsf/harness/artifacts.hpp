#pragma once

/**
 * @file
 * @brief Trial CSV logs, metrics JSON and the comparison summary table.
 *
 * Numbers are written with 17 significant digits so that reading a CSV back gives the
 * logged doubles exactly and the metrics recomputed from it match the stored JSON.
 */

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "../metrics.hpp"
#include "experiment.hpp"

namespace mpsf::harness {

using Json = nlohmann::ordered_json;

inline std::string format_double(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string & s)
{
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) { throw std::runtime_error("not a number: " + s); }
  return v;
}

/// Column names of the per-step trial log.
inline std::vector<std::string> trial_columns(int n, int m)
{
  std::vector<std::string> cols{"step", "time"};
  for (int i = 0; i < n; ++i) { cols.push_back("x" + std::to_string(i)); }
  for (const char * name : {"u_uncert", "u_cert", "applied"}) {
    for (int j = 0; j < m; ++j) { cols.push_back(std::string(name) + std::to_string(j)); }
  }
  for (const char * name : {"correction_norm", "solver_status", "fallback", "violation", "solve_time"}) { cols.emplace_back(name); }
  return cols;
}

inline void write_trial_csv(std::ostream & os, const TrialArtifact & a)
{
  const auto & log = a.log;
  const int n = static_cast<int>(log.states.cols()), m = static_cast<int>(log.u_uncert.cols());
  const auto cols = trial_columns(n, m);
  for (std::size_t i = 0; i < cols.size(); ++i) { os << (i ? "," : "") << cols[i]; }
  os << '\n';
  for (Eigen::Index k = 0; k < log.steps(); ++k) {
    const auto row = static_cast<std::size_t>(k);
    os << k << ',' << format_double(static_cast<double>(k) * log.dt);
    for (int i = 0; i < n; ++i) { os << ',' << format_double(log.states(k, i)); }
    for (const MatrixXd * U : {&log.u_uncert, &log.u_cert, &log.applied}) {
      for (int j = 0; j < m; ++j) { os << ',' << format_double((*U)(k, j)); }
    }
    os << ',' << format_double(a.correction_norms(k)) << ',' << a.solver_status[row] << ',' << (a.fallback[row] ? 1 : 0) << ','
       << (log.violations[row] ? 1 : 0) << ',' << format_double(log.solve_times(k)) << '\n';
  }
}

/// Log and per-step flags read back from a trial CSV.
struct TrialTable
{
  ExperimentLog log;
  std::vector<std::string> solver_status;
  std::vector<bool> fallback;
  VectorXd correction_norms;

  bool filtered() const
  {
    return std::any_of(solver_status.begin(), solver_status.end(), [](const std::string & s) { return s != "none"; });
  }
};

inline std::vector<std::string> split_csv_line(const std::string & line)
{
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) { out.push_back(field); }
  if (!line.empty() && line.back() == ',') { out.emplace_back(); }
  return out;
}

/// Parses a trial CSV; the time step is taken from `dt` since the time column is rounded.
inline TrialTable read_trial_csv(std::istream & is, double dt)
{
  std::string line;
  if (!std::getline(is, line)) { throw std::runtime_error("empty trial CSV"); }
  const auto header = split_csv_line(line);
  int n = 0, m = 0;
  for (const auto & h : header) {
    if (h.size() > 1 && h[0] == 'x' && std::isdigit(static_cast<unsigned char>(h[1]))) { ++n; }
    if (h.rfind("u_uncert", 0) == 0) { ++m; }
  }
  if (header != trial_columns(n, m)) { throw std::runtime_error("trial CSV header does not match the trial schema"); }

  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) { continue; }
    rows.push_back(split_csv_line(line));
    if (rows.back().size() != header.size()) { throw std::runtime_error("trial CSV row " + std::to_string(rows.size()) + " has the wrong width"); }
  }
  const auto K = static_cast<Eigen::Index>(rows.size());
  TrialTable t;
  t.log.dt = dt;
  t.log.states.resize(K, n);
  t.log.u_uncert.resize(K, m);
  t.log.u_cert.resize(K, m);
  t.log.applied.resize(K, m);
  t.log.solve_times.resize(K);
  t.correction_norms.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto & r = rows[static_cast<std::size_t>(k)];
    std::size_t c = 2;
    for (int i = 0; i < n; ++i) { t.log.states(k, i) = parse_double(r[c++]); }
    for (MatrixXd * U : {&t.log.u_uncert, &t.log.u_cert, &t.log.applied}) {
      for (int j = 0; j < m; ++j) { (*U)(k, j) = parse_double(r[c++]); }
    }
    t.correction_norms(k) = parse_double(r[c++]);
    t.solver_status.push_back(r[c++]);
    t.fallback.push_back(r[c++] == "1");
    t.log.violations.push_back(r[c++] == "1");
    t.log.solve_times(k) = parse_double(r[c++]);
  }
  return t;
}

/// The four correction metrics (null for unfiltered logs) plus rates and counts.
inline Json metrics_json(const ExperimentLog & log, const std::vector<bool> & fallback, bool filtered, const MatrixXd & R, double eps)
{
  const MetricSummary s = summarize(log, R, eps);
  Json j;
  j["magnitude_of_corrections"] = filtered ? Json(s.magnitude) : Json(nullptr);
  j["number_of_corrections"]    = filtered ? Json(s.count) : Json(nullptr);
  j["max_correction"]           = filtered ? Json(s.max_correction) : Json(nullptr);
  j["rate_of_change"]           = s.rate_applied;
  j["rate_of_change_uncertified"] = s.rate_uncertified;
  j["steps"]      = log.steps();
  j["violations"] = std::count(log.violations.begin(), log.violations.end(), true);
  j["fallbacks"]  = std::count(fallback.begin(), fallback.end(), true);
  return j;
}

inline Json matrix_json(const MatrixXd & M)
{
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < M.cols(); ++j) { row.push_back(M(i, j)); }
    rows.push_back(row);
  }
  return rows;
}

inline MatrixXd json_matrix(const Json & j)
{
  if (!j.is_array() || j.empty()) { throw std::runtime_error("expected a nonempty matrix"); }
  MatrixXd M(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index k = 0; k < M.cols(); ++k) { M(i, k) = j[static_cast<std::size_t>(i)].at(static_cast<std::size_t>(k)).get<double>(); }
  }
  return M;
}

/// Trial record: identity, metric parameters and metrics.
inline Json trial_json(const TrialArtifact & a, const MatrixXd & R, double eps)
{
  Json j;
  j["variant"] = a.variant;
  j["seed"]    = a.seed;
  j["start"]   = std::vector<double>(a.start.data(), a.start.data() + a.start.size());
  j["dt"]      = a.log.dt;
  j["eps"]     = eps;
  j["R"]       = matrix_json(R);
  j["metrics"] = metrics_json(a.log, a.fallback, a.variant != "none", R, eps);
  j["infeasible_solves"] = a.status_count("infeasible");
  j["max_kkt_residual"]  = a.max_kkt_residual;
  return j;
}

inline void write_text(const std::filesystem::path & path, const std::string & text)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) { throw std::runtime_error("cannot write " + path.string()); }
  out << text;
}

inline std::string trial_stem(int i)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "trial_%03d", i);
  return buf;
}

/// Writes <dir>/trial_NNN.csv and trial_NNN.json.
inline void write_trial(const std::filesystem::path & dir, int index, const TrialArtifact & a, const MatrixXd & R, double eps)
{
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  write_trial_csv(csv, a);
  write_text(dir / (trial_stem(index) + ".csv"), csv.str());
  write_text(dir / (trial_stem(index) + ".json"), trial_json(a, R, eps).dump(2) + "\n");
}

/// Mean, median and quartiles (linear interpolation between order statistics).
struct Stats
{
  double mean = NAN, median = NAN, q1 = NAN, q3 = NAN;
};

inline Stats describe(std::vector<double> v)
{
  Stats s;
  if (v.empty()) { return s; }
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo    = static_cast<std::size_t>(std::floor(pos));
    const auto hi    = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  double sum = 0.0;
  for (double x : v) { sum += x; }
  s.mean   = sum / static_cast<double>(v.size());
  s.median = q(0.5);
  s.q1     = q(0.25);
  s.q3     = q(0.75);
  return s;
}

/// Per-variant trial metrics of a comparison, in variant order.
inline std::vector<std::vector<MetricSummary>> comparison_metrics(const Comparison & cmp, const MatrixXd & R, double eps)
{
  std::vector<std::vector<MetricSummary>> out(cmp.variants.size());
  for (std::size_t v = 0; v < cmp.variants.size(); ++v) {
    for (const auto & cell : cmp.cells[v]) {
      if (cell.trial) { out[v].push_back(summarize(cell.trial->log, R, eps)); }
    }
  }
  return out;
}

/**
 * @brief Summary table with one column per variant and one row per (metric, statistic).
 *
 * Correction metrics of the unfiltered column are "-". Totals of violations, fallbacks
 * and failed trials close the table.
 */
inline std::string summary_csv(const Comparison & cmp, const MatrixXd & R, double eps)
{
  const auto metrics = comparison_metrics(cmp, R, eps);
  std::ostringstream os;
  os << "metric,statistic";
  for (const auto & v : cmp.variants) { os << ',' << v.name(); }
  os << '\n';
  struct Row
  {
    const char * name;
    bool correction;
    double (*get)(const MetricSummary &);
  };
  const Row rows[] = {
    {"magnitude_of_corrections", true, [](const MetricSummary & s) { return s.magnitude; }},
    {"number_of_corrections", true, [](const MetricSummary & s) { return static_cast<double>(s.count); }},
    {"max_correction", true, [](const MetricSummary & s) { return s.max_correction; }},
    {"rate_of_change", false, [](const MetricSummary & s) { return s.rate_applied; }},
  };
  for (const auto & row : rows) {
    std::vector<Stats> stats;
    for (std::size_t v = 0; v < cmp.variants.size(); ++v) {
      std::vector<double> values;
      for (const auto & s : metrics[v]) { values.push_back(row.get(s)); }
      stats.push_back(describe(values));
    }
    const std::pair<const char *, double Stats::*> columns[] = {{"mean", &Stats::mean}, {"median", &Stats::median}, {"q1", &Stats::q1}, {"q3", &Stats::q3}};
    for (const auto & [label, member] : columns) {
      os << row.name << ',' << label;
      for (std::size_t v = 0; v < cmp.variants.size(); ++v) {
        const bool dash = row.correction && !cmp.variants[v].filtered;
        os << ',' << (dash || std::isnan(stats[v].*member) ? std::string("-") : format_double(stats[v].*member));
      }
      os << '\n';
    }
  }
  auto totals = [&](const char * name, auto count) {
    os << name << ",total";
    for (std::size_t v = 0; v < cmp.variants.size(); ++v) {
      long total = 0;
      for (const auto & cell : cmp.cells[v]) { total += count(cell); }
      os << ',' << total;
    }
    os << '\n';
  };
  totals("violations", [](const Cell & c) { return c.trial ? c.trial->violation_count() : 0L; });
  totals("fallbacks", [](const Cell & c) { return c.trial ? c.trial->fallback_count() : 0L; });
  totals("failed_trials", [](const Cell & c) { return c.trial ? 0L : 1L; });
  return os.str();
}

}  // namespace mpsf::harness
