#pragma once

/**
 * @file
 * @brief Experiment configuration loaded from TOML.
 *
 * Every table rejects keys it does not know. Values that are left out fall back to the
 * protocol defaults of the chosen system.
 */

#include <Eigen/Dense>
#include <toml.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "../dynamics.hpp"
#include "../filter.hpp"
#include "../robust_mpc.hpp"

namespace mpsf::harness {

class ConfigError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

enum class SystemKind { Cartpole, QuadrotorLinear };
enum class TaskKind { Stabilize, Track };
enum class ControllerKind { Lqr, Aggressive };
enum class StartMode { Fixed, Sample };

/// A filter choice, or none for the uncertified baseline.
struct VariantSpec
{
  bool filtered    = true;
  Variant variant  = Variant::OneStep;
  int M            = 1;
  int M_r          = 1;

  std::string name() const
  {
    if (!filtered) { return "none"; }
    switch (variant) {
    case Variant::OneStep: return "one_step";
    case Variant::MultiStep: return "multi_step_" + std::to_string(M);
    case Variant::OneStepRegularized: return "regularized_" + std::to_string(M_r);
    }
    return "unknown";
  }

  bool operator==(const VariantSpec &) const = default;
};

/// Accepts "none", "one_step", "multi_step_<M>" and "regularized_<M_r>".
inline VariantSpec parse_variant(std::string_view s)
{
  auto suffix = [&](std::string_view prefix) -> std::optional<int> {
    if (s.substr(0, prefix.size()) != prefix) { return std::nullopt; }
    const std::string rest(s.substr(prefix.size()));
    if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos) { throw ConfigError("bad variant: " + std::string(s)); }
    return std::stoi(rest);
  };
  if (s == "none") { return {false, Variant::OneStep, 1, 1}; }
  if (s == "one_step") { return {true, Variant::OneStep, 1, 1}; }
  if (auto M = suffix("multi_step_")) { return {true, Variant::MultiStep, *M, 1}; }
  if (auto Mr = suffix("regularized_")) { return {true, Variant::OneStepRegularized, 1, *Mr}; }
  throw ConfigError("unknown variant: " + std::string(s));
}

struct ExperimentConfig
{
  SystemKind system = SystemKind::Cartpole;
  CartpoleParams cartpole;
  double dt = 1.0 / 15.0;

  TaskKind task    = TaskKind::Track;
  double amplitude = 1.0;
  double period    = 5.0;

  ConstraintBoxes boxes;
  UncertaintyBound bound{0.0014};
  DisturbanceMode disturbance = DisturbanceMode::Uniform;

  ControllerKind controller = ControllerKind::Lqr;
  VectorXd controller_Q;  ///< diagonal
  VectorXd controller_R;  ///< diagonal
  double gain_scale = 1.0;
  VectorXd target;        ///< aggressive controller state target

  VariantSpec filter;
  double gamma = 0.85;
  int H        = 20;
  VectorXd filter_R;
  VectorXd filter_R_r;

  VectorXd design_Q;
  VectorXd design_R;
  std::optional<MatrixXd> tube_gain;
  TerminalMode terminal   = TerminalMode::Robust;
  Tightening tightening   = Tightening::Support;
  bool steady_states      = true;
  double level_fraction   = 0.5;

  StartMode start = StartMode::Sample;
  VectorXd start_state;
  VectorXd sample_lb, sample_ub;
  int min_violations  = 5;
  long max_rejections = 100000;

  std::vector<VariantSpec> variants;

  std::uint64_t seed       = 1;
  int trials               = 10;
  int steps                = 150;
  double eps               = 0.1;
  bool record_solve_times  = true;

  int n() const { return system == SystemKind::Cartpole ? 4 : 2; }
  int m() const { return 1; }
};

/// Protocol defaults of each system: constraint boxes, disturbance bound, task and trial counts.
inline ExperimentConfig default_config(SystemKind system)
{
  ExperimentConfig c;
  c.system = system;
  const int n = c.n(), m = c.m();
  c.boxes.x_lb = VectorXd::Constant(n, -kInf);
  c.boxes.x_ub = VectorXd::Constant(n, kInf);
  c.boxes.u_lb = VectorXd::Constant(m, -kInf);
  c.boxes.u_ub = VectorXd::Constant(m, kInf);
  c.controller_Q = VectorXd::Ones(n);
  c.controller_R = VectorXd::Ones(m);
  c.target       = VectorXd::Zero(n);
  c.filter_R     = VectorXd::Ones(m);
  c.filter_R_r   = VectorXd::Ones(m);
  c.design_Q     = VectorXd::Ones(n);
  c.design_R     = VectorXd::Ones(m);
  c.start_state  = VectorXd::Zero(n);
  c.variants     = {parse_variant("none"), parse_variant("one_step"), parse_variant("regularized_10"),
                    parse_variant("multi_step_2"), parse_variant("multi_step_5"), parse_variant("multi_step_10")};
  if (system == SystemKind::Cartpole) {
    const double theta_max = 9.2 * std::numbers::pi / 180.0;
    c.dt = 1.0 / 15.0;
    c.boxes.x_lb(2) = -theta_max;
    c.boxes.x_ub(2) = theta_max;
    c.boxes.u_lb(0) = -10.0;
    c.boxes.u_ub(0) = 10.0;
    c.bound         = UncertaintyBound(0.0014);
    c.amplitude     = 1.0;
    c.period        = 5.0;
    c.H             = 20;
    c.trials        = 10;
    c.steps         = 150;
    c.start         = StartMode::Sample;
    c.sample_lb     = VectorXd::Constant(n, -1.0);
    c.sample_ub     = VectorXd::Constant(n, 1.0);
    c.sample_lb(2)  = -theta_max;
    c.sample_ub(2)  = theta_max;
  } else {
    c.dt = 0.04;
    c.boxes.x_lb << -0.75, -0.5;
    c.boxes.x_ub << 0.75, 0.5;
    LinearRow setpoint{Eigen::RowVectorXd::Zero(n), Eigen::RowVectorXd::Ones(m), -0.25, 0.25};
    setpoint.cx(0) = -1.0;
    c.boxes.mixed.push_back(setpoint);
    c.bound     = UncertaintyBound(0.0449);
    c.amplitude = 1.5;
    c.period    = 10.0;
    c.H         = 10;
    c.trials    = 5;
    c.steps     = 497;
    c.start     = StartMode::Fixed;
    c.sample_lb = c.boxes.x_lb;
    c.sample_ub = c.boxes.x_ub;
    c.terminal  = TerminalMode::Nominal;
  }
  return c;
}

namespace detail {

inline void check_keys(const toml::table & t, std::set<std::string_view> allowed, const std::string & where)
{
  for (const auto & [key, value] : t) {
    if (!allowed.contains(key.str())) {
      throw ConfigError("unknown key '" + std::string(key.str()) + "'" + (where.empty() ? "" : " in [" + where + "]"));
    }
  }
}

inline const toml::table * subtable(const toml::table & t, std::string_view key)
{
  const auto * node = t.get(key);
  if (!node) { return nullptr; }
  const auto * tbl = node->as_table();
  if (!tbl) { throw ConfigError("'" + std::string(key) + "' must be a table"); }
  return tbl;
}

inline double as_number(const toml::node & node, std::string_view key)
{
  if (const auto * f = node.as_floating_point()) { return f->get(); }
  if (const auto * i = node.as_integer()) { return static_cast<double>(i->get()); }
  throw ConfigError("'" + std::string(key) + "' must be a number");
}

inline void read(const toml::table & t, std::string_view key, double & out)
{
  if (const auto * node = t.get(key)) { out = as_number(*node, key); }
}

template <class Int>
  requires std::is_integral_v<Int>
inline void read(const toml::table & t, std::string_view key, Int & out)
{
  if (const auto * node = t.get(key)) {
    const auto * i = node->as_integer();
    if (!i) { throw ConfigError("'" + std::string(key) + "' must be an integer"); }
    if (i->get() < 0) { throw ConfigError("'" + std::string(key) + "' must be nonnegative"); }
    out = static_cast<Int>(i->get());
  }
}

inline void read(const toml::table & t, std::string_view key, bool & out)
{
  if (const auto * node = t.get(key)) {
    const auto * b = node->as_boolean();
    if (!b) { throw ConfigError("'" + std::string(key) + "' must be a boolean"); }
    out = b->get();
  }
}

inline std::optional<std::string> read_string(const toml::table & t, std::string_view key)
{
  const auto * node = t.get(key);
  if (!node) { return std::nullopt; }
  const auto * s = node->as_string();
  if (!s) { throw ConfigError("'" + std::string(key) + "' must be a string"); }
  return s->get();
}

inline VectorXd to_vector(const toml::node & node, std::string_view key)
{
  const auto * arr = node.as_array();
  if (!arr) { throw ConfigError("'" + std::string(key) + "' must be an array of numbers"); }
  VectorXd v(static_cast<Eigen::Index>(arr->size()));
  for (std::size_t i = 0; i < arr->size(); ++i) { v(static_cast<Eigen::Index>(i)) = as_number(*arr->get(i), key); }
  return v;
}

inline void read(const toml::table & t, std::string_view key, VectorXd & out, Eigen::Index size)
{
  if (const auto * node = t.get(key)) {
    out = to_vector(*node, key);
    if (out.size() != size) {
      throw ConfigError("'" + std::string(key) + "' needs " + std::to_string(size) + " entries, got " + std::to_string(out.size()));
    }
  }
}

inline MatrixXd read_matrix(const toml::node & node, std::string_view key, Eigen::Index rows, Eigen::Index cols)
{
  const auto * arr = node.as_array();
  if (!arr || static_cast<Eigen::Index>(arr->size()) != rows) {
    throw ConfigError("'" + std::string(key) + "' must be an array of " + std::to_string(rows) + " rows");
  }
  MatrixXd M(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const VectorXd row = to_vector(*arr->get(static_cast<std::size_t>(i)), key);
    if (row.size() != cols) { throw ConfigError("'" + std::string(key) + "' rows need " + std::to_string(cols) + " entries"); }
    M.row(i) = row.transpose();
  }
  return M;
}

template <class E>
E pick(const std::string & value, std::initializer_list<std::pair<std::string_view, E>> options, std::string_view key)
{
  for (const auto & [name, e] : options) {
    if (value == name) { return e; }
  }
  std::string list;
  for (const auto & [name, e] : options) { list += (list.empty() ? "" : ", ") + std::string(name); }
  throw ConfigError("'" + std::string(key) + "' must be one of: " + list);
}

inline void require(bool ok, const std::string & message)
{
  if (!ok) { throw ConfigError(message); }
}

}  // namespace detail

/// Checks ranges that individual readers cannot see.
inline void validate(const ExperimentConfig & c)
{
  using detail::require;
  require(c.dt > 0, "dt must be positive");
  require(c.cartpole.cart_mass > 0 && c.cartpole.pole_mass > 0 && c.cartpole.half_length > 0 && c.cartpole.gravity > 0,
          "cartpole parameters must be positive");
  require(c.period > 0, "task period must be positive");
  require(c.bound.w_max >= 0, "w_max must be nonnegative");
  require(c.H >= 1, "H must be positive");
  require(c.gamma > 0, "gamma must be positive");
  require(c.trials >= 1, "trials must be positive");
  require(c.steps >= 2, "steps must be at least 2");
  require(c.eps > 0, "eps must be positive");
  require(c.gain_scale > 0, "gain_scale must be positive");
  require(c.level_fraction > 0 && c.level_fraction <= 1, "level_fraction must lie in (0, 1]");
  require(c.min_violations >= 0, "min_violations must be nonnegative");
  require(c.max_rejections >= 1, "max_rejections must be positive");
  require(!c.variants.empty(), "compare needs at least one variant");
  std::vector<VariantSpec> all = c.variants;
  all.push_back(c.filter);
  for (const auto & v : all) {
    if (v.variant == Variant::MultiStep) { require(v.M >= 1 && v.M <= c.H, "variant " + v.name() + " needs 1 <= M <= H"); }
    if (v.variant == Variant::OneStepRegularized) { require(v.M_r >= 1 && v.M_r <= c.H, "variant " + v.name() + " needs 1 <= M_r <= H"); }
  }
  for (const VectorXd * d : {&c.controller_Q, &c.design_Q}) { require((d->array() >= 0).all(), "Q weights must be nonnegative"); }
  for (const VectorXd * d : {&c.controller_R, &c.design_R}) { require((d->array() > 0).all(), "R weights of a gain must be positive"); }
  for (const VectorXd * d : {&c.filter_R, &c.filter_R_r}) { require((d->array() >= 0).all(), "filter weights must be nonnegative"); }
  require((c.sample_lb.array() <= c.sample_ub.array()).all(), "sample box requires lb <= ub");
  require(c.sample_lb.allFinite() && c.sample_ub.allFinite(), "sample box must be finite");
  try {
    c.boxes.validate();
  } catch (const std::invalid_argument & e) {
    throw ConfigError(e.what());
  }
}

/// Parses a TOML document into a validated configuration.
inline ExperimentConfig parse_config(std::string_view text)
{
  using namespace detail;
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error & e) {
    std::ostringstream os;
    os << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(os.str());
  }
  check_keys(root, {"system", "seed", "trials", "steps", "eps", "record_solve_times", "model", "task", "constraints",
                    "disturbance", "controller", "filter", "design", "start", "compare"}, "");

  const auto system_name = read_string(root, "system");
  if (!system_name) { throw ConfigError("missing key 'system'"); }
  const auto system = pick<SystemKind>(*system_name, {{"cartpole", SystemKind::Cartpole}, {"quadrotor_linear", SystemKind::QuadrotorLinear}}, "system");
  ExperimentConfig c = default_config(system);
  const auto n = c.n(), m = c.m();

  read(root, "seed", c.seed);
  read(root, "trials", c.trials);
  read(root, "steps", c.steps);
  read(root, "eps", c.eps);
  read(root, "record_solve_times", c.record_solve_times);

  if (const auto * t = subtable(root, "model")) {
    if (system == SystemKind::Cartpole) {
      check_keys(*t, {"cart_mass", "pole_mass", "half_length", "gravity", "dt"}, "model");
      read(*t, "cart_mass", c.cartpole.cart_mass);
      read(*t, "pole_mass", c.cartpole.pole_mass);
      read(*t, "half_length", c.cartpole.half_length);
      read(*t, "gravity", c.cartpole.gravity);
      read(*t, "dt", c.dt);
    } else {
      check_keys(*t, {}, "model");  // the identified quadrotor model has no parameters
    }
  }

  if (const auto * t = subtable(root, "task")) {
    check_keys(*t, {"kind", "amplitude", "period"}, "task");
    if (auto k = read_string(*t, "kind")) { c.task = pick<TaskKind>(*k, {{"stabilize", TaskKind::Stabilize}, {"track", TaskKind::Track}}, "task.kind"); }
    read(*t, "amplitude", c.amplitude);
    read(*t, "period", c.period);
  }

  if (const auto * t = subtable(root, "constraints")) {
    check_keys(*t, {"x_lb", "x_ub", "u_lb", "u_ub", "mixed"}, "constraints");
    read(*t, "x_lb", c.boxes.x_lb, n);
    read(*t, "x_ub", c.boxes.x_ub, n);
    read(*t, "u_lb", c.boxes.u_lb, m);
    read(*t, "u_ub", c.boxes.u_ub, m);
    if (const auto * node = t->get("mixed")) {
      const auto * arr = node->as_array();
      if (!arr) { throw ConfigError("'mixed' must be an array of tables"); }
      c.boxes.mixed.clear();
      for (const auto & item : *arr) {
        const auto * row = item.as_table();
        if (!row) { throw ConfigError("'mixed' must be an array of tables"); }
        check_keys(*row, {"cx", "cu", "lo", "hi"}, "constraints.mixed");
        LinearRow r{Eigen::RowVectorXd::Zero(n), Eigen::RowVectorXd::Zero(m), -kInf, kInf};
        VectorXd cx = VectorXd::Zero(n), cu = VectorXd::Zero(m);
        read(*row, "cx", cx, n);
        read(*row, "cu", cu, m);
        r.cx = cx.transpose();
        r.cu = cu.transpose();
        read(*row, "lo", r.lo);
        read(*row, "hi", r.hi);
        c.boxes.mixed.push_back(r);
      }
    }
  }

  if (const auto * t = subtable(root, "disturbance")) {
    check_keys(*t, {"w_max", "mode"}, "disturbance");
    read(*t, "w_max", c.bound.w_max);
    if (auto k = read_string(*t, "mode")) {
      c.disturbance = pick<DisturbanceMode>(*k, {{"uniform", DisturbanceMode::Uniform}, {"boundary", DisturbanceMode::Boundary}}, "disturbance.mode");
    }
  }

  if (const auto * t = subtable(root, "controller")) {
    check_keys(*t, {"kind", "Q", "R", "gain_scale", "target"}, "controller");
    if (auto k = read_string(*t, "kind")) {
      c.controller = pick<ControllerKind>(*k, {{"lqr", ControllerKind::Lqr}, {"aggressive", ControllerKind::Aggressive}}, "controller.kind");
    }
    read(*t, "Q", c.controller_Q, n);
    read(*t, "R", c.controller_R, m);
    read(*t, "gain_scale", c.gain_scale);
    read(*t, "target", c.target, n);
  }

  if (const auto * t = subtable(root, "filter")) {
    check_keys(*t, {"variant", "M", "M_r", "gamma", "H", "R", "R_r"}, "filter");
    int M = 1, M_r = 1;
    read(*t, "M", M);
    read(*t, "M_r", M_r);
    if (auto v = read_string(*t, "variant")) {
      if (*v == "multi_step") {
        c.filter = {true, Variant::MultiStep, M, 1};
      } else if (*v == "regularized") {
        c.filter = {true, Variant::OneStepRegularized, 1, M_r};
      } else {
        c.filter = parse_variant(*v);
      }
    }
    read(*t, "gamma", c.gamma);
    read(*t, "H", c.H);
    read(*t, "R", c.filter_R, m);
    read(*t, "R_r", c.filter_R_r, m);
  }

  if (const auto * t = subtable(root, "design")) {
    check_keys(*t, {"Q", "R", "gain", "terminal", "tightening", "steady_states", "level_fraction"}, "design");
    read(*t, "Q", c.design_Q, n);
    read(*t, "R", c.design_R, m);
    if (const auto * node = t->get("gain")) { c.tube_gain = read_matrix(*node, "gain", m, n); }
    if (auto k = read_string(*t, "terminal")) {
      c.terminal = pick<TerminalMode>(*k, {{"conservative", TerminalMode::Conservative}, {"robust", TerminalMode::Robust}, {"nominal", TerminalMode::Nominal}}, "design.terminal");
    }
    if (auto k = read_string(*t, "tightening")) {
      c.tightening = pick<Tightening>(*k, {{"ball", Tightening::Ball}, {"support", Tightening::Support}}, "design.tightening");
    }
    read(*t, "steady_states", c.steady_states);
    read(*t, "level_fraction", c.level_fraction);
  }

  if (const auto * t = subtable(root, "start")) {
    check_keys(*t, {"mode", "state", "lb", "ub", "min_violations", "max_rejections"}, "start");
    if (auto k = read_string(*t, "mode")) { c.start = pick<StartMode>(*k, {{"fixed", StartMode::Fixed}, {"sample", StartMode::Sample}}, "start.mode"); }
    read(*t, "state", c.start_state, n);
    read(*t, "lb", c.sample_lb, n);
    read(*t, "ub", c.sample_ub, n);
    read(*t, "min_violations", c.min_violations);
    read(*t, "max_rejections", c.max_rejections);
  }

  if (const auto * t = subtable(root, "compare")) {
    check_keys(*t, {"variants"}, "compare");
    if (const auto * node = t->get("variants")) {
      const auto * arr = node->as_array();
      if (!arr) { throw ConfigError("'variants' must be an array of strings"); }
      c.variants.clear();
      for (const auto & item : *arr) {
        const auto * s = item.as_string();
        if (!s) { throw ConfigError("'variants' must be an array of strings"); }
        c.variants.push_back(parse_variant(s->get()));
      }
    }
  }

  validate(c);
  return c;
}

inline std::string read_text(const std::filesystem::path & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw ConfigError("cannot open config file: " + path.string()); }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline ExperimentConfig load_config(const std::filesystem::path & path) { return parse_config(read_text(path)); }

}  // namespace mpsf::harness
