// Command-line runner: run, metrics and compare.
// Exit codes: 0 success, 1 other failure, 2 config error, 3 infeasible start.

#include <mpsf.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace mpsf;
using namespace mpsf::harness;

namespace {

constexpr int kConfigError     = 2;
constexpr int kInfeasibleStart = 3;

void write_starts(const fs::path & path, const std::vector<VectorXd> & starts)
{
  std::ostringstream os;
  os << "trial";
  if (!starts.empty()) {
    for (Eigen::Index i = 0; i < starts.front().size(); ++i) { os << ",x" << i; }
  }
  os << '\n';
  for (std::size_t t = 0; t < starts.size(); ++t) {
    os << t;
    for (Eigen::Index i = 0; i < starts[t].size(); ++i) { os << ',' << format_double(starts[t](i)); }
    os << '\n';
  }
  write_text(path, os.str());
}

struct Prepared
{
  ExperimentConfig config;
  std::string text;
};

Prepared prepare(const std::string & path, std::optional<std::uint64_t> seed)
{
  Prepared p;
  p.text   = read_text(path);
  p.config = parse_config(p.text);
  if (seed) { p.config.seed = *seed; }
  return p;
}

int run(const std::string & config_path, const fs::path & out, std::optional<std::uint64_t> seed, int workers)
{
  const Prepared p  = prepare(config_path, seed);
  const Task task   = build_task(p.config);
  const auto starts = sample_start_states(task);
  fs::create_directories(out);
  write_text(out / "config.toml", p.text);
  write_starts(out / "starts.csv", starts);

  std::vector<std::optional<TrialArtifact>> trials(starts.size());
  parallel_for(static_cast<int>(starts.size()), workers, [&](int i) {
    trials[static_cast<std::size_t>(i)] = run_trial(task, p.config.filter, starts[static_cast<std::size_t>(i)], trial_seed(p.config, i));
  });
  for (std::size_t i = 0; i < trials.size(); ++i) {
    write_trial(out, static_cast<int>(i), *trials[i], task.R, p.config.eps);
    const auto s = summarize(trials[i]->log, task.R, p.config.eps);
    std::cout << trial_stem(static_cast<int>(i)) << ' ' << p.config.filter.name() << " rate " << s.rate_applied << " magnitude " << s.magnitude
              << " max " << s.max_correction << " corrections " << s.count << " violations " << trials[i]->violation_count()
              << " fallbacks " << trials[i]->fallback_count() << '\n';
  }
  return 0;
}

int metrics(const fs::path & csv_path, std::optional<double> eps, std::optional<double> dt)
{
  fs::path json_path = csv_path;
  json_path.replace_extension(".json");
  MatrixXd R;
  double step = dt.value_or(0.0), tol = eps.value_or(0.1);
  if (fs::exists(json_path)) {
    std::ifstream in(json_path);
    const Json j = Json::parse(in);
    R = json_matrix(j.at("R"));
    if (!dt) { step = j.at("dt").get<double>(); }
    if (!eps) { tol = j.at("eps").get<double>(); }
  } else if (!dt) {
    std::cerr << "error: " << json_path.string() << " not found; pass --dt\n";
    return 1;
  }
  std::ifstream in(csv_path);
  if (!in) {
    std::cerr << "error: cannot open " << csv_path.string() << '\n';
    return 1;
  }
  const TrialTable t = read_trial_csv(in, step);
  if (R.size() == 0) { R = MatrixXd::Identity(t.log.u_uncert.cols(), t.log.u_uncert.cols()); }
  std::cout << metrics_json(t.log, t.fallback, t.filtered(), R, tol).dump(2) << '\n';
  return 0;
}

int compare(const std::string & config_path, const fs::path & out, std::optional<std::uint64_t> seed, int workers)
{
  const Prepared p  = prepare(config_path, seed);
  const Task task   = build_task(p.config);
  const auto starts = sample_start_states(task);
  const auto cmp    = compare_filters(task, p.config.variants, starts, workers);
  fs::create_directories(out);
  write_text(out / "config.toml", p.text);
  write_starts(out / "starts.csv", starts);
  for (std::size_t v = 0; v < cmp.variants.size(); ++v) {
    for (std::size_t t = 0; t < starts.size(); ++t) {
      const auto & cell = cmp.cells[v][t];
      if (cell.trial) {
        write_trial(out / cmp.variants[v].name(), static_cast<int>(t), *cell.trial, task.R, p.config.eps);
      } else {
        std::cerr << cmp.variants[v].name() << ' ' << trial_stem(static_cast<int>(t)) << " failed: " << cell.error << '\n';
      }
    }
  }
  const std::string table = summary_csv(cmp, task.R, p.config.eps);
  write_text(out / "summary.csv", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Model predictive safety filter experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  auto * run_cmd = app.add_subcommand("run", "Run the configured filter from every start state");
  run_cmd->add_option("--config", config_path, "TOML experiment config")->required();
  run_cmd->add_option("--out", out_dir, "Output directory")->required();
  run_cmd->add_option("--seed", seed, "Override the config seed");
  run_cmd->add_option("--parallel", workers, "Worker threads")->check(CLI::PositiveNumber);

  std::string csv_path;
  std::optional<double> eps, dt;
  auto * metrics_cmd = app.add_subcommand("metrics", "Recompute metrics from a trial CSV");
  metrics_cmd->add_option("--in", csv_path, "Trial CSV")->required()->check(CLI::ExistingFile);
  metrics_cmd->add_option("--eps", eps, "Correction tolerance (default: the trial's)");
  metrics_cmd->add_option("--dt", dt, "Step period when no trial JSON sits next to the CSV");

  auto * compare_cmd = app.add_subcommand("compare", "Run all configured variants and write the summary table");
  compare_cmd->add_option("--config", config_path, "TOML experiment config")->required();
  compare_cmd->add_option("--out", out_dir, "Output directory")->required();
  compare_cmd->add_option("--seed", seed, "Override the config seed");
  compare_cmd->add_option("--parallel", workers, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError & e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    if (*run_cmd) { return run(config_path, out_dir, seed, workers); }
    if (*metrics_cmd) { return metrics(csv_path, eps, dt); }
    if (*compare_cmd) { return compare(config_path, out_dir, seed, workers); }
  } catch (const ConfigError & e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const InfeasibleStart & e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInfeasibleStart;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.what() == std::string_view("no qualifying start states") ? kInfeasibleStart : 1;
  }
  return 1;
}
