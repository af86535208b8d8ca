#include "sharc/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <CLI11.hpp>

namespace sharc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Grid

std::size_t GridSpec::size() const {
  return scenarios.size() * strategies.size() * buffers.size() * am_kinds.size() * mus.size() * seeds.size();
}

std::vector<ExperimentConfig> GridSpec::expand() const {
  std::vector<ExperimentConfig> out;
  for (auto sc : scenarios)
    for (auto st : strategies)
      for (const auto& b : buffers)
        for (const auto& k : am_kinds)
          for (double mu : mus)
            for (auto seed : seeds) {
              ExperimentConfig c = base;
              c.scenario = sc;
              c.strategy = st;
              c.buffer_budget = b.budget;
              c.buffer_unit = b.unit;
              c.am.kind = k;
              c.mu = mu;
              c.seed = seed;
              out.push_back(c);
            }
  return out;
}

namespace {

const Json& axis(const Json& axes, const std::string& key) {
  const Json& v = axes.at(key);
  if (!v.is_array() || v.empty()) throw ConfigError("axes." + key, "expected a non-empty array");
  return v;
}

// Validates one axis value by routing it through the config parser.
ExperimentConfig with_field(const ExperimentConfig& base, const std::string& key, const Json& value,
                            const std::string& path) {
  Json j = config_to_json(base);
  j[key] = value;
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

GridSpec grid_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("$", "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "base" && key != "axes") throw ConfigError(key, "unknown field");
  }
  GridSpec g;
  g.base = config_from_json(j.value("base", Json::object()));
  const Json axes = j.value("axes", Json::object());
  if (!axes.is_object()) throw ConfigError("axes", "expected an object");
  static const std::set<std::string> known{"scenarios", "strategies", "buffers", "am_kinds", "mus", "seeds"};
  for (const auto& [key, _] : axes.items()) {
    if (!known.count(key)) throw ConfigError("axes." + key, "unknown field");
  }

  auto each = [&](const std::string& key, const std::string& field, auto apply) {
    if (!axes.contains(key)) return;
    const Json& v = axis(axes, key);
    for (std::size_t i = 0; i < v.size(); ++i) {
      apply(with_field(g.base, field, v[i], "axes." + key + "[" + std::to_string(i) + "]"));
    }
  };
  each("scenarios", "scenario", [&](const ExperimentConfig& c) { g.scenarios.push_back(c.scenario); });
  each("strategies", "strategy", [&](const ExperimentConfig& c) { g.strategies.push_back(c.strategy); });
  each("mus", "mu", [&](const ExperimentConfig& c) { g.mus.push_back(c.mu); });
  each("seeds", "seed", [&](const ExperimentConfig& c) { g.seeds.push_back(c.seed); });
  if (axes.contains("am_kinds")) {
    const Json& v = axis(axes, "am_kinds");
    for (std::size_t i = 0; i < v.size(); ++i) {
      Json am = config_to_json(g.base)["am"];
      am["kind"] = v[i];
      g.am_kinds.push_back(
          with_field(g.base, "am", am, "axes.am_kinds[" + std::to_string(i) + "]").am.kind);
    }
  }
  if (axes.contains("buffers")) {
    const Json& v = axis(axes, "buffers");
    for (std::size_t i = 0; i < v.size(); ++i) {
      Json buf = v[i].is_object() ? v[i] : Json{{"budget", v[i]}};
      const auto c = with_field(g.base, "buffer", buf, "axes.buffers[" + std::to_string(i) + "]");
      g.buffers.push_back({c.buffer_budget, c.buffer_unit});
    }
  }

  if (g.scenarios.empty()) g.scenarios = {g.base.scenario};
  if (g.strategies.empty()) g.strategies = {g.base.strategy};
  if (g.buffers.empty()) g.buffers = {{g.base.buffer_budget, g.base.buffer_unit}};
  if (g.am_kinds.empty()) g.am_kinds = {g.base.am.kind};
  if (g.mus.empty()) g.mus = {g.base.mu};
  if (g.seeds.empty()) g.seeds = {g.base.seed};
  return g;
}

std::string run_dir_name(const ExperimentConfig& cfg) {
  return config_hash(cfg) + "-seed" + std::to_string(cfg.seed);
}

// ---------------------------------------------------------------------------
// Summaries

std::vector<SummaryRow> summarize_results(const std::vector<Json>& results) {
  using Key = std::tuple<std::string, std::string, std::string, std::string, double>;
  std::map<Key, std::vector<std::pair<double, double>>> groups;
  for (const auto& r : results) {
    const Json& c = r.at("config");
    const Json& b = c.at("buffer");
    std::string buffer = std::to_string(b.at("budget").get<std::size_t>());
    if (b.at("unit") == "bytes") buffer += "B";
    Key key{c.at("scenario").get<std::string>(), c.at("strategy").get<std::string>(), buffer,
            c.at("am").at("kind").get<std::string>(), c.at("mu").get<double>()};
    groups[key].emplace_back(r.at("acc").get<double>(), r.at("bwt").get<double>());
  }

  std::vector<SummaryRow> rows;
  for (const auto& [key, values] : groups) {
    SummaryRow row;
    std::tie(row.scenario, row.strategy, row.buffer, row.am_kind, row.mu) = key;
    const double n = static_cast<double>(values.size());
    row.n_seeds = values.size();
    for (const auto& [a, b] : values) {
      row.acc_mean += a / n;
      row.bwt_mean += b / n;
    }
    row.std_flag = values.size() < 2;
    if (!row.std_flag) {
      double sa = 0.0, sb = 0.0;
      for (const auto& [a, b] : values) {
        sa += (a - row.acc_mean) * (a - row.acc_mean);
        sb += (b - row.bwt_mean) * (b - row.bwt_mean);
      }
      row.acc_std = std::sqrt(sa / (n - 1.0));
      row.bwt_std = std::sqrt(sb / (n - 1.0));
    }
    rows.push_back(row);
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    out << r.scenario << ',' << r.strategy << ',' << r.buffer << ',' << r.am_kind << ',' << format_number(r.mu) << ','
        << r.n_seeds << ',' << format_number(r.acc_mean) << ',' << format_number(r.acc_std) << ','
        << format_number(r.bwt_mean) << ',' << format_number(r.bwt_std) << ',' << (r.std_flag ? 1 : 0) << '\n';
  }
  return out.str();
}

namespace {

// theta = 1 keeps only the single top channel; the config needs mu < 1.
double theta_to_mu(double theta) { return theta >= 1.0 ? std::nextafter(1.0, 0.0) : theta; }
double mu_to_theta(double mu) { return mu == std::nextafter(1.0, 0.0) ? 1.0 : mu; }

}  // namespace

std::string theta_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << kThetaComment << '\n' << kThetaHeader << '\n';
  for (const auto& r : rows) {
    out << format_number(mu_to_theta(r.mu)) << ',' << r.n_seeds << ',' << format_number(r.acc_mean) << ','
        << format_number(r.acc_std) << ',' << format_number(r.bwt_mean) << ',' << format_number(r.bwt_std) << ','
        << (r.std_flag ? 1 : 0) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Execution

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": invalid JSON: " + e.what());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SHARC_OUT_DIR"); env && *env) return env;
  return "runs";
}

struct Options {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  bool force = false;
  bool allow_partial = false;
  std::optional<std::size_t> byte_budget;
  std::size_t jobs = 0;
};

void apply_overrides(ExperimentConfig& cfg, const Options& o) {
  if (o.byte_budget) {
    cfg.buffer_budget = *o.byte_budget;
    cfg.buffer_unit = BudgetUnit::bytes;
  }
}

// Runs every cell, skipping completed ones. Returns the number of failures.
std::size_t execute(const std::vector<ExperimentConfig>& cells, const fs::path& root, const Options& o,
                    std::ostream& out, std::ostream& err) {
  std::size_t jobs = o.jobs ? o.jobs : std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, std::max<std::size_t>(cells.size(), 1));
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> failures{0};
  std::mutex io;

  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& cfg = cells[i];
      const std::string name = run_dir_name(cfg);
      const fs::path dir = root / name;
      if (!o.force && fs::exists(dir / "result.json")) {
        std::lock_guard lock(io);
        out << name << ": skipped (complete)\n";
        continue;
      }
      try {
        const RunResult r = run_experiment(cfg);
        write_run_outputs(r, dir.string());
        std::lock_guard lock(io);
        if (r.complete()) {
          out << name << ": acc=" << format_number(r.acc) << " bwt=" << format_number(r.bwt) << '\n';
        } else {
          ++failures;
          err << name << ": error after " << r.completed_tasks << " task(s): " << r.error << '\n';
        }
      } catch (const std::exception& e) {
        ++failures;
        std::lock_guard lock(io);
        err << name << ": error: " << e.what() << '\n';
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return failures;
}

void write_manifest(const fs::path& root, const std::vector<ExperimentConfig>& cells) {
  Json names = Json::array();
  for (const auto& c : cells) names.push_back(run_dir_name(c));
  fs::create_directories(root);
  write_file(root / "manifest.json", Json{{"size", cells.size()}, {"cells", names}}.dump(2) + "\n");
}

// Loads result.json for each cell; missing ones are counted, not fatal.
std::vector<Json> collect(const fs::path& root, const std::vector<std::string>& names, std::size_t& missing) {
  std::vector<Json> results;
  missing = 0;
  for (const auto& name : names) {
    const fs::path p = root / name / "result.json";
    if (!fs::exists(p)) {
      ++missing;
      continue;
    }
    results.push_back(read_json_file(p.string()));
  }
  return results;
}

std::vector<std::string> cell_names(const std::vector<ExperimentConfig>& cells) {
  std::vector<std::string> names;
  for (const auto& c : cells) names.push_back(run_dir_name(c));
  return names;
}

ExperimentConfig load_config(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  ExperimentConfig cfg = config_from_json(read_json_file(o.config));
  apply_overrides(cfg, o);
  return cfg;
}

std::vector<std::uint64_t> seeds_or(const Options& o, std::uint64_t fallback) {
  return o.seeds.empty() ? std::vector<std::uint64_t>{fallback} : o.seeds;
}

int cmd_run(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig base = load_config(o);
  std::vector<ExperimentConfig> cells;
  for (auto s : seeds_or(o, base.seed)) {
    cells.push_back(base);
    cells.back().seed = s;
  }
  return execute(cells, output_root(o.out), o, out, err) ? 1 : 0;
}

int cmd_grid(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.config.empty()) throw UsageError("--config is required");
  GridSpec g = grid_from_json(read_json_file(o.config));
  apply_overrides(g.base, o);
  if (o.byte_budget) g.buffers = {{*o.byte_budget, BudgetUnit::bytes}};
  if (!o.seeds.empty()) g.seeds = o.seeds;
  const auto cells = g.expand();
  const fs::path root = output_root(o.out);
  out << "grid: " << g.scenarios.size() << " scenario(s) x " << g.strategies.size() << " strategy(ies) x "
      << g.buffers.size() << " buffer(s) x " << g.am_kinds.size() << " am kind(s) x " << g.mus.size() << " mu x "
      << g.seeds.size() << " seed(s) = " << cells.size() << " runs\n";
  write_manifest(root, cells);
  return execute(cells, root, o, out, err) ? 1 : 0;
}

int cmd_summarize(const Options& o, std::ostream& out, std::ostream& err) {
  const fs::path root = output_root(o.out);
  std::vector<std::string> names;
  if (fs::exists(root / "manifest.json")) {
    const Json manifest = read_json_file((root / "manifest.json").string());
    for (const auto& n : manifest.at("cells")) names.push_back(n.get<std::string>());
  } else if (fs::is_directory(root)) {
    for (const auto& entry : fs::directory_iterator(root)) {
      if (fs::exists(entry.path() / "result.json")) names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
  }
  if (names.empty()) throw std::runtime_error("no runs found under " + root.string());
  std::size_t missing = 0;
  const auto results = collect(root, names, missing);
  if (missing && !o.allow_partial) {
    err << "grid incomplete: " << missing << " of " << names.size()
        << " runs have no result.json (use --allow-partial to summarize anyway)\n";
    return 1;
  }
  if (missing) err << "warning: summarizing " << results.size() << " of " << names.size() << " runs\n";
  if (results.empty()) throw std::runtime_error("no completed runs to summarize");
  const std::string csv = summary_csv(summarize_results(results));
  write_file(root / "summary.csv", csv);
  out << csv;
  return 0;
}

int cmd_sweep_theta(const Options& o, const std::vector<double>& thetas, std::ostream& out, std::ostream& err) {
  const ExperimentConfig base = load_config(o);
  GridSpec g;
  g.base = base;
  g.scenarios = {base.scenario};
  g.strategies = {base.strategy};
  g.buffers = {{base.buffer_budget, base.buffer_unit}};
  g.am_kinds = {base.am.kind};
  g.seeds = seeds_or(o, base.seed);
  for (double th : thetas) {
    if (!(th > 0.0 && th <= 1.0)) throw ConfigError("thetas", "each theta must lie in (0, 1], got " + format_number(th));
    const double mu = theta_to_mu(th);
    if (std::find(g.mus.begin(), g.mus.end(), mu) == g.mus.end()) g.mus.push_back(mu);
  }
  const auto cells = g.expand();
  const fs::path root = output_root(o.out);
  out << "sweep-theta: " << g.mus.size() << " theta(s) x " << g.seeds.size() << " seed(s) = " << cells.size()
      << " runs\n";
  write_manifest(root, cells);
  const std::size_t failures = execute(cells, root, o, out, err);
  std::size_t missing = 0;
  const auto results = collect(root, cell_names(cells), missing);
  if (results.empty()) return 1;
  const std::string csv = theta_csv(summarize_results(results));
  write_file(root / "theta_sweep.csv", csv);
  out << csv;
  return failures ? 1 : 0;
}

int cmd_compare_am(const Options& o, const std::vector<std::string>& kinds, const std::vector<std::string>& scenarios,
                   std::ostream& out, std::ostream& err) {
  const ExperimentConfig base = load_config(o);
  GridSpec g;
  g.base = base;
  g.strategies = {base.strategy};
  g.buffers = {{base.buffer_budget, base.buffer_unit}};
  g.mus = {base.mu};
  g.seeds = seeds_or(o, base.seed);
  std::set<std::string> seen;
  for (const auto& k : kinds) {
    if (!seen.insert(k).second) {
      err << "warning: duplicate am kind '" << k << "' ignored\n";
      continue;
    }
    if (k == "none") {
      g.am_kinds.push_back(std::nullopt);
    } else {
      try {
        g.am_kinds.push_back(parse_memory_kind(k));
      } catch (const std::invalid_argument&) {
        throw ConfigError("kinds", "unknown am kind '" + k + "'");
      }
    }
  }
  if (scenarios.empty()) g.scenarios = {base.scenario};
  for (const auto& s : scenarios) {
    if (s == "task-il") {
      g.scenarios.push_back(Scenario::task_il);
    } else if (s == "class-il") {
      g.scenarios.push_back(Scenario::class_il);
    } else {
      throw ConfigError("scenarios", "unknown scenario '" + s + "'");
    }
  }
  const auto cells = g.expand();
  const fs::path root = output_root(o.out);
  out << "compare-am: " << g.scenarios.size() << " scenario(s) x " << g.am_kinds.size() << " am kind(s) x "
      << g.seeds.size() << " seed(s) = " << cells.size() << " runs\n";
  write_manifest(root, cells);
  const std::size_t failures = execute(cells, root, o, out, err);
  std::size_t missing = 0;
  const auto results = collect(root, cell_names(cells), missing);
  if (results.empty()) return 1;
  const std::string csv = summary_csv(summarize_results(results));
  write_file(root / "compare_am.csv", csv);
  out << csv;
  return failures ? 1 : 0;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"sharc: saliency-guided sparse replay with associative memories"};
  app.require_subcommand(1);
  Options o;
  std::vector<double> thetas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::string> kinds{"hopfield", "mhn", "pcn", "none"};
  std::vector<std::string> scenarios;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", o.config, "experiment config (JSON)");
    if (needs_config) opt->required();
    sub->add_option("--out", o.out, "output root (default: $SHARC_OUT_DIR or ./runs)");
  };
  auto running = [&](CLI::App* sub) {
    sub->add_option("--seeds", o.seeds, "comma-separated seeds")->delimiter(',');
    sub->add_flag("--force", o.force, "rerun cells that already have results");
    sub->add_option("--byte-budget", o.byte_budget, "buffer budget in bytes instead of slots");
    sub->add_option("--jobs", o.jobs, "worker threads (default: hardware concurrency)");
  };

  auto* run = app.add_subcommand("run", "run one config (once per seed)");
  common(run, true);
  running(run);
  auto* grid = app.add_subcommand("grid", "run a grid spec {base, axes}");
  common(grid, true);
  running(grid);
  auto* sweep = app.add_subcommand("sweep-theta", "sweep the masking fraction");
  common(sweep, true);
  running(sweep);
  sweep->add_option("--thetas", thetas, "comma-separated thetas in (0, 1]")->delimiter(',');
  auto* compare = app.add_subcommand("compare-am", "compare associative memory kinds");
  common(compare, true);
  running(compare);
  compare->add_option("--kinds", kinds, "comma-separated am kinds")->delimiter(',');
  compare->add_option("--scenarios", scenarios, "comma-separated scenarios")->delimiter(',');
  auto* summarize = app.add_subcommand("summarize", "summarize a finished grid directory");
  common(summarize, false);
  summarize->add_flag("--allow-partial", o.allow_partial, "summarize even if some runs are missing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return cmd_run(o, out, err);
    if (grid->parsed()) return cmd_grid(o, out, err);
    if (sweep->parsed()) return cmd_sweep_theta(o, thetas, out, err);
    if (compare->parsed()) return cmd_compare_am(o, kinds, scenarios, out, err);
    if (summarize->parsed()) return cmd_summarize(o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace sharc
