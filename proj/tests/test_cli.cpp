#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "sharc/cli.hpp"

using namespace sharc;
namespace fs = std::filesystem;

namespace {

const Json kSmall = {
    {"seed", 1},
    {"mu", 0.5},
    {"buffer", {{"budget", 12}}},
    {"batch_size", 5},
    {"head", {{"hidden", 8}}},
    {"stream", {{"tasks", 2}, {"per_class_train", 10}, {"per_class_test", 5}, {"image", {8, 8, 3}}}},
};

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sharc");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  Cli r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("sharc_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

fs::path write_json(const fs::path& p, const Json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("config parsing reports the offending path") {
  auto bad = [](Json patch) {
    Json j = kSmall;
    j.merge_patch(patch);
    try {
      config_from_json(j);
    } catch (const ConfigError& e) {
      return e.path();
    }
    return std::string("<none>");
  };
  CHECK(bad({{"strategy", "adam"}}) == "strategy");
  CHECK(bad({{"mu", 1.0}}) == "mu");
  CHECK(bad({{"mu", -0.1}}) == "mu");
  CHECK(bad({{"lr", 0.0}}) == "lr");
  CHECK(bad({{"am", {{"kind", "lstm"}}}}) == "am.kind");
  CHECK(bad({{"am", {{"mhn", {{"betta", 2}}}}}}) == "am.mhn.betta");
  CHECK(bad({{"forgetting", {{"gamma", 0.0}}}}) == "forgetting.gamma");
  CHECK(bad({{"buffer", {{"unit", "pages"}}}}) == "buffer.unit");
  CHECK(bad({{"stream", {{"kind", "idx"}}}}) != "<none>");
  CHECK(bad({{"colour", "red"}}) == "colour");
  CHECK(bad(Json::object()) == "<none>");
}

TEST_CASE("config echo round-trips and the hash ignores the seed") {
  const auto cfg = config_from_json(kSmall);
  const Json echo = config_to_json(cfg);
  CHECK(config_to_json(config_from_json(echo)) == echo);
  auto other = cfg;
  other.seed = 99;
  CHECK(config_hash(other) == config_hash(cfg));
  CHECK(config_hash(cfg).size() == 16);
  other.mu = 0.25;
  CHECK(config_hash(other) != config_hash(cfg));
  CHECK(run_dir_name(cfg) == config_hash(cfg) + "-seed1");
}

TEST_CASE("grid expansion order and size") {
  const Json g = {{"base", kSmall},
                  {"axes",
                   {{"strategies", {"er", "agem"}},
                    {"buffers", {10, Json{{"budget", 4096}, {"unit", "bytes"}}}},
                    {"mus", {0.0, 0.5}},
                    {"seeds", {1, 2, 3}}}}};
  const auto spec = grid_from_json(g);
  CHECK(spec.size() == 2 * 2 * 2 * 3);
  const auto cells = spec.expand();
  REQUIRE(cells.size() == spec.size());
  CHECK(cells[0].strategy == Strategy::er);
  CHECK(cells[0].seed == 1);
  CHECK(cells[1].seed == 2);
  CHECK(cells[3].mu == 0.5);
  CHECK(cells[6].buffer_unit == BudgetUnit::bytes);
  CHECK(cells[6].buffer_budget == 4096);
  CHECK(cells[12].strategy == Strategy::agem);
  CHECK_THROWS_AS(grid_from_json(Json{{"base", kSmall}, {"axes", {{"colours", {1}}}}}), ConfigError);
}

TEST_CASE("summary statistics and golden headers") {
  auto result = [](std::uint64_t seed, double acc, double bwt) {
    auto cfg = config_from_json(kSmall);
    cfg.seed = seed;
    return Json{{"config", config_to_json(cfg)}, {"acc", acc}, {"bwt", bwt}};
  };
  const auto rows = summarize_results({result(1, 0.5, -0.1), result(2, 0.7, -0.3)});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].n_seeds == 2);
  CHECK(std::abs(rows[0].acc_mean - 0.6) < 1e-12);
  CHECK(std::abs(rows[0].acc_std - std::sqrt(0.02)) < 1e-12);
  CHECK(std::abs(rows[0].bwt_mean - -0.2) < 1e-12);
  CHECK_FALSE(rows[0].std_flag);
  CHECK(rows[0].buffer == "12");

  const auto single = summarize_results({result(1, 0.5, -0.1)});
  CHECK(single[0].std_flag);
  CHECK(single[0].acc_std == 0.0);

  CHECK(first_line(summary_csv(rows)) ==
        "scenario,strategy,buffer,am_kind,mu,n_seeds,acc_mean,acc_std,bwt_mean,bwt_std,std_flag");
  const auto theta = theta_csv(rows);
  CHECK(first_line(theta) == "# theta = mu (fraction of channels dropped)");
  CHECK(theta.find("\ntheta,n_seeds,acc_mean,acc_std,bwt_mean,bwt_std,std_flag\n") != std::string::npos);
  CHECK(theta.find("\n0.5,2,") != std::string::npos);
}

TEST_CASE("run writes every output and skips completed cells") {
  const auto dir = fresh_dir("run");
  const auto cfg = write_json(dir / "cfg.json", kSmall);
  auto r = cli({"run", "--config", cfg.string(), "--out", (dir / "out").string()});
  REQUIRE(r.code == 0);
  const auto run = dir / "out" / run_dir_name(config_from_json(kSmall));
  for (const char* f : {"result.json", "accuracy_matrix.csv", "learning_curve.csv", "fidelity.csv"})
    CHECK(fs::exists(run / f));
  CHECK(first_line(slurp(run / "accuracy_matrix.csv")) == "after_task,task_1,task_2");
  CHECK(first_line(slurp(run / "learning_curve.csv")) == "after_task,mean_accuracy");
  CHECK(first_line(slurp(run / "fidelity.csv")) == "task,retrieved_items,mean_mse");
  const auto before = slurp(run / "result.json");
  CHECK(Json::parse(before).contains("bwt"));

  r = cli({"run", "--config", cfg.string(), "--out", (dir / "out").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("skipped (complete)") != std::string::npos);
  CHECK(slurp(run / "result.json") == before);

  r = cli({"run", "--config", cfg.string(), "--out", (dir / "out").string(), "--force"});
  CHECK(r.out.find("skipped") == std::string::npos);
  CHECK(slurp(run / "result.json") == before);

  ::setenv("SHARC_OUT_DIR", (dir / "env").string().c_str(), 1);
  r = cli({"run", "--config", cfg.string(), "--seeds", "4,5"});
  ::unsetenv("SHARC_OUT_DIR");
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "env" / (config_hash(config_from_json(kSmall)) + "-seed4") / "result.json"));
  CHECK(fs::exists(dir / "env" / (config_hash(config_from_json(kSmall)) + "-seed5") / "result.json"));
}

TEST_CASE("schema and usage errors exit with 2") {
  const auto dir = fresh_dir("errors");
  Json j = kSmall;
  j["strategy"] = "adam";
  auto r = cli({"run", "--config", write_json(dir / "bad.json", j).string(), "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("strategy") != std::string::npos);
  CHECK(cli({"run"}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"run", "--config", (dir / "missing.json").string()}).code == 2);
  CHECK(cli({"sweep-theta", "--config", (dir / "bad.json").string(), "--thetas", "0.5"}).code == 2);
}

TEST_CASE("summarize refuses an incomplete grid unless asked") {
  const auto dir = fresh_dir("grid");
  const Json g = {{"base", kSmall}, {"axes", {{"mus", {0.25, 0.75}}, {"seeds", {1, 2}}}}};
  const auto spec = write_json(dir / "grid.json", g);
  const auto out = (dir / "out").string();
  auto r = cli({"grid", "--config", spec.string(), "--out", out, "--jobs", "2"});
  REQUIRE(r.code == 0);
  CHECK(Json::parse(slurp(dir / "out" / "manifest.json"))["cells"].size() == 4);
  r = cli({"summarize", "--out", out});
  CHECK(r.code == 0);
  CHECK(count_lines(slurp(dir / "out" / "summary.csv")) == 3);

  const auto victim = grid_from_json(g).expand()[1];
  fs::remove(dir / "out" / run_dir_name(victim) / "result.json");
  r = cli({"summarize", "--out", out});
  CHECK(r.code != 0);
  CHECK(r.err.find("--allow-partial") != std::string::npos);
  r = cli({"summarize", "--out", out, "--allow-partial"});
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
}

TEST_CASE("sweep-theta writes one row per theta and rejects theta = 0") {
  const auto dir = fresh_dir("theta");
  const auto cfg = write_json(dir / "cfg.json", kSmall);
  const auto out = (dir / "out").string();
  auto r = cli({"sweep-theta", "--config", cfg.string(), "--out", out, "--thetas", "0.25,0.5,1"});
  REQUIRE(r.code == 0);
  const auto csv = slurp(dir / "out" / "theta_sweep.csv");
  CHECK(first_line(csv) == kThetaComment);
  CHECK(count_lines(csv) == 2 + 3);
  CHECK(csv.find("\n0.25,1,") != std::string::npos);
  CHECK(csv.find("\n1,1,") != std::string::npos);
  CHECK(csv.find(",1\n") != std::string::npos);  // single seed: std flagged

  r = cli({"sweep-theta", "--config", cfg.string(), "--out", out, "--thetas", "0"});
  CHECK(r.code == 2);
  CHECK(r.err.find("theta") != std::string::npos);
}

TEST_CASE("compare-am deduplicates kinds with a warning") {
  const auto dir = fresh_dir("compare");
  const auto cfg = write_json(dir / "cfg.json", kSmall);
  auto r = cli({"compare-am", "--config", cfg.string(), "--out", (dir / "out").string(), "--kinds",
                "mhn,none,mhn", "--scenarios", "task-il,class-il"});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("duplicate am kind 'mhn'") != std::string::npos);
  const auto csv = slurp(dir / "out" / "compare_am.csv");
  CHECK(count_lines(csv) == 1 + 2 * 2);
  CHECK(csv.find(",mhn,") != std::string::npos);
  CHECK(csv.find(",none,") != std::string::npos);
  CHECK(cli({"compare-am", "--config", cfg.string(), "--out", (dir / "out").string(), "--kinds", "lstm"}).code == 2);
}

TEST_CASE("the installed binary reports exit codes") {
  const auto dir = fresh_dir("binary");
  const auto cfg = write_json(dir / "cfg.json", kSmall);
  const std::string bin = SHARC_BINARY;
  const auto quiet = " >" + (dir / "log").string() + " 2>&1";
  CHECK(std::system((bin + " --help" + quiet).c_str()) == 0);
  const int ok = std::system((bin + " run --config " + cfg.string() + " --out " + (dir / "out").string() + quiet).c_str());
  CHECK(WEXITSTATUS(ok) == 0);
  const int usage = std::system((bin + " run --bogus" + quiet).c_str());
  CHECK(WEXITSTATUS(usage) == 2);
}

TEST_CASE("published schema covers every config field with matching defaults") {
  std::ifstream in(std::string(SHARC_SOURCE_DIR) + "/docs/config.schema.json");
  REQUIRE(in);
  const Json schema = Json::parse(in);
  std::size_t checked = 0;
  std::function<void(const Json&, const Json&, const std::string&)> walk = [&](const Json& echo, const Json& node,
                                                                               const std::string& path) {
    CHECK_MESSAGE(node["additionalProperties"] == false, path);
    for (const auto& [key, value] : echo.items()) {
      const std::string here = path.empty() ? key : path + "." + key;
      REQUIRE_MESSAGE(node["properties"].contains(key), here);
      const Json& prop = node["properties"][key];
      if (value.is_object()) {
        walk(value, prop, here);
      } else {
        CHECK_MESSAGE(prop["default"] == value, here);
        ++checked;
      }
    }
    CHECK_MESSAGE(node["properties"].size() == echo.size(), path);
  };
  walk(config_to_json(ExperimentConfig{}), schema, "");
  CHECK(checked > 40);
  for (const char* example : {"/configs/er_mhn.json"}) {
    std::ifstream f(std::string(SHARC_SOURCE_DIR) + example);
    CHECK_NOTHROW(config_from_json(Json::parse(f)));
  }
  std::ifstream g(std::string(SHARC_SOURCE_DIR) + "/configs/grid_small.json");
  CHECK(grid_from_json(Json::parse(g)).size() == 24);
}
