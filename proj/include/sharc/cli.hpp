#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sharc/config.hpp"
#include "sharc/trainer.hpp"

namespace sharc {

struct BufferSetting {
  std::size_t budget = 0;
  BudgetUnit unit = BudgetUnit::slots;
  bool operator==(const BufferSetting&) const = default;
};

/// Base config plus axes; expand() yields the Cartesian product in
/// scenario, strategy, buffer, am kind, mu, seed order.
struct GridSpec {
  ExperimentConfig base;
  std::vector<Scenario> scenarios;
  std::vector<Strategy> strategies;
  std::vector<BufferSetting> buffers;
  std::vector<std::optional<MemoryKind>> am_kinds;
  std::vector<double> mus;
  std::vector<std::uint64_t> seeds;

  std::size_t size() const;
  std::vector<ExperimentConfig> expand() const;
};

/// {"base": {...config...}, "axes": {"scenarios", "strategies", "buffers",
/// "am_kinds", "mus", "seeds"}}. Missing axes default to the base value.
GridSpec grid_from_json(const Json& j);

/// "<config hash>-seed<seed>"
std::string run_dir_name(const ExperimentConfig& cfg);

struct SummaryRow {
  std::string scenario;
  std::string strategy;
  std::string buffer;  // "200" for slots, "4096B" for bytes
  std::string am_kind;
  double mu = 0.0;
  std::size_t n_seeds = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double bwt_mean = 0.0;
  double bwt_std = 0.0;
  bool std_flag = false;  // fewer than two seeds; stds reported as 0
};

inline constexpr const char* kSummaryHeader =
    "scenario,strategy,buffer,am_kind,mu,n_seeds,acc_mean,acc_std,bwt_mean,bwt_std,std_flag";
inline constexpr const char* kThetaComment = "# theta = mu (fraction of channels dropped)";
inline constexpr const char* kThetaHeader = "theta,n_seeds,acc_mean,acc_std,bwt_mean,bwt_std,std_flag";

/// Groups result.json documents by (scenario, strategy, buffer, am kind, mu);
/// rows come out sorted by that key.
std::vector<SummaryRow> summarize_results(const std::vector<Json>& results);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string theta_csv(const std::vector<SummaryRow>& rows);

/// Entry point of the `sharc` tool. Returns 0 on success, 2 on usage or
/// schema errors, 1 on runtime failures.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace sharc
