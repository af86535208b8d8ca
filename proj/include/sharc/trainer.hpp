#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sharc/am.hpp"
#include "sharc/config.hpp"
#include "sharc/model.hpp"
#include "sharc/replay.hpp"
#include "sharc/stream.hpp"

namespace sharc {

/// Stream tags for RngStream(cfg.seed).derive(tag).
inline constexpr std::uint64_t kDataTag = 1;
inline constexpr std::uint64_t kHeadTag = 2;
inline constexpr std::uint64_t kReplayTag = 3;
inline constexpr std::uint64_t kBatchTagBase = 1000;  // + task index

/// Task stream plus backbone outputs for every example, computed once.
struct PreparedData {
  TaskStream stream;
  Dims3 feature_dims;
  std::vector<std::vector<FeatureMap>> train;  // [task][example]
  std::vector<std::vector<FeatureMap>> test;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

/// r[i][j]: accuracy on task j after training task i. Entries with j > i stay empty.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0);

  std::size_t tasks() const { return r_.size(); }
  const std::optional<double>& at(std::size_t i, std::size_t j) const { return r_.at(i).at(j); }
  void set(std::size_t i, std::size_t j, double value);
  bool row_complete(std::size_t i) const;

 private:
  std::vector<std::vector<std::optional<double>>> r_;
};

/// Mean of the final row; throws if any entry of it is missing.
double acc_metric(const AccuracyMatrix& m);
/// Mean over j < T of r[T][j] - r[j][j]. Throws "BWT undefined" when T = 1.
double bwt_metric(const AccuracyMatrix& m);

/// Per-coordinate affine map fitted on the first task's training features.
/// AMs see standardized vectors; near-constant coordinates get unit scale.
struct Standardizer {
  Vec mean;
  Vec scale;

  static Standardizer fit(const std::vector<FeatureMap>& maps);
  Vec forward(std::span<const double> x) const;
  Vec inverse(std::span<const double> z) const;
};

std::unique_ptr<AssociativeMemory> make_memory(const AmConfig& cfg, std::size_t dim);

struct FidelityEntry {
  std::size_t task = 0;
  std::size_t retrieved_items = 0;
  std::optional<double> mean_mse;  // empty when nothing was retrieved
};

struct RunResult {
  Json config;
  std::size_t tasks = 0;
  AccuracyMatrix accuracy;
  std::size_t completed_tasks = 0;
  double acc = 0.0;
  double bwt = 0.0;
  bool bwt_defined = false;
  std::vector<double> learning_curve;  // mean of row t over tasks <= t
  std::vector<FidelityEntry> fidelity;
  std::vector<double> seconds_per_task;
  std::size_t buffer_items = 0;
  std::size_t buffer_bytes = 0;
  std::string error;  // non-empty when the run aborted; fields hold what finished

  bool complete() const { return error.empty(); }
};

/// Accuracy over the test sets of tasks 0..upto. Task-IL masks each task's logits.
std::vector<double> evaluate(const Head& head, const PreparedData& data, std::size_t upto, Scenario scenario);

RunResult run_experiment(const ExperimentConfig& cfg);
RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data);

/// result.json (written last), accuracy_matrix.csv, learning_curve.csv,
/// fidelity.csv, and timing.json into `dir`. Everything except timing.json is
/// a pure function of the config.
void write_run_outputs(const RunResult& result, const std::string& dir);
Json result_to_json(const RunResult& result);

/// Shortest round-trip decimal form.
std::string format_number(double v);

}  // namespace sharc
