#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "sharc/am.hpp"
#include "sharc/model.hpp"
#include "sharc/replay.hpp"
#include "sharc/stream.hpp"

namespace sharc {

using Json = nlohmann::json;

enum class Scenario { task_il, class_il };
enum class StreamKind { synthetic, idx, features };

std::string to_string(Scenario s);

/// Schema violation; `path` is a JSON-pointer-like location such as "am.kind".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct StreamConfig {
  StreamKind kind = StreamKind::synthetic;
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  SyntheticStreamSpec synthetic;  // tasks / classes_per_task taken from above
  std::string images_path;
  std::string labels_path;
  std::string features_path;
  double test_fraction = 0.2;
};

struct AmConfig {
  std::optional<MemoryKind> kind;  // nullopt: replay the zero-filled cue directly
  HopfieldOptions hopfield;
  MhnOptions mhn;
  PcnSpec pcn;  // dim is filled in from the feature map size
  PcnWriteOptions pcn_write;
  PcnReadOptions pcn_read;
  bool write_full_task = false;
  bool clamp_output = true;  // restore kept channels exactly after a read
};

struct ExperimentConfig {
  Scenario scenario = Scenario::task_il;
  Strategy strategy = Strategy::er;
  AmConfig am;
  double mu = 0.5;
  std::size_t buffer_budget = 200;
  BudgetUnit buffer_unit = BudgetUnit::slots;
  std::size_t batch_size = 10;
  std::size_t epochs_per_task = 1;
  double lr = 0.1;
  std::size_t forget_every = 1;
  double forget_gamma = 1.0;
  std::uint64_t seed = 0;
  bool saliency_predicted_label = false;
  double gem_eps = 0.0;
  StreamConfig stream;
  ConvBackboneSpec backbone;
  std::size_t head_hidden = 64;
  Activation head_activation = Activation::relu;
};

/// Parses and validates; unknown keys and out-of-range values raise ConfigError.
ExperimentConfig config_from_json(const Json& j);
/// Fully expanded echo (every field, defaults included). Round-trips through
/// config_from_json.
Json config_to_json(const ExperimentConfig& cfg);

/// 16 hex digits of FNV-1a over the canonical echo with the seed removed.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace sharc
