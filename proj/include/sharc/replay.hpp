#pragma once

#include <cstddef>
#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sharc/core.hpp"
#include "sharc/model.hpp"
#include "sharc/saliency.hpp"

namespace sharc {

enum class BudgetUnit { slots, bytes };

struct BufferSlot {
  SparseFeatureMap map;
  std::size_t label = 0;
  std::size_t source = 0;  // index of the originating example in its task's train set

  bool operator==(const BufferSlot&) const = default;
};

/// Per-task episodic memory with a fixed total budget split evenly over the
/// tasks. Each task keeps its most recent items (last-m policy).
class EpisodicBuffer {
 public:
  EpisodicBuffer(std::size_t budget, std::size_t tasks, BudgetUnit unit = BudgetUnit::slots);

  /// Appends to task `task`, then evicts that task's oldest items until it is
  /// back within its share. Other tasks are never touched.
  void insert(std::size_t task, BufferSlot item);

  /// Uniform sample without replacement (with replacement if n exceeds the
  /// available count). No task selects the pool of all tasks, in task order.
  std::vector<BufferSlot> sample(std::optional<std::size_t> task, std::size_t n, RngStream& rng) const;

  const std::deque<BufferSlot>& items(std::size_t task) const { return per_task_.at(task); }
  std::size_t task_count() const { return per_task_.size(); }
  std::size_t size() const;
  std::size_t bytes_used() const;
  std::size_t task_bytes(std::size_t task) const;
  std::size_t budget() const { return budget_; }
  BudgetUnit unit() const { return unit_; }
  /// Per-task share: slots in slot mode, bytes in byte mode.
  std::size_t per_task_share() const { return budget_ / per_task_.size(); }
  std::size_t slots_per_task() const { return unit_ == BudgetUnit::slots ? per_task_share() : 0; }

  /// Task-count header, then per task an item count followed by
  /// (source u32, sparse feature map) records.
  void save(std::ostream& out) const;
  static EpisodicBuffer load(std::istream& in, std::size_t budget, BudgetUnit unit);

 private:
  std::size_t budget_;
  BudgetUnit unit_;
  std::vector<std::deque<BufferSlot>> per_task_;
};

/// Single-constraint projection: returns g unchanged when g.ref >= 0,
/// otherwise g - (g.ref / ref.ref) ref.
Vec agem_project(std::span<const double> g, std::span<const double> ref);

struct GemOptions {
  double eps = 0.0;
  double tolerance = 1e-10;
  std::size_t max_iters = 10000;
  double feasibility_tolerance = 1e-6;
};

/// Euclidean projection of g onto {z : z.ref_k >= -eps for all k}, via
/// projected coordinate ascent on the dual multipliers (z = g + sum v_k ref_k,
/// v >= 0), finished by an exact solve on the active support. Throws if the result violates a constraint by more than
/// options.feasibility_tolerance.
Vec gem_project(std::span<const double> g, std::span<const Vec> refs, const GemOptions& options = {});

enum class Strategy { sgd, joint, er, gem, agem };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

/// Replay material available to one classifier step.
struct ReplayContext {
  /// Retrieved memories grouped by past task (index k < current task).
  std::vector<std::vector<TrainItem>> per_task;
  /// Raw training data of all earlier tasks; consumed by JOINT only.
  std::vector<TrainItem> joint;
  /// Minibatch size drawn from the pooled memories by ER and A-GEM.
  std::size_t replay_batch = 10;
  GemOptions gem;
};

struct StepInfo {
  Vec direction;     // the vector the parameters moved against (theta -= lr * direction)
  Vec reference;     // A-GEM reference gradient (empty otherwise)
  bool projected = false;
  double loss = 0.0; // loss on the current batch
};

/// One classifier update for the given strategy. With no past tasks every
/// strategy reduces to the plain SGD step.
StepInfo strategy_step(Strategy strategy, Head& head, std::span<const TrainItem> batch, const ReplayContext& replay,
                       double lr, RngStream& rng);

}  // namespace sharc
