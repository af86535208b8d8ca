#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sharc/core.hpp"

namespace sharc {

/// Contiguous block of class indices [first, first + count).
struct ClassRange {
  std::size_t first = 0;
  std::size_t count = 0;

  bool contains(std::size_t c) const { return c >= first && c < first + count; }
  bool operator==(const ClassRange&) const = default;
};

struct LabeledExample {
  std::uint64_t id = 0;  // unique within a stream; keys precomputed features
  Tensor3 input;         // channels-last image, pixels in [0, 1]
  std::size_t label = 0;
  std::size_t task = 0;  // 0-based
};

struct TaskData {
  std::size_t id = 0;
  ClassRange classes;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
};

struct TaskStream {
  std::vector<TaskData> tasks;
  std::size_t classes_per_task = 0;
  std::size_t total_classes = 0;
  Dims3 input_dims;

  std::size_t task_count() const { return tasks.size(); }
};

/// Unsplit labelled data as read from disk.
struct LabeledSet {
  Dims3 dims;
  std::vector<LabeledExample> examples;
};

/// Indices into a task's train set; one batch never mixes tasks.
struct Batch {
  std::size_t task = 0;
  std::vector<std::size_t> indices;
};

struct SyntheticStreamSpec {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t per_class_train = 100;
  std::size_t per_class_test = 50;
  Dims3 image{16, 16, 3};
  double noise_sigma = 0.3;
};

/// Gaussian-around-class-mean images. Class means and every example are drawn
/// from streams derived from (rng seed, class, split, index), so the data are
/// fully determined by the seed.
TaskStream make_synthetic_stream(const SyntheticStreamSpec& spec, const RngStream& rng);

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
LabeledSet load_idx_dataset(const std::string& images_path, const std::string& labels_path);

void write_idx_dataset(const std::string& images_path, const std::string& labels_path,
                       std::size_t rows, std::size_t cols, const std::vector<std::uint8_t>& pixels,
                       const std::vector<std::uint8_t>& labels);

/// Distinct labels are ranked ascending and the lowest tasks * classes_per_task
/// of them are kept; rank r becomes class r and lands in task r / classes_per_task.
TaskStream split_into_tasks(const LabeledSet& set, std::size_t tasks, std::size_t classes_per_task,
                            double test_fraction, const RngStream& rng);

/// One epoch: a seeded shuffle cut into consecutive batches (last may be short).
std::vector<Batch> make_batches(const TaskData& task, std::size_t batch_size, RngStream& rng);

}  // namespace sharc
