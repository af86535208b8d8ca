#include "sharc/stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <stdexcept>

namespace sharc {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& path) {
  if (offset + 4 > bytes.size()) throw std::runtime_error(path + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

TaskStream make_synthetic_stream(const SyntheticStreamSpec& spec, const RngStream& rng) {
  if (spec.tasks == 0 || spec.classes_per_task == 0 || spec.per_class_train == 0 ||
      spec.per_class_test == 0 || spec.image.volume() == 0) {
    throw std::invalid_argument("synthetic stream counts must be >= 1");
  }
  if (!(spec.noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");

  TaskStream stream;
  stream.classes_per_task = spec.classes_per_task;
  stream.total_classes = spec.tasks * spec.classes_per_task;
  stream.input_dims = spec.image;

  std::uint64_t next_id = 0;
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    TaskData task;
    task.id = t;
    task.classes = {t * spec.classes_per_task, spec.classes_per_task};
    for (std::size_t c = task.classes.first; c < task.classes.first + task.classes.count; ++c) {
      RngStream mean_rng = rng.derive(2 * c);
      RngStream noise_rng = rng.derive(2 * c + 1);
      Vec mean(spec.image.volume());
      for (double& m : mean) m = mean_rng.uniform();

      auto draw = [&] {
        Vec px(mean.size());
        for (std::size_t i = 0; i < px.size(); ++i) {
          double v = mean[i];
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise_rng.normal();
          px[i] = std::clamp(v, 0.0, 1.0);
        }
        return LabeledExample{next_id++, Tensor3(spec.image, std::move(px)), c, t};
      };
      for (std::size_t n = 0; n < spec.per_class_train; ++n) task.train.push_back(draw());
      for (std::size_t n = 0; n < spec.per_class_test; ++n) task.test.push_back(draw());
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

LabeledSet load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);

  if (be32(images, 0, images_path) != kIdxImagesMagic) {
    throw std::runtime_error(images_path + ": not an IDX file");
  }
  if (be32(labels, 0, labels_path) != kIdxLabelsMagic) {
    throw std::runtime_error(labels_path + ": not an IDX file");
  }
  const std::size_t count = be32(images, 4, images_path);
  const std::size_t rows = be32(images, 8, images_path);
  const std::size_t cols = be32(images, 12, images_path);
  const std::size_t label_count = be32(labels, 4, labels_path);
  if (count != label_count) {
    throw std::runtime_error("IDX image count " + std::to_string(count) + " does not match label count " +
                             std::to_string(label_count));
  }
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + count * pixels) throw std::runtime_error(images_path + ": truncated IDX data");
  if (labels.size() < 8 + count) throw std::runtime_error(labels_path + ": truncated IDX data");

  LabeledSet set;
  set.dims = {rows, cols, 1};
  set.examples.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    Vec px(pixels);
    const std::uint8_t* src = images.data() + 16 + n * pixels;
    for (std::size_t i = 0; i < pixels; ++i) px[i] = static_cast<double>(src[i]) / 255.0;
    set.examples.push_back({n, Tensor3(set.dims, std::move(px)), labels[8 + n], 0});
  }
  return set;
}

void write_idx_dataset(const std::string& images_path, const std::string& labels_path, std::size_t rows,
                       std::size_t cols, const std::vector<std::uint8_t>& pixels,
                       const std::vector<std::uint8_t>& labels) {
  if (pixels.size() != labels.size() * rows * cols) {
    throw std::invalid_argument("pixel buffer does not match label count");
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("cannot open IDX output files");
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(labels.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

TaskStream split_into_tasks(const LabeledSet& set, std::size_t tasks, std::size_t classes_per_task,
                            double test_fraction, const RngStream& rng) {
  if (tasks == 0 || classes_per_task == 0) throw std::invalid_argument("tasks and classes_per_task must be >= 1");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in [0, 1)");
  }
  std::map<std::size_t, std::vector<const LabeledExample*>> by_label;
  for (const auto& ex : set.examples) by_label[ex.label].push_back(&ex);

  const std::size_t needed = tasks * classes_per_task;
  if (by_label.size() < needed) {
    throw std::invalid_argument("split requires " + std::to_string(needed) + " classes but only " +
                                std::to_string(by_label.size()) + " are available");
  }

  TaskStream stream;
  stream.classes_per_task = classes_per_task;
  stream.total_classes = needed;
  stream.input_dims = set.dims;
  stream.tasks.resize(tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    stream.tasks[t].id = t;
    stream.tasks[t].classes = {t * classes_per_task, classes_per_task};
  }

  std::size_t rank = 0;
  for (const auto& [label, members] : by_label) {
    if (rank == needed) break;
    const std::size_t t = rank / classes_per_task;
    std::vector<std::size_t> order(members.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream class_rng = rng.derive(rank);
    class_rng.shuffle(std::span<std::size_t>(order));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(members.size())));
    for (std::size_t n = 0; n < order.size(); ++n) {
      LabeledExample ex = *members[order[n]];
      ex.label = rank;
      ex.task = t;
      (n < n_test ? stream.tasks[t].test : stream.tasks[t].train).push_back(std::move(ex));
    }
    ++rank;
  }
  return stream;
}

std::vector<Batch> make_batches(const TaskData& task, std::size_t batch_size, RngStream& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    out.push_back({task.id, std::vector<std::size_t>(order.begin() + start, order.begin() + stop)});
  }
  return out;
}

}  // namespace sharc
