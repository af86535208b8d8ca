#include "sharc/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "sharc/saliency.hpp"

namespace sharc {

// ---------------------------------------------------------------------------
// Data

PreparedData prepare_data(const ExperimentConfig& cfg) {
  const RngStream data_rng = RngStream(cfg.seed).derive(kDataTag);
  const auto& s = cfg.stream;
  PreparedData out;
  std::optional<Backbone> backbone;

  switch (s.kind) {
    case StreamKind::synthetic: {
      SyntheticStreamSpec spec = s.synthetic;
      spec.tasks = s.tasks;
      spec.classes_per_task = s.classes_per_task;
      out.stream = make_synthetic_stream(spec, data_rng);
      backbone = Backbone::make_conv(out.stream.input_dims, cfg.backbone);
      break;
    }
    case StreamKind::idx: {
      const LabeledSet set = load_idx_dataset(s.images_path, s.labels_path);
      out.stream = split_into_tasks(set, s.tasks, s.classes_per_task, s.test_fraction, data_rng);
      backbone = Backbone::make_conv(set.dims, cfg.backbone);
      break;
    }
    case StreamKind::features: {
      PrecomputedData pre = precomputed_from_file(read_feature_file(s.features_path));
      out.stream = split_into_tasks(pre.set, s.tasks, s.classes_per_task, s.test_fraction, data_rng);
      backbone = std::move(pre.backbone);
      break;
    }
  }

  out.feature_dims = backbone->out_dims();
  for (const auto& task : out.stream.tasks) {
    auto& tr = out.train.emplace_back();
    for (const auto& ex : task.train) tr.push_back(backbone->forward(ex));
    auto& te = out.test.emplace_back();
    for (const auto& ex : task.test) te.push_back(backbone->forward(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : r_(tasks, std::vector<std::optional<double>>(tasks)) {}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  if (j > i) throw std::out_of_range("accuracy entry above the diagonal");
  if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument("accuracy must lie in [0, 1]");
  r_.at(i).at(j) = value;
}

bool AccuracyMatrix::row_complete(std::size_t i) const {
  for (std::size_t j = 0; j <= i; ++j) {
    if (!r_.at(i)[j]) return false;
  }
  return true;
}

double acc_metric(const AccuracyMatrix& m) {
  const std::size_t T = m.tasks();
  if (T == 0 || !m.row_complete(T - 1)) throw std::invalid_argument("final accuracy row is not populated");
  double sum = 0.0;
  for (std::size_t j = 0; j < T; ++j) sum += *m.at(T - 1, j);
  return sum / static_cast<double>(T);
}

double bwt_metric(const AccuracyMatrix& m) {
  const std::size_t T = m.tasks();
  if (T < 2) throw std::invalid_argument("BWT undefined");
  if (!m.row_complete(T - 1)) throw std::invalid_argument("final accuracy row is not populated");
  double sum = 0.0;
  for (std::size_t j = 0; j + 1 < T; ++j) {
    if (!m.at(j, j)) throw std::invalid_argument("accuracy diagonal is not populated");
    sum += *m.at(T - 1, j) - *m.at(j, j);
  }
  return sum / static_cast<double>(T - 1);
}

// ---------------------------------------------------------------------------
// Standardizer

Standardizer Standardizer::fit(const std::vector<FeatureMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("standardizer needs at least one feature map");
  const std::size_t d = maps.front().size();
  Standardizer s{Vec(d, 0.0), Vec(d, 0.0)};
  for (const auto& m : maps) axpy(1.0, m.flat(), s.mean);
  for (auto& v : s.mean) v /= static_cast<double>(maps.size());
  for (const auto& m : maps) {
    const auto x = m.flat();
    for (std::size_t i = 0; i < d; ++i) s.scale[i] += (x[i] - s.mean[i]) * (x[i] - s.mean[i]);
  }
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(maps.size()));
    if (v < 1e-8) v = 1.0;
  }
  return s;
}

Vec Standardizer::forward(std::span<const double> x) const {
  Vec z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - mean[i]) / scale[i];
  return z;
}

Vec Standardizer::inverse(std::span<const double> z) const {
  Vec x(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = mean[i] + scale[i] * z[i];
  return x;
}

// ---------------------------------------------------------------------------
// Run

std::unique_ptr<AssociativeMemory> make_memory(const AmConfig& cfg, std::size_t dim) {
  if (!cfg.kind) return nullptr;
  switch (*cfg.kind) {
    case MemoryKind::hopfield: return std::make_unique<HopfieldMemory>(dim, cfg.hopfield);
    case MemoryKind::mhn: return std::make_unique<ModernHopfieldMemory>(dim, cfg.mhn);
    case MemoryKind::pcn: {
      PcnSpec spec = cfg.pcn;
      spec.dim = dim;
      return std::make_unique<PcnMemory>(spec, cfg.pcn_write, cfg.pcn_read);
    }
  }
  return nullptr;
}

namespace {

// Mean |z| of a standard normal; bipolar reads decode to mean +- this many stds.
constexpr double kHalfNormalMean = 0.7978845608028654;

Vec encode(const AssociativeMemory& am, const Standardizer& st, std::span<const double> x) {
  Vec z = st.forward(x);
  if (am.kind() == MemoryKind::hopfield) {
    for (auto& v : z) v = v >= 0.0 ? 1.0 : -1.0;
  }
  return z;
}

Vec decode(const AssociativeMemory& am, const Standardizer& st, Vec z) {
  if (am.kind() == MemoryKind::hopfield) {
    for (auto& v : z) v *= kHalfNormalMean;
  }
  return st.inverse(z);
}

FeatureMap retrieve(const AssociativeMemory* am, const Standardizer* st, const SparseFeatureMap& s, bool clamp) {
  FeatureMap dense = reconstruct_dense(s);
  if (!am) return dense;
  const Dims3 d = s.full_dims;
  std::vector<bool> kept(d.k, false);
  for (auto c : s.kept_channels) kept[c] = true;

  Cue cue;
  cue.values = encode(*am, *st, dense.flat());
  cue.observed.assign(dense.size(), false);
  for (std::size_t i = 0; i < dense.size(); ++i) {
    if (kept[i % d.k]) {
      cue.observed[i] = true;
    } else {
      cue.values[i] = 0.0;
    }
  }
  Vec x = decode(*am, *st, am->read(cue));
  if (clamp) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (cue.observed[i]) x[i] = dense.flat()[i];
    }
  }
  return FeatureMap(d, std::move(x));
}

double mse(const FeatureMap& a, const FeatureMap& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a.flat()[i] - b.flat()[i];
    s += e * e;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

std::vector<double> evaluate(const Head& head, const PreparedData& data, std::size_t upto, Scenario scenario) {
  if (upto >= data.stream.task_count()) throw std::out_of_range("evaluate: task index out of range");
  std::vector<double> row;
  for (std::size_t j = 0; j <= upto; ++j) {
    const auto& task = data.stream.tasks[j];
    std::optional<ClassRange> mask;
    if (scenario == Scenario::task_il) mask = task.classes;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      if (head.predict(data.test[j][i], mask) == task.test[i].label) ++correct;
    }
    row.push_back(task.test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(task.test.size()));
  }
  return row;
}

RunResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, prepare_data(cfg)); }

RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data) {
  const std::size_t T = data.stream.task_count();
  RunResult result;
  result.config = config_to_json(cfg);
  result.tasks = T;
  result.accuracy = AccuracyMatrix(T);

  const RngStream root(cfg.seed);
  RngStream head_rng = root.derive(kHeadTag);
  RngStream replay_rng = root.derive(kReplayTag);
  Head head(HeadSpec{data.feature_dims.volume(), cfg.head_hidden, data.stream.total_classes, cfg.head_activation},
            head_rng);
  EpisodicBuffer buffer(cfg.buffer_budget, T, cfg.buffer_unit);
  std::unique_ptr<AssociativeMemory> am = make_memory(cfg.am, data.feature_dims.volume());
  std::optional<Standardizer> standardizer;
  if (am) standardizer = Standardizer::fit(data.train.at(0));

  auto task_mask = [&](std::size_t t) -> std::optional<ClassRange> {
    if (cfg.scenario == Scenario::task_il) return data.stream.tasks[t].classes;
    return std::nullopt;
  };

  try {
    for (std::size_t t = 0; t < T; ++t) {
      const auto started = std::chrono::steady_clock::now();
      const TaskData& task = data.stream.tasks[t];

      // Retrieval, once per task.
      std::vector<std::vector<FeatureMap>> retrieved(t);
      ReplayContext replay;
      replay.replay_batch = cfg.batch_size;
      replay.gem.eps = cfg.gem_eps;
      FidelityEntry fid{t, 0, std::nullopt};
      double err = 0.0;
      if (cfg.strategy != Strategy::sgd && cfg.strategy != Strategy::joint) {
        for (std::size_t k = 0; k < t; ++k) {
          for (const auto& slot : buffer.items(k)) {
            retrieved[k].push_back(retrieve(am.get(), standardizer ? &*standardizer : nullptr, slot.map,
                                            cfg.am.clamp_output));
            err += mse(retrieved[k].back(), data.train[k][slot.source]);
            ++fid.retrieved_items;
          }
        }
        for (std::size_t k = 0; k < t; ++k) {
          auto& items = replay.per_task.emplace_back();
          const auto& slots = buffer.items(k);
          for (std::size_t i = 0; i < slots.size(); ++i) items.push_back({&retrieved[k][i], slots[i].label, task_mask(k)});
        }
      }
      if (fid.retrieved_items > 0) fid.mean_mse = err / static_cast<double>(fid.retrieved_items);
      if (cfg.strategy == Strategy::joint) {
        for (std::size_t k = 0; k < t; ++k) {
          for (std::size_t i = 0; i < data.train[k].size(); ++i) {
            replay.joint.push_back({&data.train[k][i], data.stream.tasks[k].train[i].label, task_mask(k)});
          }
        }
      }
      result.fidelity.push_back(fid);

      RngStream batch_rng = root.derive(kBatchTagBase + t);
      for (std::size_t epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
        const bool last_epoch = epoch + 1 == cfg.epochs_per_task;
        for (const Batch& b : make_batches(task, cfg.batch_size, batch_rng)) {
          std::vector<TrainItem> items;
          for (auto i : b.indices) items.push_back({&data.train[t][i], task.train[i].label, task_mask(t)});
          strategy_step(cfg.strategy, head, items, replay, cfg.lr, replay_rng);
          if (!last_epoch) continue;
          for (auto i : b.indices) {
            const FeatureMap& a = data.train[t][i];
            const std::size_t label = task.train[i].label;
            const std::size_t cls = cfg.saliency_predicted_label ? head.predict(a, task_mask(t)) : label;
            SparseFeatureMap s = mask_feature_map(a, channel_saliency(head, a, cls), cfg.mu, label, t);
            buffer.insert(t, BufferSlot{std::move(s), label, i});
          }
        }
      }

      if (am) {
        std::vector<Vec> patterns;
        if (cfg.am.write_full_task) {
          for (const auto& a : data.train[t]) patterns.push_back(encode(*am, *standardizer, a.flat()));
        } else {
          for (const auto& slot : buffer.items(t)) {
            patterns.push_back(encode(*am, *standardizer, data.train[t][slot.source].flat()));
          }
        }
        if (!patterns.empty()) am->write(patterns);
        if ((t + 1) % cfg.forget_every == 0) am->forget(cfg.forget_gamma);
        am->end_task();
      }

      const auto row = evaluate(head, data, t, cfg.scenario);
      double sum = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        result.accuracy.set(t, j, row[j]);
        sum += row[j];
      }
      result.learning_curve.push_back(sum / static_cast<double>(t + 1));
      result.seconds_per_task.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
      result.completed_tasks = t + 1;
    }
  } catch (const std::exception& e) {
    result.error = e.what();
  }

  result.buffer_items = buffer.size();
  result.buffer_bytes = buffer.bytes_used();
  if (result.complete()) {
    result.acc = acc_metric(result.accuracy);
    result.bwt_defined = T >= 2;
    result.bwt = result.bwt_defined ? bwt_metric(result.accuracy) : 0.0;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Output

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

Json result_to_json(const RunResult& r) {
  Json j;
  j["config"] = r.config;
  j["tasks"] = r.tasks;
  j["completed_tasks"] = r.completed_tasks;
  Json matrix = Json::array();
  for (std::size_t i = 0; i < r.tasks; ++i) {
    Json row = Json::array();
    for (std::size_t k = 0; k < r.tasks; ++k) {
      const auto& v = r.accuracy.at(i, k);
      row.push_back(v ? Json(*v) : Json(nullptr));
    }
    matrix.push_back(row);
  }
  j["accuracy_matrix"] = matrix;
  if (r.complete()) {
    j["acc"] = r.acc;
    j["bwt"] = r.bwt;
    j["bwt_defined"] = r.bwt_defined;
  } else {
    j["error"] = r.error;
  }
  j["learning_curve"] = r.learning_curve;
  Json fid = Json::array();
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& f : r.fidelity) {
    fid.push_back({{"task", f.task + 1},
                   {"retrieved_items", f.retrieved_items},
                   {"mean_mse", f.mean_mse ? Json(*f.mean_mse) : Json(nullptr)}});
    if (f.mean_mse) {
      total += *f.mean_mse * static_cast<double>(f.retrieved_items);
      count += f.retrieved_items;
    }
  }
  j["retrieval_mse"] = fid;
  j["mean_retrieval_mse"] = count ? Json(total / static_cast<double>(count)) : Json(nullptr);
  j["buffer"] = {{"items", r.buffer_items}, {"bytes", r.buffer_bytes}};
  return j;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void write_run_outputs(const RunResult& r, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);

  std::ostringstream acc;
  acc << "after_task";
  for (std::size_t j = 0; j < r.tasks; ++j) acc << ",task_" << j + 1;
  acc << '\n';
  for (std::size_t i = 0; i < r.completed_tasks; ++i) {
    acc << i + 1;
    for (std::size_t j = 0; j < r.tasks; ++j) {
      acc << ',';
      if (const auto& v = r.accuracy.at(i, j)) acc << format_number(*v);
    }
    acc << '\n';
  }
  write_text(root / "accuracy_matrix.csv", acc.str());

  std::ostringstream curve;
  curve << "after_task,mean_accuracy\n";
  for (std::size_t i = 0; i < r.learning_curve.size(); ++i) {
    curve << i + 1 << ',' << format_number(r.learning_curve[i]) << '\n';
  }
  write_text(root / "learning_curve.csv", curve.str());

  std::ostringstream fid;
  fid << "task,retrieved_items,mean_mse\n";
  for (const auto& f : r.fidelity) {
    fid << f.task + 1 << ',' << f.retrieved_items << ',';
    if (f.mean_mse) fid << format_number(*f.mean_mse);
    fid << '\n';
  }
  write_text(root / "fidelity.csv", fid.str());

  Json timing = {{"seconds_per_task", r.seconds_per_task}};
  write_text(root / "timing.json", timing.dump(2) + "\n");

  if (r.complete()) {
    write_text(root / "result.json", result_to_json(r).dump(2) + "\n");
  } else {
    write_text(root / "partial.json", result_to_json(r).dump(2) + "\n");
  }
}

}  // namespace sharc
