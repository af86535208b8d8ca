#include "sharc/config.hpp"

#include <cstdio>
#include <set>

namespace sharc {

std::string to_string(Scenario s) { return s == Scenario::task_il ? "task-il" : "class-il"; }

namespace {

std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

// Walks one JSON object, type-checking fields and rejecting unknown keys.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "$" : path_, "expected an object");
  }

  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(join(path_, key), "unknown field");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json* child(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return join(path_, key); }

  void number(const std::string& key, double& out) {
    if (const Json* v = child(key)) {
      if (!v->is_number()) throw ConfigError(path(key), "expected a number");
      out = v->get<double>();
    }
  }

  template <typename T>
  void count(const std::string& key, T& out, std::uint64_t min = 0) {
    if (const Json* v = child(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        throw ConfigError(path(key), "expected a non-negative integer");
      }
      const auto n = v->get<std::uint64_t>();
      if (n < min) throw ConfigError(path(key), "must be >= " + std::to_string(min));
      out = static_cast<T>(n);
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const Json* v = child(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  std::optional<std::string> text(const std::string& key) {
    if (const Json* v = child(key)) {
      if (!v->is_string()) throw ConfigError(path(key), "expected a string");
      return v->get<std::string>();
    }
    return std::nullopt;
  }

  std::vector<std::size_t> counts(const std::string& key, std::size_t min_value) {
    const Json* v = child(key);
    std::vector<std::size_t> out;
    if (!v) return out;
    if (!v->is_array() || v->empty()) throw ConfigError(path(key), "expected a non-empty array of integers");
    for (std::size_t i = 0; i < v->size(); ++i) {
      const Json& e = (*v)[i];
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0 || e.get<std::uint64_t>() < min_value) {
        throw ConfigError(path(key) + "[" + std::to_string(i) + "]", "expected an integer >= " + std::to_string(min_value));
      }
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& path, const std::string& message) {
  if (!ok) throw ConfigError(path, message);
}

template <typename Parse>
auto enum_field(ObjectReader& r, const std::string& key, Parse parse) -> std::optional<decltype(parse(""))> {
  auto s = r.text(key);
  if (!s) return std::nullopt;
  try {
    return parse(*s);
  } catch (const std::invalid_argument&) {
    throw ConfigError(r.path(key), "unknown value '" + *s + "'");
  }
}

void read_stream(const Json& j, StreamConfig& s) {
  ObjectReader r(j, "stream");
  if (auto kind = enum_field(r, "kind", [](const std::string& v) {
        if (v == "synthetic") return StreamKind::synthetic;
        if (v == "idx") return StreamKind::idx;
        if (v == "features") return StreamKind::features;
        throw std::invalid_argument(v);
      })) {
    s.kind = *kind;
  }
  r.count("tasks", s.tasks, 1);
  r.count("classes_per_task", s.classes_per_task, 1);
  r.count("per_class_train", s.synthetic.per_class_train, 1);
  r.count("per_class_test", s.synthetic.per_class_test, 1);
  r.number("noise_sigma", s.synthetic.noise_sigma);
  require(s.synthetic.noise_sigma >= 0.0, r.path("noise_sigma"), "must be >= 0");
  auto image = r.counts("image", 1);
  if (!image.empty()) {
    require(image.size() == 3, r.path("image"), "expected [height, width, channels]");
    s.synthetic.image = {image[0], image[1], image[2]};
  }
  if (auto v = r.text("images")) s.images_path = *v;
  if (auto v = r.text("labels")) s.labels_path = *v;
  if (auto v = r.text("features")) s.features_path = *v;
  r.number("test_fraction", s.test_fraction);
  require(s.test_fraction >= 0.0 && s.test_fraction < 1.0, r.path("test_fraction"), "must lie in [0, 1)");
  if (s.kind == StreamKind::idx) {
    require(!s.images_path.empty(), r.path("images"), "required for idx streams");
    require(!s.labels_path.empty(), r.path("labels"), "required for idx streams");
  }
  if (s.kind == StreamKind::features) require(!s.features_path.empty(), r.path("features"), "required for features streams");
  s.synthetic.tasks = s.tasks;
  s.synthetic.classes_per_task = s.classes_per_task;
}

void read_am(const Json& j, AmConfig& am) {
  ObjectReader r(j, "am");
  if (auto kind = r.text("kind")) {
    if (*kind == "none") {
      am.kind.reset();
    } else {
      try {
        am.kind = parse_memory_kind(*kind);
      } catch (const std::invalid_argument&) {
        throw ConfigError(r.path("kind"), "unknown value '" + *kind + "'");
      }
    }
  }
  if (auto scope = r.text("write_scope")) {
    require(*scope == "buffered" || *scope == "task", r.path("write_scope"), "unknown value '" + *scope + "'");
    am.write_full_task = *scope == "task";
  }
  r.boolean("clamp_output", am.clamp_output);
  if (const Json* h = r.child("hopfield")) {
    ObjectReader hr(*h, r.path("hopfield"));
    hr.count("max_iters", am.hopfield.max_iters, 1);
  }
  if (const Json* m = r.child("mhn")) {
    ObjectReader mr(*m, r.path("mhn"));
    mr.number("beta", am.mhn.beta);
    require(am.mhn.beta > 0.0, mr.path("beta"), "must be > 0");
    mr.count("iters", am.mhn.iters, 1);
  }
  if (const Json* p = r.child("pcn")) {
    ObjectReader pr(*p, r.path("pcn"));
    auto hidden = pr.counts("hidden", 1);
    if (!hidden.empty()) am.pcn.hidden = hidden;
    pr.number("lambda", am.pcn.lambda);
    require(am.pcn.lambda >= 0.0, pr.path("lambda"), "must be >= 0");
    pr.count("seed", am.pcn.seed);
    pr.count("write_steps", am.pcn_write.steps, 1);
    pr.number("write_lr", am.pcn_write.lr);
    require(am.pcn_write.lr > 0.0, pr.path("write_lr"), "must be > 0");
    pr.count("infer_steps", am.pcn_write.infer_steps);
    pr.number("infer_lr", am.pcn_write.infer_lr);
    require(am.pcn_write.infer_lr >= 0.0, pr.path("infer_lr"), "must be >= 0");
    pr.count("read_steps", am.pcn_read.steps, 1);
    pr.number("read_lr", am.pcn_read.lr);
    require(am.pcn_read.lr > 0.0, pr.path("read_lr"), "must be > 0");
    pr.boolean("clamp", am.pcn_read.clamp);
  }
}

}  // namespace

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "");
  if (auto v = enum_field(r, "scenario", [](const std::string& s) {
        if (s == "task-il") return Scenario::task_il;
        if (s == "class-il") return Scenario::class_il;
        throw std::invalid_argument(s);
      })) {
    c.scenario = *v;
  }
  if (auto v = enum_field(r, "strategy", parse_strategy)) c.strategy = *v;
  r.number("mu", c.mu);
  require(c.mu >= 0.0 && c.mu < 1.0, "mu", "must lie in [0, 1)");
  r.count("seed", c.seed);
  r.number("lr", c.lr);
  require(c.lr > 0.0, "lr", "must be > 0");
  r.count("batch_size", c.batch_size, 1);
  r.count("epochs_per_task", c.epochs_per_task, 1);
  if (auto v = r.text("saliency_label")) {
    require(*v == "true" || *v == "predicted", "saliency_label", "unknown value '" + *v + "'");
    c.saliency_predicted_label = *v == "predicted";
  }
  r.number("gem_eps", c.gem_eps);
  require(c.gem_eps >= 0.0, "gem_eps", "must be >= 0");

  if (const Json* b = r.child("buffer")) {
    ObjectReader br(*b, "buffer");
    br.count("budget", c.buffer_budget);
    if (auto unit = br.text("unit")) {
      require(*unit == "slots" || *unit == "bytes", "buffer.unit", "unknown value '" + *unit + "'");
      c.buffer_unit = *unit == "bytes" ? BudgetUnit::bytes : BudgetUnit::slots;
    }
  }
  if (const Json* f = r.child("forgetting")) {
    ObjectReader fr(*f, "forgetting");
    fr.count("every", c.forget_every, 1);
    fr.number("gamma", c.forget_gamma);
    require(c.forget_gamma > 0.0 && c.forget_gamma <= 1.0, "forgetting.gamma", "must lie in (0, 1]");
  }
  if (const Json* s = r.child("stream")) {
    read_stream(*s, c.stream);
  } else {
    c.stream.synthetic.tasks = c.stream.tasks;
    c.stream.synthetic.classes_per_task = c.stream.classes_per_task;
  }
  if (const Json* b = r.child("backbone")) {
    ObjectReader br(*b, "backbone");
    auto channels = br.counts("channels", 1);
    if (!channels.empty()) c.backbone.channels = channels;
    br.count("kernel", c.backbone.kernel, 1);
    br.count("stride", c.backbone.stride, 1);
    br.count("pad", c.backbone.pad);
    br.count("seed", c.backbone.seed);
  }
  if (const Json* h = r.child("head")) {
    ObjectReader hr(*h, "head");
    hr.count("hidden", c.head_hidden);
    if (auto v = enum_field(hr, "activation", parse_activation)) c.head_activation = *v;
  }
  if (const Json* a = r.child("am")) read_am(*a, c.am);
  return c;
}

Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["scenario"] = to_string(c.scenario);
  j["strategy"] = to_string(c.strategy);
  j["mu"] = c.mu;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs_per_task"] = c.epochs_per_task;
  j["saliency_label"] = c.saliency_predicted_label ? "predicted" : "true";
  j["gem_eps"] = c.gem_eps;
  j["buffer"] = {{"budget", c.buffer_budget}, {"unit", c.buffer_unit == BudgetUnit::bytes ? "bytes" : "slots"}};
  j["forgetting"] = {{"every", c.forget_every}, {"gamma", c.forget_gamma}};

  const auto& s = c.stream;
  Json stream;
  stream["kind"] = s.kind == StreamKind::synthetic ? "synthetic" : s.kind == StreamKind::idx ? "idx" : "features";
  stream["tasks"] = s.tasks;
  stream["classes_per_task"] = s.classes_per_task;
  stream["per_class_train"] = s.synthetic.per_class_train;
  stream["per_class_test"] = s.synthetic.per_class_test;
  stream["image"] = {s.synthetic.image.h, s.synthetic.image.w, s.synthetic.image.k};
  stream["noise_sigma"] = s.synthetic.noise_sigma;
  stream["images"] = s.images_path;
  stream["labels"] = s.labels_path;
  stream["features"] = s.features_path;
  stream["test_fraction"] = s.test_fraction;
  j["stream"] = stream;

  j["backbone"] = {{"channels", c.backbone.channels},
                   {"kernel", c.backbone.kernel},
                   {"stride", c.backbone.stride},
                   {"pad", c.backbone.pad},
                   {"seed", c.backbone.seed}};
  j["head"] = {{"hidden", c.head_hidden}, {"activation", to_string(c.head_activation)}};

  const auto& am = c.am;
  Json a;
  a["kind"] = am.kind ? to_string(*am.kind) : "none";
  a["write_scope"] = am.write_full_task ? "task" : "buffered";
  a["clamp_output"] = am.clamp_output;
  a["hopfield"] = {{"max_iters", am.hopfield.max_iters}};
  a["mhn"] = {{"beta", am.mhn.beta}, {"iters", am.mhn.iters}};
  a["pcn"] = {{"hidden", am.pcn.hidden},
              {"lambda", am.pcn.lambda},
              {"seed", am.pcn.seed},
              {"write_steps", am.pcn_write.steps},
              {"write_lr", am.pcn_write.lr},
              {"infer_steps", am.pcn_write.infer_steps},
              {"infer_lr", am.pcn_write.infer_lr},
              {"read_steps", am.pcn_read.steps},
              {"read_lr", am.pcn_read.lr},
              {"clamp", am.pcn_read.clamp}};
  j["am"] = a;
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json j = config_to_json(cfg);
  j.erase("seed");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sharc
