#include "sharc/am.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace sharc {

namespace {

constexpr char kSnapshotMagic[4] = {'S', 'H', 'A', 'M'};
constexpr std::uint32_t kSnapshotVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("memory snapshot: truncated");
  return v;
}

void put_header(std::ostream& out, MemoryKind kind) {
  out.write(kSnapshotMagic, 4);
  put<std::uint32_t>(out, kSnapshotVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kind) + 1);
}

void check_gamma(double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("forgetting gamma must lie in (0, 1]");
}

double sign_pm(double x) { return x >= 0.0 ? 1.0 : -1.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Cue

Cue Cue::full(Vec values) {
  Cue c;
  c.observed.assign(values.size(), true);
  c.values = std::move(values);
  return c;
}

std::size_t Cue::observed_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), true));
}

void Cue::validate(std::size_t dim) const {
  if (values.size() != dim || observed.size() != dim) {
    throw std::invalid_argument("cue length does not match memory dimension " + std::to_string(dim));
  }
  if (!all_finite(values)) throw std::invalid_argument("cue values must be finite");
  if (observed_count() == 0) throw std::invalid_argument("cue has no observed coordinates");
}

std::string to_string(MemoryKind kind) {
  switch (kind) {
    case MemoryKind::hopfield: return "hopfield";
    case MemoryKind::mhn: return "mhn";
    case MemoryKind::pcn: return "pcn";
  }
  return "?";
}

MemoryKind parse_memory_kind(const std::string& name) {
  if (name == "hopfield") return MemoryKind::hopfield;
  if (name == "mhn") return MemoryKind::mhn;
  if (name == "pcn") return MemoryKind::pcn;
  throw std::invalid_argument("unknown memory kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Classical Hopfield

HopfieldMemory::HopfieldMemory(std::size_t dim, HopfieldOptions options)
    : dim_(dim), weights_(dim * dim, 0.0), options_(options) {
  if (dim == 0) throw std::invalid_argument("memory dimension must be >= 1");
}

void HopfieldMemory::write(std::span<const Vec> patterns) {
  for (const auto& x : patterns) {
    if (x.size() != dim_) throw std::invalid_argument("pattern length does not match memory dimension");
    for (double v : x) {
      if (v != 1.0 && v != -1.0) throw std::invalid_argument("Hopfield patterns must be bipolar (+1/-1)");
    }
  }
  for (const auto& x : patterns) {
    for (std::size_t p = 0; p < dim_; ++p) {
      double* row = weights_.data() + p * dim_;
      for (std::size_t q = 0; q < dim_; ++q) {
        if (p != q) row[q] += x[p] * x[q];
      }
    }
    ++count_;
  }
}

double HopfieldMemory::energy(std::span<const double> state) const {
  if (state.size() != dim_) throw std::invalid_argument("state length does not match memory dimension");
  double e = 0.0;
  for (std::size_t p = 0; p < dim_; ++p) {
    const double* row = weights_.data() + p * dim_;
    double h = 0.0;
    for (std::size_t q = 0; q < dim_; ++q) h += row[q] * state[q];
    e += state[p] * h;
  }
  return -0.5 * e;
}

HopfieldMemory::Recall HopfieldMemory::recall(const Cue& cue, std::size_t max_iters) const {
  cue.validate(dim_);
  Recall r;
  r.state.resize(dim_);
  for (std::size_t i = 0; i < dim_; ++i) r.state[i] = cue.observed[i] ? sign_pm(cue.values[i]) : 1.0;
  double e = energy(r.state);
  r.energy_trace.push_back(e);

  Vec next(dim_);
  while (r.iterations < max_iters) {
    ++r.iterations;
    for (std::size_t p = 0; p < dim_; ++p) {
      const double* row = weights_.data() + p * dim_;
      double h = 0.0;
      for (std::size_t q = 0; q < dim_; ++q) h += row[q] * r.state[q];
      next[p] = sign_pm(h);
    }
    if (next == r.state) {
      r.converged = true;
      break;
    }
    const double e_next = energy(next);
    if (e_next < e) {
      r.state = next;
      e = e_next;
      r.energy_trace.push_back(e);
      continue;
    }
    // Synchronous step did not descend (e.g. a 2-cycle): one asynchronous sweep.
    bool changed = false;
    for (std::size_t p = 0; p < dim_; ++p) {
      const double* row = weights_.data() + p * dim_;
      double h = 0.0;
      for (std::size_t q = 0; q < dim_; ++q) h += row[q] * r.state[q];
      const double s = sign_pm(h);
      if (s != r.state[p] && h != 0.0) {
        r.state[p] = s;
        changed = true;
      }
    }
    if (!changed) {
      r.converged = true;
      break;
    }
    e = energy(r.state);
    r.energy_trace.push_back(e);
  }
  return r;
}

Vec HopfieldMemory::read(const Cue& cue) const {
  Vec out = recall(cue, options_.max_iters).state;
  if (options_.clamp_output) {
    for (std::size_t i = 0; i < dim_; ++i) {
      if (cue.observed[i]) out[i] = cue.values[i];
    }
  }
  return out;
}

void HopfieldMemory::forget(double gamma) {
  check_gamma(gamma);
  if (gamma == 1.0) return;
  for (double& w : weights_) w *= gamma;
}

void HopfieldMemory::save(std::ostream& out) const {
  put_header(out, kind());
  put<std::uint64_t>(out, dim_);
  put<std::uint64_t>(out, count_);
  for (double w : weights_) put<double>(out, w);
}

HopfieldMemory HopfieldMemory::load_body(std::istream& in, HopfieldOptions options) {
  const auto d = get<std::uint64_t>(in);
  HopfieldMemory m(static_cast<std::size_t>(d), options);
  m.count_ = static_cast<std::size_t>(get<std::uint64_t>(in));
  for (double& w : m.weights_) w = get<double>(in);
  return m;
}

// ---------------------------------------------------------------------------
// Modern Hopfield

ModernHopfieldMemory::ModernHopfieldMemory(std::size_t dim, MhnOptions options) : dim_(dim), options_(options) {
  if (dim == 0) throw std::invalid_argument("memory dimension must be >= 1");
  if (!(options.beta > 0.0)) throw std::invalid_argument("beta must be positive");
  if (options.iters == 0) throw std::invalid_argument("MHN read needs at least one iteration");
}

void ModernHopfieldMemory::refresh_max_norm() {
  max_norm_ = 0.0;
  for (const auto& x : patterns_) max_norm_ = std::max(max_norm_, norm(x));
}

void ModernHopfieldMemory::write(std::span<const Vec> patterns) {
  for (const auto& x : patterns) {
    if (x.size() != dim_) throw std::invalid_argument("pattern length does not match memory dimension");
    if (!all_finite(x)) throw std::invalid_argument("patterns must be finite");
  }
  for (const auto& x : patterns) {
    patterns_.push_back(x);
    ages_.push_back(0);
    max_norm_ = std::max(max_norm_, norm(x));
  }
}

Vec ModernHopfieldMemory::update(std::span<const double> state) const {
  Vec sims(patterns_.size());
  for (std::size_t n = 0; n < patterns_.size(); ++n) sims[n] = dot(patterns_[n], state);
  const Vec p = softmax(sims, options_.beta);
  Vec out(dim_, 0.0);
  for (std::size_t n = 0; n < patterns_.size(); ++n) {
    if (p[n] != 0.0) axpy(p[n], patterns_[n], out);
  }
  return out;
}

double ModernHopfieldMemory::energy(std::span<const double> state) const {
  if (patterns_.empty()) return 0.5 * squared_norm(state);
  Vec sims(patterns_.size());
  for (std::size_t n = 0; n < patterns_.size(); ++n) sims[n] = dot(patterns_[n], state);
  const double n = static_cast<double>(patterns_.size());
  return -lse(options_.beta, sims) + 0.5 * squared_norm(state) + std::log(n) / options_.beta +
         0.5 * max_norm_ * max_norm_;
}

Vec ModernHopfieldMemory::retrieve(const Cue& cue, std::size_t iters) const {
  cue.validate(dim_);
  if (iters == 0) throw std::invalid_argument("MHN read needs at least one iteration");
  Vec start(dim_);
  for (std::size_t i = 0; i < dim_; ++i) start[i] = cue.observed[i] ? cue.values[i] : 0.0;
  if (patterns_.empty()) return start;

  Vec xi = start;
  for (std::size_t it = 0; it < iters; ++it) {
    xi = update(xi);
    if (it + 1 < iters) {
      for (std::size_t i = 0; i < dim_; ++i) {
        if (cue.observed[i]) xi[i] = cue.values[i];
      }
    }
  }
  const double e0 = energy(start);
  if (energy(xi) > e0 + 1e-9) {
    xi = start;
    for (std::size_t it = 0; it < iters; ++it) xi = update(xi);
  }
  return xi;
}

Vec ModernHopfieldMemory::read(const Cue& cue) const {
  Vec out = retrieve(cue, options_.iters);
  if (options_.clamp_output) {
    for (std::size_t i = 0; i < dim_; ++i) {
      if (cue.observed[i]) out[i] = cue.values[i];
    }
  }
  return out;
}

void ModernHopfieldMemory::forget(double gamma) {
  check_gamma(gamma);
  if (gamma == 1.0) return;
  for (std::size_t n = 0; n < patterns_.size(); ++n) {
    const double scale = std::pow(gamma, static_cast<double>(ages_[n]));
    for (double& v : patterns_[n]) v *= scale;
  }
  refresh_max_norm();
}

void ModernHopfieldMemory::end_task() {
  for (auto& a : ages_) ++a;
}

void ModernHopfieldMemory::save(std::ostream& out) const {
  put_header(out, kind());
  put<std::uint64_t>(out, dim_);
  put<std::uint64_t>(out, patterns_.size());
  put<double>(out, options_.beta);
  for (auto a : ages_) put<std::uint32_t>(out, a);
  for (const auto& x : patterns_) {
    for (double v : x) put<double>(out, v);
  }
}

ModernHopfieldMemory ModernHopfieldMemory::load_body(std::istream& in, MhnOptions options) {
  const auto d = static_cast<std::size_t>(get<std::uint64_t>(in));
  const auto n = static_cast<std::size_t>(get<std::uint64_t>(in));
  options.beta = get<double>(in);
  ModernHopfieldMemory m(d, options);
  m.ages_.resize(n);
  for (auto& a : m.ages_) a = get<std::uint32_t>(in);
  m.patterns_.assign(n, Vec(d));
  for (auto& x : m.patterns_) {
    for (double& v : x) v = get<double>(in);
  }
  m.refresh_max_norm();
  return m;
}

// ---------------------------------------------------------------------------
// Predictive coding network

PcnMemory::PcnMemory(const PcnSpec& spec, PcnWriteOptions write, PcnReadOptions read)
    : lambda_(spec.lambda), write_options_(write), read_options_(read) {
  if (spec.dim == 0) throw std::invalid_argument("memory dimension must be >= 1");
  if (spec.hidden.empty()) throw std::invalid_argument("PCN needs at least one hidden layer");
  if (!(spec.lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  widths_.push_back(spec.dim);
  for (auto w : spec.hidden) {
    if (w == 0) throw std::invalid_argument("PCN layer widths must be >= 1");
    widths_.push_back(w);
  }
  build_layout();
  RngStream rng(spec.seed);
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const double s = 1.0 / std::sqrt(static_cast<double>(widths_[l + 1]));
    for (std::size_t i = 0; i < widths_[l] * widths_[l + 1]; ++i) params_[w_off_[l] + i] = s * (2.0 * rng.uniform() - 1.0);
  }
  init_params_ = params_;
}

void PcnMemory::build_layout() {
  std::size_t off = 0;
  w_off_.clear();
  b_off_.clear();
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    w_off_.push_back(off);
    off += widths_[l] * widths_[l + 1];
    b_off_.push_back(off);
    off += widths_[l];
  }
  prior_off_ = off;
  off += widths_.back();
  params_.assign(off, 0.0);
}

void PcnMemory::set_params(Vec params) {
  if (params.size() != params_.size()) throw std::invalid_argument("PCN parameter length mismatch");
  params_ = std::move(params);
}

Vec PcnMemory::prediction(std::size_t l, std::span<const double> above) const {
  const std::size_t rows = widths_[l];
  const std::size_t cols = widths_[l + 1];
  Vec act(cols);
  for (std::size_t j = 0; j < cols; ++j) act[j] = std::tanh(above[j]);
  Vec out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = params_.data() + w_off_[l] + i * cols;
    double z = params_[b_off_[l] + i];
    for (std::size_t j = 0; j < cols; ++j) z += row[j] * act[j];
    out[i] = z;
  }
  return out;
}

double PcnMemory::energy_with(const Vec& p, const States& x) const {
  const std::size_t L = layers();
  if (x.size() != L + 1) throw std::invalid_argument("PCN state has wrong layer count");
  for (std::size_t l = 0; l <= L; ++l) {
    if (x[l].size() != widths_[l]) throw std::invalid_argument("PCN state layer " + std::to_string(l) + " has wrong width");
  }
  double top = 0.0;
  for (std::size_t i = 0; i < widths_[L]; ++i) {
    const double e = x[L][i] - p[prior_off_ + i];
    top += e * e;
  }
  double bottom = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t cols = widths_[l + 1];
    Vec act(cols);
    for (std::size_t j = 0; j < cols; ++j) act[j] = std::tanh(x[l + 1][j]);
    for (std::size_t i = 0; i < widths_[l]; ++i) {
      const double* row = p.data() + w_off_[l] + i * cols;
      double z = p[b_off_[l] + i];
      for (std::size_t j = 0; j < cols; ++j) z += row[j] * act[j];
      const double e = x[l][i] - z;
      bottom += e * e;
    }
  }
  return top + lambda_ * bottom;
}

double PcnMemory::energy(const States& x) const { return energy_with(params_, x); }

PcnMemory::States PcnMemory::state_gradient(const States& x) const {
  const std::size_t L = layers();
  energy(x);  // shape checks
  States g(L + 1);
  for (std::size_t l = 0; l <= L; ++l) g[l].assign(widths_[l], 0.0);
  for (std::size_t i = 0; i < widths_[L]; ++i) g[L][i] += 2.0 * (x[L][i] - params_[prior_off_ + i]);
  for (std::size_t l = 0; l < L; ++l) {
    const Vec pred = prediction(l, x[l + 1]);
    const std::size_t cols = widths_[l + 1];
    Vec back(cols, 0.0);
    for (std::size_t i = 0; i < widths_[l]; ++i) {
      const double e = x[l][i] - pred[i];
      g[l][i] += 2.0 * lambda_ * e;
      const double* row = params_.data() + w_off_[l] + i * cols;
      for (std::size_t j = 0; j < cols; ++j) back[j] += row[j] * e;
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const double t = std::tanh(x[l + 1][j]);
      g[l + 1][j] -= 2.0 * lambda_ * (1.0 - t * t) * back[j];
    }
  }
  return g;
}

Vec PcnMemory::param_gradient(const States& x) const {
  const std::size_t L = layers();
  energy(x);
  Vec g(params_.size(), 0.0);
  for (std::size_t i = 0; i < widths_[L]; ++i) g[prior_off_ + i] = -2.0 * (x[L][i] - params_[prior_off_ + i]);
  for (std::size_t l = 0; l < L; ++l) {
    const Vec pred = prediction(l, x[l + 1]);
    const std::size_t cols = widths_[l + 1];
    Vec act(cols);
    for (std::size_t j = 0; j < cols; ++j) act[j] = std::tanh(x[l + 1][j]);
    for (std::size_t i = 0; i < widths_[l]; ++i) {
      const double e = -2.0 * lambda_ * (x[l][i] - pred[i]);
      double* row = g.data() + w_off_[l] + i * cols;
      for (std::size_t j = 0; j < cols; ++j) row[j] += e * act[j];
      g[b_off_[l] + i] += e;
    }
  }
  return g;
}

PcnMemory::States PcnMemory::initial_states(std::span<const double> bottom) const {
  const std::size_t L = layers();
  if (bottom.size() != widths_[0]) throw std::invalid_argument("pattern length does not match memory dimension");
  States x(L + 1);
  x[L].assign(params_.begin() + static_cast<std::ptrdiff_t>(prior_off_),
              params_.begin() + static_cast<std::ptrdiff_t>(prior_off_ + widths_[L]));
  for (std::size_t l = L; l-- > 1;) x[l] = prediction(l, x[l + 1]);
  x[0].assign(bottom.begin(), bottom.end());
  return x;
}

double PcnMemory::descend_states(States& x, const std::vector<bool>& free_bottom, std::size_t steps, double lr,
                                 std::vector<double>* trace) const {
  double e = energy(x);
  for (std::size_t s = 0; s < steps; ++s) {
    const States g = state_gradient(x);
    bool accepted = false;
    while (lr > 1e-14) {
      States trial = x;
      for (std::size_t i = 0; i < widths_[0]; ++i) {
        if (free_bottom[i]) trial[0][i] -= lr * g[0][i];
      }
      for (std::size_t l = 1; l < x.size(); ++l) axpy(-lr, g[l], trial[l]);
      const double e_trial = energy(trial);
      if (e_trial <= e) {
        x = std::move(trial);
        e = e_trial;
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (!accepted) break;
    if (trace) trace->push_back(e);
  }
  return e;
}

double PcnMemory::settled_energy(std::span<const double> pattern, std::size_t infer_steps, double infer_lr) const {
  States x = initial_states(pattern);
  return descend_states(x, std::vector<bool>(widths_[0], false), infer_steps, infer_lr, nullptr);
}

PcnMemory::WriteReport PcnMemory::write_patterns(std::span<const Vec> patterns, const PcnWriteOptions& options) {
  if (options.steps == 0) throw std::invalid_argument("PCN write needs at least one step");
  if (!(options.lr >= 0.0) || !(options.infer_lr >= 0.0)) throw std::invalid_argument("PCN learning rates must be >= 0");
  WriteReport report;
  if (patterns.empty()) return report;

  std::vector<States> states;
  states.reserve(patterns.size());
  for (const auto& p : patterns) {
    if (!all_finite(p)) throw std::invalid_argument("patterns must be finite");
    states.push_back(initial_states(p));
  }
  const std::vector<bool> clamped(widths_[0], false);
  auto total = [&](const Vec& p) {
    double e = 0.0;
    for (const auto& x : states) e += energy_with(p, x);
    return e;
  };

  double e = total(params_);
  report.energy_before = e;
  report.trace.push_back(e);
  double lr = options.lr;
  for (std::size_t step = 0; step < options.steps; ++step) {
    if (options.infer_lr > 0.0) {
      for (auto& x : states) descend_states(x, clamped, options.infer_steps, options.infer_lr, nullptr);
      e = total(params_);
      report.trace.push_back(e);
    }
    if (lr > 0.0) {
      Vec g(params_.size(), 0.0);
      for (const auto& x : states) axpy(1.0, param_gradient(x), g);
      while (lr > 1e-14) {
        Vec trial = params_;
        axpy(-lr, g, trial);
        const double e_trial = total(trial);
        if (e_trial <= e) {
          params_ = std::move(trial);
          e = e_trial;
          break;
        }
        lr *= 0.5;
      }
      report.trace.push_back(e);
    }
    if (!std::isfinite(e) || e > 10.0 * report.energy_before + 1e-12) throw std::runtime_error("write diverged");
  }
  report.energy_after = e;
  return report;
}

Vec PcnMemory::read_cue(const Cue& cue, const PcnReadOptions& options, ReadReport* report) const {
  cue.validate(dim());
  if (options.steps == 0) throw std::invalid_argument("PCN read needs at least one step");
  States x = initial_states(cue.values);
  std::vector<bool> free_bottom(dim());
  for (std::size_t i = 0; i < dim(); ++i) free_bottom[i] = !(options.clamp && cue.observed[i]);
  std::vector<double>* trace = nullptr;
  if (report) {
    report->trace.assign(1, energy(x));
    trace = &report->trace;
  }
  descend_states(x, free_bottom, options.steps, options.lr, trace);
  return x[0];
}

void PcnMemory::forget(double gamma) {
  check_gamma(gamma);
  if (gamma == 1.0) return;
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i] = gamma * params_[i] + (1.0 - gamma) * init_params_[i];
}

void PcnMemory::save(std::ostream& out) const {
  put_header(out, kind());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(layers()));
  for (auto w : widths_) put<std::uint64_t>(out, w);
  put<double>(out, lambda_);
  put<std::uint64_t>(out, params_.size());
  for (double v : params_) put<double>(out, v);
  for (double v : init_params_) put<double>(out, v);
}

PcnMemory PcnMemory::load_body(std::istream& in, PcnWriteOptions write, PcnReadOptions read) {
  PcnMemory m;
  m.write_options_ = write;
  m.read_options_ = read;
  const auto L = get<std::uint32_t>(in);
  if (L == 0 || L > 64) throw std::runtime_error("memory snapshot: bad PCN layer count");
  m.widths_.resize(L + 1);
  for (auto& w : m.widths_) w = static_cast<std::size_t>(get<std::uint64_t>(in));
  m.lambda_ = get<double>(in);
  m.build_layout();
  const auto n = get<std::uint64_t>(in);
  if (n != m.params_.size()) throw std::runtime_error("memory snapshot: PCN parameter count mismatch");
  for (double& v : m.params_) v = get<double>(in);
  m.init_params_.resize(m.params_.size());
  for (double& v : m.init_params_) v = get<double>(in);
  return m;
}

// ---------------------------------------------------------------------------

std::unique_ptr<AssociativeMemory> load_memory(std::istream& in, const MemoryOptions& options) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kSnapshotMagic, 4) != 0) {
    throw std::runtime_error("not a memory snapshot");
  }
  if (get<std::uint32_t>(in) != kSnapshotVersion) throw std::runtime_error("unsupported memory snapshot version");
  switch (get<std::uint32_t>(in)) {
    case 1: return std::make_unique<HopfieldMemory>(HopfieldMemory::load_body(in, options.hopfield));
    case 2: return std::make_unique<ModernHopfieldMemory>(ModernHopfieldMemory::load_body(in, options.mhn));
    case 3: return std::make_unique<PcnMemory>(PcnMemory::load_body(in, options.pcn_write, options.pcn_read));
    default: throw std::runtime_error("memory snapshot: unknown memory kind");
  }
}

}  // namespace sharc
