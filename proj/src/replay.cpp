#include "sharc/replay.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sharc {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("buffer snapshot: truncated");
  return v;
}

std::vector<TrainItem> pooled(const ReplayContext& replay) {
  std::vector<TrainItem> out;
  for (const auto& task : replay.per_task) out.insert(out.end(), task.begin(), task.end());
  return out;
}

std::vector<TrainItem> pick(const std::vector<TrainItem>& pool, std::size_t n, RngStream& rng) {
  std::vector<TrainItem> out;
  for (auto i : sample_indices(rng, pool.size(), n)) out.push_back(pool[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// EpisodicBuffer

EpisodicBuffer::EpisodicBuffer(std::size_t budget, std::size_t tasks, BudgetUnit unit)
    : budget_(budget), unit_(unit), per_task_(tasks) {
  if (tasks == 0) throw std::invalid_argument("buffer needs at least one task");
}

void EpisodicBuffer::insert(std::size_t task, BufferSlot item) {
  if (task >= per_task_.size()) throw std::out_of_range("buffer task id out of range");
  if (item.map.task != task) throw std::invalid_argument("buffer item task does not match target task");
  auto& q = per_task_[task];
  q.push_back(std::move(item));
  if (unit_ == BudgetUnit::slots) {
    while (q.size() > per_task_share()) q.pop_front();
  } else {
    while (!q.empty() && task_bytes(task) > per_task_share()) q.pop_front();
  }
}

std::vector<BufferSlot> EpisodicBuffer::sample(std::optional<std::size_t> task, std::size_t n, RngStream& rng) const {
  std::vector<const BufferSlot*> pool;
  if (task) {
    for (const auto& item : per_task_.at(*task)) pool.push_back(&item);
  } else {
    for (const auto& q : per_task_) {
      for (const auto& item : q) pool.push_back(&item);
    }
  }
  if (pool.empty()) throw std::runtime_error("cannot sample from an empty buffer");
  std::vector<BufferSlot> out;
  for (auto i : sample_indices(rng, pool.size(), n)) out.push_back(*pool[i]);
  return out;
}

std::size_t EpisodicBuffer::size() const {
  std::size_t n = 0;
  for (const auto& q : per_task_) n += q.size();
  return n;
}

std::size_t EpisodicBuffer::task_bytes(std::size_t task) const {
  std::size_t n = 0;
  for (const auto& item : per_task_.at(task)) n += stored_bytes(item.map);
  return n;
}

std::size_t EpisodicBuffer::bytes_used() const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < per_task_.size(); ++t) n += task_bytes(t);
  return n;
}

void EpisodicBuffer::save(std::ostream& out) const {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(per_task_.size()));
  for (const auto& q : per_task_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(q.size()));
    for (const auto& item : q) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(item.source));
      write_sparse(out, item.map);
    }
  }
}

EpisodicBuffer EpisodicBuffer::load(std::istream& in, std::size_t budget, BudgetUnit unit) {
  const auto tasks = get<std::uint32_t>(in);
  EpisodicBuffer buf(budget, tasks, unit);
  for (std::uint32_t t = 0; t < tasks; ++t) {
    const auto n = get<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < n; ++i) {
      BufferSlot slot;
      slot.source = get<std::uint32_t>(in);
      slot.map = read_sparse(in);
      slot.label = slot.map.label;
      buf.per_task_[t].push_back(std::move(slot));
    }
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Projections

Vec agem_project(std::span<const double> g, std::span<const double> ref) {
  const double d = dot(g, ref);
  Vec out(g.begin(), g.end());
  if (d >= 0.0) return out;
  axpy(-d / squared_norm(ref), ref, out);
  return out;
}

namespace {

// Solves G_AA v_A = -b_A for a candidate support A (partial pivoting) and
// accepts the result only if it is strictly positive on A and every
// constraint outside A holds, i.e. it satisfies the KKT conditions.
bool solve_on(const std::vector<Vec>& gram, const Vec& b, const std::vector<std::size_t>& act, Vec& v) {
  const std::size_t n = act.size();
  if (n == 0) return false;
  std::vector<Vec> a(n, Vec(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i][j] = gram[act[i]][act[j]];
    a[i][n] = -b[act[i]];
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    if (std::abs(a[piv][c]) <= 1e-12 * std::max(1.0, gram[act[c]][act[c]])) return false;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= n; ++k) a[r][k] -= f * a[c][k];
    }
  }
  Vec next(v.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    next[act[i]] = a[i][n] / a[i][i];
    if (!(next[act[i]] > 0.0)) return false;
  }
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (next[k] > 0.0) continue;
    double grad_k = b[k], scale = std::abs(b[k]);
    for (std::size_t l = 0; l < v.size(); ++l) {
      grad_k += gram[k][l] * next[l];
      scale += std::abs(gram[k][l] * next[l]);
    }
    if (grad_k < -1e-9 * scale) return false;  // relative: multipliers can be large when refs are nearly collinear
  }
  v = next;
  return true;
}

// Tries the support of v, then each support differing from it by one index.
// Rank-deficient supports (more active references than dimensions) have
// non-unique multipliers, so the coordinate steps may settle on too many.
bool solve_support(const std::vector<Vec>& gram, const Vec& b, Vec& v) {
  std::vector<std::size_t> act;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (v[k] > 0.0) act.push_back(k);
  }
  if (solve_on(gram, b, act, v)) return true;
  for (std::size_t i = 0; i < act.size(); ++i) {
    auto fewer = act;
    fewer.erase(fewer.begin() + static_cast<std::ptrdiff_t>(i));
    if (solve_on(gram, b, fewer, v)) return true;
  }
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (v[k] > 0.0) continue;
    auto more = act;
    more.insert(std::lower_bound(more.begin(), more.end(), k), k);
    if (solve_on(gram, b, more, v)) return true;
    for (std::size_t i = 0; i < act.size(); ++i) {
      auto swapped = more;
      swapped.erase(std::find(swapped.begin(), swapped.end(), act[i]));
      if (solve_on(gram, b, swapped, v)) return true;
    }
  }
  return false;
}

// Last resort for small problems: every support, smallest first.
bool solve_exhaustive(const std::vector<Vec>& gram, const Vec& b, Vec& v) {
  const std::size_t m = v.size();
  if (m > 12) return false;
  std::vector<std::uint32_t> masks(std::size_t{1} << m);
  std::iota(masks.begin(), masks.end(), 0u);
  std::stable_sort(masks.begin(), masks.end(),
                   [](std::uint32_t x, std::uint32_t y) { return std::popcount(x) < std::popcount(y); });
  for (auto mask : masks) {
    std::vector<std::size_t> act;
    for (std::size_t k = 0; k < m; ++k) {
      if (mask & (1u << k)) act.push_back(k);
    }
    if (solve_on(gram, b, act, v)) return true;
  }
  return false;
}

}  // namespace

Vec gem_project(std::span<const double> g, std::span<const Vec> refs, const GemOptions& options) {
  if (refs.empty()) throw std::invalid_argument("gem_project needs at least one reference gradient");
  const std::size_t m = refs.size();
  for (const auto& r : refs) {
    if (r.size() != g.size()) throw std::invalid_argument("gem_project: gradient length mismatch");
  }

  Vec b(m);
  bool feasible = true;
  for (std::size_t k = 0; k < m; ++k) {
    b[k] = dot(refs[k], g) + options.eps;
    if (b[k] < 0.0) feasible = false;
  }
  if (feasible) return Vec(g.begin(), g.end());

  std::vector<Vec> gram(m, Vec(m));
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t l = k; l < m; ++l) gram[k][l] = gram[l][k] = dot(refs[k], refs[l]);
  }

  // Dual: minimise 1/2 v^T G v + b^T v over v >= 0 by exact coordinate steps.
  // Every few sweeps the current support is solved exactly, which finishes
  // nearly collinear instances where coordinate steps crawl.
  Vec v(m, 0.0);
  bool converged = false;
  for (std::size_t it = 0; it < options.max_iters && !converged; ++it) {
    if (it > 0 && it % 16 == 0 && solve_support(gram, b, v)) {
      converged = true;
      break;
    }
    double largest_move = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (gram[k][k] <= 0.0) continue;  // zero reference: constraint holds trivially
      double grad_k = b[k];
      for (std::size_t l = 0; l < m; ++l) grad_k += gram[k][l] * v[l];
      const double next = std::max(0.0, v[k] - grad_k / gram[k][k]);
      largest_move = std::max(largest_move, std::abs(next - v[k]) * std::sqrt(gram[k][k]));
      v[k] = next;
    }
    converged = largest_move <= options.tolerance;
  }

  if (!converged) converged = solve_support(gram, b, v) || solve_exhaustive(gram, b, v);

  Vec z(g.begin(), g.end());
  for (std::size_t k = 0; k < m; ++k) {
    if (v[k] != 0.0) axpy(v[k], refs[k], z);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < m; ++k) worst = std::max(worst, -(dot(refs[k], z) + options.eps));
  if (!converged || worst > options.feasibility_tolerance) {
    std::ostringstream msg;
    msg << "gem_project did not converge within " << options.max_iters << " iterations; worst constraint violation "
        << worst;
    throw std::runtime_error(msg.str());
  }
  return z;
}

// ---------------------------------------------------------------------------
// Strategies

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::sgd: return "sgd";
    case Strategy::joint: return "joint";
    case Strategy::er: return "er";
    case Strategy::gem: return "gem";
    case Strategy::agem: return "agem";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "sgd") return Strategy::sgd;
  if (name == "joint") return Strategy::joint;
  if (name == "er") return Strategy::er;
  if (name == "gem") return Strategy::gem;
  if (name == "agem" || name == "a-gem") return Strategy::agem;
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

StepInfo strategy_step(Strategy strategy, Head& head, std::span<const TrainItem> batch, const ReplayContext& replay,
                       double lr, RngStream& rng) {
  StepInfo info;
  const bool has_past = !replay.per_task.empty();
  const std::vector<TrainItem> pool = pooled(replay);
  if (has_past && pool.empty() && strategy != Strategy::sgd && strategy != Strategy::joint) {
    throw std::runtime_error("strategy " + to_string(strategy) + " has no replay data for past tasks");
  }

  LossGrad current = loss_and_grad(head, batch);
  info.loss = current.loss;

  if (strategy == Strategy::sgd || (!has_past && replay.joint.empty())) {
    info.direction = std::move(current.grad);
  } else if (strategy == Strategy::joint) {
    std::vector<TrainItem> all(batch.begin(), batch.end());
    all.insert(all.end(), replay.joint.begin(), replay.joint.end());
    info.direction = loss_and_grad(head, all).grad;
  } else if (strategy == Strategy::er) {
    std::vector<TrainItem> all(batch.begin(), batch.end());
    const auto drawn = pick(pool, replay.replay_batch, rng);
    all.insert(all.end(), drawn.begin(), drawn.end());
    info.direction = loss_and_grad(head, all).grad;
  } else if (strategy == Strategy::agem) {
    info.reference = loss_and_grad(head, pick(pool, replay.replay_batch, rng)).grad;
    info.direction = agem_project(current.grad, info.reference);
    info.projected = dot(current.grad, info.reference) < 0.0;
  } else {  // gem
    std::vector<Vec> refs;
    for (const auto& task : replay.per_task) {
      if (!task.empty()) refs.push_back(loss_and_grad(head, task).grad);
    }
    info.direction = gem_project(current.grad, refs, replay.gem);
    info.projected = info.direction != current.grad;
  }
  sgd_step(head, info.direction, lr);
  return info;
}

}  // namespace sharc
