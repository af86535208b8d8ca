#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sharc/core.hpp"

namespace sharc {

/// Partially observed pattern presented for completion.
struct Cue {
  Vec values;
  std::vector<bool> observed;

  static Cue full(Vec values);
  std::size_t observed_count() const;
  /// Throws unless sizes match `dim`, values are finite and one coord is observed.
  void validate(std::size_t dim) const;
};

enum class MemoryKind { hopfield, mhn, pcn };

std::string to_string(MemoryKind kind);
MemoryKind parse_memory_kind(const std::string& name);

/// Common write/read/forget surface of every associative memory.
class AssociativeMemory {
 public:
  virtual ~AssociativeMemory() = default;

  virtual MemoryKind kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual void write(std::span<const Vec> patterns) = 0;
  /// Always returns a pattern (best state reached); never signals failure.
  virtual Vec read(const Cue& cue) const = 0;
  /// Decay surrogate for the forgetting step; gamma in (0, 1], 1 is a no-op.
  virtual void forget(double gamma) = 0;
  /// Marks a task boundary (ages stored content where the kind tracks age).
  virtual void end_task() {}
  /// Little-endian snapshot; see docs/formats.md.
  virtual void save(std::ostream& out) const = 0;
  virtual std::unique_ptr<AssociativeMemory> clone() const = 0;
};

// ---------------------------------------------------------------------------

struct HopfieldOptions {
  std::size_t max_iters = 100;
  bool clamp_output = false;
};

/// Classical Hopfield network over bipolar patterns, Hebbian outer-product
/// storage, energy -1/2 xi^T W xi.
class HopfieldMemory final : public AssociativeMemory {
 public:
  explicit HopfieldMemory(std::size_t dim, HopfieldOptions options = {});

  struct Recall {
    Vec state;
    std::vector<double> energy_trace;  // energy after each accepted update, starting with the initial state
    std::size_t iterations = 0;
    bool converged = false;
  };

  MemoryKind kind() const override { return MemoryKind::hopfield; }
  std::size_t dim() const override { return dim_; }
  /// W <- W + sum x x^T with the diagonal kept at zero. Entries must be +-1.
  void write(std::span<const Vec> patterns) override;
  Vec read(const Cue& cue) const override;
  /// W <- gamma W
  void forget(double gamma) override;
  void save(std::ostream& out) const override;
  std::unique_ptr<AssociativeMemory> clone() const override { return std::make_unique<HopfieldMemory>(*this); }

  /// Synchronous sign updates (sign(0) = +1). An update that would not lower
  /// the energy is replaced by one in-order asynchronous sweep, which cannot
  /// raise it. Unobserved cue coordinates start at +1.
  Recall recall(const Cue& cue, std::size_t max_iters) const;
  double energy(std::span<const double> state) const;

  double weight(std::size_t p, std::size_t q) const { return weights_[p * dim_ + q]; }
  const Vec& weights() const { return weights_; }
  std::size_t pattern_count() const { return count_; }
  const HopfieldOptions& options() const { return options_; }

  static HopfieldMemory load_body(std::istream& in, HopfieldOptions options);

 private:
  std::size_t dim_;
  Vec weights_;
  std::size_t count_ = 0;
  HopfieldOptions options_;
};

// ---------------------------------------------------------------------------

struct MhnOptions {
  double beta = 32.0;
  std::size_t iters = 3;
  bool clamp_output = false;
};

/// Modern (continuous) Hopfield network storing pattern columns explicitly.
class ModernHopfieldMemory final : public AssociativeMemory {
 public:
  explicit ModernHopfieldMemory(std::size_t dim, MhnOptions options = {});

  MemoryKind kind() const override { return MemoryKind::mhn; }
  std::size_t dim() const override { return dim_; }
  /// Appends columns with age 0; duplicates are kept.
  void write(std::span<const Vec> patterns) override;
  Vec read(const Cue& cue) const override;
  /// Scales each column by gamma^age.
  void forget(double gamma) override;
  void end_task() override;
  void save(std::ostream& out) const override;
  std::unique_ptr<AssociativeMemory> clone() const override {
    return std::make_unique<ModernHopfieldMemory>(*this);
  }

  /// Iterates xi <- X softmax(beta X^T xi) from the cue (unobserved coords at
  /// 0), re-clamping observed coordinates after every iteration but the last.
  /// Falls back to unclamped iterations if clamping left the energy above its
  /// starting value.
  Vec retrieve(const Cue& cue, std::size_t iters) const;
  Vec update(std::span<const double> state) const;
  double energy(std::span<const double> state) const;

  std::size_t pattern_count() const { return patterns_.size(); }
  const std::vector<Vec>& patterns() const { return patterns_; }
  const std::vector<std::uint32_t>& ages() const { return ages_; }
  double max_norm() const { return max_norm_; }
  double beta() const { return options_.beta; }
  const MhnOptions& options() const { return options_; }

  static ModernHopfieldMemory load_body(std::istream& in, MhnOptions options);

 private:
  void refresh_max_norm();

  std::size_t dim_;
  MhnOptions options_;
  std::vector<Vec> patterns_;
  std::vector<std::uint32_t> ages_;
  double max_norm_ = 0.0;
};

// ---------------------------------------------------------------------------

struct PcnSpec {
  std::size_t dim = 0;
  std::vector<std::size_t> hidden{64, 32};  // widths of x_1 .. x_L
  double lambda = 1.0;
  std::uint64_t seed = 11;
};

struct PcnWriteOptions {
  std::size_t steps = 100;
  double lr = 0.01;
  std::size_t infer_steps = 20;
  double infer_lr = 0.1;
};

struct PcnReadOptions {
  std::size_t steps = 200;
  double lr = 0.05;
  bool clamp = true;
};

/// Layered predictive-coding memory. Layer l < L predicts the layer below as
/// A_l(x_{l+1}) = W_l tanh(x_{l+1}) + b_l, and the top layer is pulled toward
/// the prior vector omega_L. Energy:
///   E = |x_L - omega_L|^2 + lambda * sum_{l<L} |x_l - A_l(x_{l+1})|^2
class PcnMemory final : public AssociativeMemory {
 public:
  using States = std::vector<Vec>;  // x_0 .. x_L

  explicit PcnMemory(const PcnSpec& spec, PcnWriteOptions write = {}, PcnReadOptions read = {});

  struct WriteReport {
    double energy_before = 0.0;
    double energy_after = 0.0;
    std::vector<double> trace;  // total energy after every inference and parameter step
  };

  struct ReadReport {
    std::vector<double> trace;  // energy after every accepted step, starting with the initial state
  };

  MemoryKind kind() const override { return MemoryKind::pcn; }
  std::size_t dim() const override { return widths_.front(); }
  void write(std::span<const Vec> patterns) override { write_patterns(patterns, write_options_); }
  Vec read(const Cue& cue) const override { return read_cue(cue, read_options_); }
  /// omega <- gamma omega + (1 - gamma) omega_init
  void forget(double gamma) override;
  void save(std::ostream& out) const override;
  std::unique_ptr<AssociativeMemory> clone() const override { return std::make_unique<PcnMemory>(*this); }

  /// Alternates state inference (x_0 clamped to each pattern) with parameter
  /// descent. Both phases backtrack, so the reported trace never increases.
  WriteReport write_patterns(std::span<const Vec> patterns, const PcnWriteOptions& options);
  /// Descends E over the free coordinates of x_0 and all hidden states with
  /// parameters fixed; observed coordinates stay clamped when options.clamp.
  Vec read_cue(const Cue& cue, const PcnReadOptions& options, ReadReport* report = nullptr) const;

  double energy(const States& x) const;
  States state_gradient(const States& x) const;
  Vec param_gradient(const States& x) const;
  /// x_0 = bottom, x_L = omega_L, x_l = A_l(x_{l+1}) top-down.
  States initial_states(std::span<const double> bottom) const;
  /// Energy reached by state inference from initial_states(pattern).
  double settled_energy(std::span<const double> pattern, std::size_t infer_steps, double infer_lr) const;

  std::size_t layers() const { return widths_.size() - 1; }
  const std::vector<std::size_t>& widths() const { return widths_; }
  double lambda() const { return lambda_; }
  const Vec& params() const { return params_; }
  void set_params(Vec params);
  const Vec& initial_params() const { return init_params_; }
  const PcnWriteOptions& write_options() const { return write_options_; }
  const PcnReadOptions& read_options() const { return read_options_; }

  static PcnMemory load_body(std::istream& in, PcnWriteOptions write, PcnReadOptions read);

 private:
  PcnMemory() = default;
  void build_layout();
  Vec prediction(std::size_t layer, std::span<const double> above) const;
  double energy_with(const Vec& params, const States& x) const;
  /// Backtracking descent over state coordinates. `free_bottom` marks which
  /// x_0 coordinates move. Returns the final energy.
  double descend_states(States& x, const std::vector<bool>& free_bottom, std::size_t steps, double lr,
                        std::vector<double>* trace) const;

  std::vector<std::size_t> widths_;  // widths_[0] = d
  double lambda_ = 1.0;
  std::vector<std::size_t> w_off_, b_off_;
  std::size_t prior_off_ = 0;
  Vec params_;
  Vec init_params_;
  PcnWriteOptions write_options_;
  PcnReadOptions read_options_;
};

struct MemoryOptions {
  HopfieldOptions hopfield;
  MhnOptions mhn;
  PcnWriteOptions pcn_write;
  PcnReadOptions pcn_read;
};

std::unique_ptr<AssociativeMemory> load_memory(std::istream& in, const MemoryOptions& options = {});

}  // namespace sharc
