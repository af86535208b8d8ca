#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace sharc {

using Vec = std::vector<double>;

/// Shape of a rank-3 channels-last tensor.
struct Dims3 {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t k = 0;

  std::size_t volume() const { return h * w * k; }
  auto operator<=>(const Dims3&) const = default;
};

/// Dense H x W x K tensor stored row-major with channels innermost,
/// i.e. element (i, j, c) lives at ((i * W) + j) * K + c.
class Tensor3 {
 public:
  Tensor3() = default;
  explicit Tensor3(Dims3 dims, double fill = 0.0);
  Tensor3(Dims3 dims, Vec data);

  const Dims3& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j, std::size_t c) {
    return data_[(i * dims_.w + j) * dims_.k + c];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t c) const {
    return data_[(i * dims_.w + j) * dims_.k + c];
  }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const Vec& data() const { return data_; }

  bool all_finite() const;
  bool operator==(const Tensor3&) const = default;

 private:
  Dims3 dims_;
  Vec data_;
};

/// Counter-based splitmix64 stream. Draw i is a pure function of (seed, i),
/// so sequences are identical on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal();
  /// Uniform integer in [0, n), rejection-sampled so it is unbiased.
  std::size_t below(std::size_t n);

  /// Independent child stream keyed by `tag`; does not advance this stream.
  RngStream derive(std::uint64_t tag) const;

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Indices of a uniform sample of size n from [0, population): without
/// replacement when n <= population, with replacement otherwise.
std::vector<std::size_t> sample_indices(RngStream& rng, std::size_t population, std::size_t n);

Vec softmax(std::span<const double> v, double beta = 1.0);

/// beta^-1 * log(sum_i exp(beta * v_i)), evaluated with max-subtraction.
double lse(double beta, std::span<const double> v);

/// Nearest-rank lower quantile: sorted(v)[floor(mu * (len - 1))].
double quantile_threshold(std::span<const double> v, double mu);

/// -log softmax(logits)[label]
double cross_entropy(std::span<const double> logits, std::size_t label);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
double norm(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
bool all_finite(std::span<const double> v);

}  // namespace sharc
