#include "sharc/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sharc {

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

}  // namespace

Tensor3::Tensor3(Dims3 dims, double fill) : dims_(dims), data_(dims.volume(), fill) {}

Tensor3::Tensor3(Dims3 dims, Vec data) : dims_(dims), data_(std::move(data)) {
  if (data_.size() != dims_.volume()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match dims volume " + std::to_string(dims_.volume()));
  }
}

bool Tensor3::all_finite() const { return sharc::all_finite(data_); }

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return splitmix64(seed_ + counter_ * kGolden);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("below(0)");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

RngStream RngStream::derive(std::uint64_t tag) const {
  return RngStream(splitmix64(seed_ ^ splitmix64(tag + kGolden)));
}

std::vector<std::size_t> sample_indices(RngStream& rng, std::size_t population, std::size_t n) {
  if (population == 0) throw std::invalid_argument("sampling from an empty population");
  std::vector<std::size_t> out;
  out.reserve(n);
  if (n <= population) {
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t j = i + rng.below(population - i);
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.below(population));
  }
  return out;
}

Vec softmax(std::span<const double> v, double beta) {
  if (v.empty()) throw std::invalid_argument("empty input");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  const double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(beta * (v[i] - mx));
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double lse(double beta, std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("empty input");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(beta * (x - mx));
  return mx + std::log(sum) / beta;
}

double quantile_threshold(std::span<const double> v, double mu) {
  if (v.empty()) throw std::invalid_argument("empty input");
  if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("mu must lie in [0, 1]");
  Vec sorted(v.begin(), v.end());
  std::stable_sort(sorted.begin(), sorted.end());
  auto rank = static_cast<std::size_t>(std::floor(mu * static_cast<double>(sorted.size() - 1)));
  return sorted[rank];
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " logits");
  }
  return lse(1.0, logits) - logits[label];
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace sharc
