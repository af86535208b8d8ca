#include "sharc/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace sharc {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("sparse feature map: truncated");
  return v;
}
double get_f64(std::istream& in) {
  double v;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("sparse feature map: truncated");
  return v;
}

}  // namespace

ChannelSaliency channel_saliency(const Head& head, const FeatureMap& a, std::size_t c) {
  const Tensor3 g = class_score_input_grad(head, a, c);
  const Dims3 d = a.dims();
  ChannelSaliency out;
  out.class_used = c;
  out.alpha.assign(d.k, 0.0);
  for (std::size_t i = 0; i < d.h; ++i) {
    for (std::size_t j = 0; j < d.w; ++j) {
      for (std::size_t k = 0; k < d.k; ++k) out.alpha[k] += g(i, j, k);
    }
  }
  const double inv = 1.0 / static_cast<double>(d.h * d.w);
  for (double& x : out.alpha) x *= inv;
  return out;
}

std::size_t keep_count(std::size_t channels, double mu) {
  if (!(mu >= 0.0 && mu < 1.0)) throw std::invalid_argument("mu must lie in [0, 1)");
  const auto n = static_cast<std::size_t>(std::llround((1.0 - mu) * static_cast<double>(channels)));
  return std::clamp<std::size_t>(n, 1, channels);
}

SparseFeatureMap select_channels(const FeatureMap& a, const std::vector<std::uint32_t>& channels, std::size_t label,
                                 std::size_t task) {
  const Dims3 d = a.dims();
  SparseFeatureMap s;
  s.kept_channels = channels;
  s.full_dims = d;
  s.label = label;
  s.task = task;
  s.kept_data = Tensor3({d.h, d.w, channels.size()});
  for (std::size_t i = 0; i < d.h; ++i) {
    for (std::size_t j = 0; j < d.w; ++j) {
      for (std::size_t n = 0; n < channels.size(); ++n) {
        if (channels[n] >= d.k) throw std::out_of_range("kept channel index out of range");
        s.kept_data(i, j, n) = a(i, j, channels[n]);
      }
    }
  }
  return s;
}

SparseFeatureMap mask_feature_map(const FeatureMap& a, const ChannelSaliency& saliency, double mu, std::size_t label,
                                  std::size_t task) {
  const std::size_t k = a.dims().k;
  if (saliency.alpha.size() != k) throw std::invalid_argument("saliency length does not match channel count");
  const std::size_t keep = keep_count(k, mu);

  std::vector<std::uint32_t> order(k);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t x, std::uint32_t y) {
    return std::abs(saliency.alpha[x]) > std::abs(saliency.alpha[y]);
  });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return select_channels(a, order, label, task);
}

FeatureMap reconstruct_dense(const SparseFeatureMap& s) {
  const Dims3 d = s.full_dims;
  Tensor3 out(d);
  for (std::size_t i = 0; i < d.h; ++i) {
    for (std::size_t j = 0; j < d.w; ++j) {
      for (std::size_t n = 0; n < s.kept_channels.size(); ++n) out(i, j, s.kept_channels[n]) = s.kept_data(i, j, n);
    }
  }
  return out;
}

std::size_t stored_bytes(const SparseFeatureMap& s) {
  const std::size_t kept = s.kept_channels.size();
  return 8 * s.full_dims.h * s.full_dims.w * kept + 4 * kept + 24;
}

void write_sparse(std::ostream& out, const SparseFeatureMap& s) {
  const Dims3 d = s.full_dims;
  put_u32(out, static_cast<std::uint32_t>(d.h));
  put_u32(out, static_cast<std::uint32_t>(d.w));
  put_u32(out, static_cast<std::uint32_t>(d.k));
  put_u32(out, static_cast<std::uint32_t>(s.kept_channels.size()));
  put_u32(out, static_cast<std::uint32_t>(s.label));
  put_u32(out, static_cast<std::uint32_t>(s.task));
  for (auto c : s.kept_channels) put_u32(out, c);
  for (std::size_t n = 0; n < s.kept_channels.size(); ++n) {
    for (std::size_t i = 0; i < d.h; ++i) {
      for (std::size_t j = 0; j < d.w; ++j) put_f64(out, s.kept_data(i, j, n));
    }
  }
}

SparseFeatureMap read_sparse(std::istream& in) {
  SparseFeatureMap s;
  s.full_dims.h = get_u32(in);
  s.full_dims.w = get_u32(in);
  s.full_dims.k = get_u32(in);
  const std::uint32_t kept = get_u32(in);
  s.label = get_u32(in);
  s.task = get_u32(in);
  if (kept > s.full_dims.k) throw std::runtime_error("sparse feature map: more kept channels than channels");
  s.kept_channels.resize(kept);
  for (auto& c : s.kept_channels) {
    c = get_u32(in);
    if (c >= s.full_dims.k) throw std::runtime_error("sparse feature map: channel index out of range");
  }
  if (!std::is_sorted(s.kept_channels.begin(), s.kept_channels.end()) ||
      std::adjacent_find(s.kept_channels.begin(), s.kept_channels.end()) != s.kept_channels.end()) {
    throw std::runtime_error("sparse feature map: channel indices not strictly ascending");
  }
  s.kept_data = Tensor3({s.full_dims.h, s.full_dims.w, kept});
  for (std::size_t n = 0; n < kept; ++n) {
    for (std::size_t i = 0; i < s.full_dims.h; ++i) {
      for (std::size_t j = 0; j < s.full_dims.w; ++j) s.kept_data(i, j, n) = get_f64(in);
    }
  }
  return s;
}

}  // namespace sharc
