#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "sharc/core.hpp"
#include "sharc/model.hpp"

namespace sharc {

/// Per-channel importance alpha^c for one class.
struct ChannelSaliency {
  Vec alpha;
  std::size_t class_used = 0;
};

/// Channel-sparse feature map: the kept channels of A as a dense
/// (H, W, |kept|) block plus their ascending original indices.
struct SparseFeatureMap {
  std::vector<std::uint32_t> kept_channels;
  Tensor3 kept_data;
  Dims3 full_dims;
  std::size_t label = 0;
  std::size_t task = 0;

  bool operator==(const SparseFeatureMap&) const = default;
};

/// Global-average-pooled gradient of logit c w.r.t. A, one value per channel.
ChannelSaliency channel_saliency(const Head& head, const FeatureMap& a, std::size_t c);

/// max(1, round((1 - mu) * K))
std::size_t keep_count(std::size_t channels, double mu);

/// Keeps the keep_count(K, mu) channels of largest |alpha| (lower index wins ties).
SparseFeatureMap mask_feature_map(const FeatureMap& a, const ChannelSaliency& saliency, double mu,
                                  std::size_t label = 0, std::size_t task = 0);

/// Dense (H, W, K) map with dropped channels set to zero.
FeatureMap reconstruct_dense(const SparseFeatureMap& s);

/// Re-applies a stored channel selection to a dense map.
SparseFeatureMap select_channels(const FeatureMap& a, const std::vector<std::uint32_t>& channels, std::size_t label,
                                 std::size_t task);

/// Size of the serialized form: 8*H*W*|kept| + 4*|kept| + 24.
std::size_t stored_bytes(const SparseFeatureMap& s);

/// Header (H, W, K, |kept|, label, task as u32), kept indices (u32), kept data
/// (f64, channel-major). Little-endian.
void write_sparse(std::ostream& out, const SparseFeatureMap& s);
SparseFeatureMap read_sparse(std::istream& in);

}  // namespace sharc
