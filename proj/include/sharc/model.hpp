#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sharc/core.hpp"
#include "sharc/stream.hpp"

namespace sharc {

/// Feature-map output of the backbone, dims (H, W, K).
using FeatureMap = Tensor3;

enum class Activation { identity, relu, tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// Logit value used for classes outside the task mask.
inline constexpr double kMaskedLogit = -1e30;

// ---------------------------------------------------------------------------
// Backbone

struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
  Vec weights;  // [out][ky][kx][in]
  Vec bias;     // [out]

  double weight(std::size_t o, std::size_t ky, std::size_t kx, std::size_t i) const {
    return weights[((o * kernel + ky) * kernel + kx) * in_channels + i];
  }
  Dims3 output_dims(const Dims3& in) const;
};

/// Zero-padded strided convolution followed by relu.
Tensor3 conv_relu_forward(const ConvLayer& layer, const Tensor3& input);

struct ConvBackboneSpec {
  std::vector<std::size_t> channels{8, 16};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
  std::uint64_t seed = 7;
};

/// Frozen feature extractor g. Either a stack of fixed-seed He-initialised
/// conv+relu layers, or a lookup table of precomputed feature maps keyed by
/// example id. Nothing in here is ever updated after construction.
class Backbone {
 public:
  enum class Kind { conv, precomputed };

  static Backbone make_conv(const Dims3& input, const ConvBackboneSpec& spec);
  static Backbone make_precomputed(const Dims3& out, std::unordered_map<std::uint64_t, FeatureMap> table);

  Kind kind() const { return kind_; }
  const Dims3& input_dims() const { return input_; }
  const Dims3& out_dims() const { return out_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

  FeatureMap forward(const LabeledExample& example) const;
  FeatureMap forward_image(const Tensor3& image) const;

 private:
  Kind kind_ = Kind::conv;
  Dims3 input_;
  Dims3 out_;
  std::vector<ConvLayer> layers_;
  std::unordered_map<std::uint64_t, FeatureMap> table_;
};

// ---------------------------------------------------------------------------
// Precomputed feature file ("SHRF", little-endian)

struct FeatureRecord {
  std::size_t label = 0;
  std::size_t task = 0;
  FeatureMap features;
};

struct FeatureFile {
  Dims3 dims;
  std::vector<FeatureRecord> records;
};

FeatureFile read_feature_file(const std::string& path);
void write_feature_file(const std::string& path, const FeatureFile& file);

/// Examples keyed by record index plus the matching lookup backbone.
struct PrecomputedData {
  LabeledSet set;
  Backbone backbone;
};
PrecomputedData precomputed_from_file(const FeatureFile& file);

// ---------------------------------------------------------------------------
// Head

struct HeadSpec {
  std::size_t input = 0;
  std::size_t hidden = 64;  // 0 selects a single linear layer
  std::size_t classes = 0;
  Activation activation = Activation::relu;
};

/// Trainable MLP f_theta over the flattened feature map. All parameters live
/// in one flat vector laid out as [W1 | b1 | W2 | b2] (hidden) or [W | b]
/// (linear), weights row-major with one row per output unit.
class Head {
 public:
  /// Zero-initialised parameters.
  explicit Head(const HeadSpec& spec);
  /// Uniform(-s, s) weights with s = 1/sqrt(fan_in), zero biases.
  Head(const HeadSpec& spec, RngStream& rng);

  const HeadSpec& spec() const { return spec_; }
  std::size_t param_count() const { return params_.size(); }
  const Vec& params() const { return params_; }
  void set_params(Vec params);
  std::span<double> mutable_params() { return params_; }

  /// Logits; classes outside `mask` are pinned to kMaskedLogit.
  Vec logits(const FeatureMap& a, const std::optional<ClassRange>& mask = std::nullopt) const;
  std::size_t predict(const FeatureMap& a, const std::optional<ClassRange>& mask = std::nullopt) const;

  struct Layout {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  };
  const Layout& layout() const { return layout_; }

 private:
  HeadSpec spec_;
  Layout layout_;
  Vec params_;
};

struct TrainItem {
  const FeatureMap* features = nullptr;
  std::size_t label = 0;
  std::optional<ClassRange> mask;
};

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

/// Mean cross-entropy over items and its exact gradient w.r.t. the flat
/// parameter vector.
LossGrad loss_and_grad(const Head& head, std::span<const TrainItem> items);

/// d logit_c / dA, same dims as A.
Tensor3 class_score_input_grad(const Head& head, const FeatureMap& a, std::size_t c);

/// theta <- theta - lr * grad
void sgd_step(Head& head, std::span<const double> grad, double lr);

}  // namespace sharc
