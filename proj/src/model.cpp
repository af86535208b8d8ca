#include "sharc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sharc {

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

namespace {

double activate(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
  }
  return z;
}

// Derivative expressed through the pre-activation z.
double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error(what + ": truncated");
  return v;
}

// Forward pass with intermediates kept for reverse mode.
struct HeadTrace {
  Vec pre;     // hidden pre-activations (empty for linear head)
  Vec hidden;  // hidden activations
  Vec logits;
};

HeadTrace head_trace(const Head& head, std::span<const double> x) {
  const auto& s = head.spec();
  const auto& L = head.layout();
  const Vec& p = head.params();
  HeadTrace tr;
  std::span<const double> feat = x;
  std::size_t feat_dim = s.input;
  if (s.hidden > 0) {
    tr.pre.assign(s.hidden, 0.0);
    tr.hidden.assign(s.hidden, 0.0);
    for (std::size_t r = 0; r < s.hidden; ++r) {
      const double* row = p.data() + L.w1 + r * s.input;
      double z = p[L.b1 + r];
      for (std::size_t i = 0; i < s.input; ++i) z += row[i] * x[i];
      tr.pre[r] = z;
      tr.hidden[r] = activate(s.activation, z);
    }
    feat = tr.hidden;
    feat_dim = s.hidden;
  }
  tr.logits.assign(s.classes, 0.0);
  for (std::size_t c = 0; c < s.classes; ++c) {
    const double* row = p.data() + L.w2 + c * feat_dim;
    double z = p[L.b2 + c];
    for (std::size_t i = 0; i < feat_dim; ++i) z += row[i] * feat[i];
    tr.logits[c] = z;
  }
  return tr;
}

void apply_mask(Vec& logits, const std::optional<ClassRange>& mask) {
  if (!mask) return;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (!mask->contains(c)) logits[c] = kMaskedLogit;
  }
}

// Accumulates d(sum_c upstream_c * logit_c)/dtheta into grad, and optionally
// d/dx into input_grad.
void head_backward(const Head& head, std::span<const double> x, const HeadTrace& tr,
                   std::span<const double> upstream, std::span<double> grad, std::span<double> input_grad) {
  const auto& s = head.spec();
  const auto& L = head.layout();
  const Vec& p = head.params();
  const bool hidden = s.hidden > 0;
  std::span<const double> feat = hidden ? std::span<const double>(tr.hidden) : x;
  const std::size_t feat_dim = hidden ? s.hidden : s.input;

  Vec dfeat(feat_dim, 0.0);
  for (std::size_t c = 0; c < s.classes; ++c) {
    const double u = upstream[c];
    if (u == 0.0) continue;
    if (!grad.empty()) {
      double* grow = grad.data() + L.w2 + c * feat_dim;
      for (std::size_t i = 0; i < feat_dim; ++i) grow[i] += u * feat[i];
      grad[L.b2 + c] += u;
    }
    const double* row = p.data() + L.w2 + c * feat_dim;
    for (std::size_t i = 0; i < feat_dim; ++i) dfeat[i] += u * row[i];
  }

  if (!hidden) {
    if (!input_grad.empty()) {
      for (std::size_t i = 0; i < s.input; ++i) input_grad[i] += dfeat[i];
    }
    return;
  }
  for (std::size_t r = 0; r < s.hidden; ++r) {
    const double dz = dfeat[r] * activate_grad(s.activation, tr.pre[r]);
    if (dz == 0.0) continue;
    if (!grad.empty()) {
      double* grow = grad.data() + L.w1 + r * s.input;
      for (std::size_t i = 0; i < s.input; ++i) grow[i] += dz * x[i];
      grad[L.b1 + r] += dz;
    }
    if (!input_grad.empty()) {
      const double* row = p.data() + L.w1 + r * s.input;
      for (std::size_t i = 0; i < s.input; ++i) input_grad[i] += dz * row[i];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Backbone

Dims3 ConvLayer::output_dims(const Dims3& in) const {
  if (in.k != in_channels) throw std::invalid_argument("conv input channel mismatch");
  if (in.h + 2 * pad < kernel || in.w + 2 * pad < kernel) throw std::invalid_argument("conv input too small");
  return {(in.h + 2 * pad - kernel) / stride + 1, (in.w + 2 * pad - kernel) / stride + 1, out_channels};
}

Tensor3 conv_relu_forward(const ConvLayer& layer, const Tensor3& input) {
  const Dims3 in = input.dims();
  const Dims3 out_dims = layer.output_dims(in);
  Tensor3 out(out_dims);
  for (std::size_t oy = 0; oy < out_dims.h; ++oy) {
    for (std::size_t ox = 0; ox < out_dims.w; ++ox) {
      for (std::size_t o = 0; o < layer.out_channels; ++o) {
        double z = layer.bias[o];
        for (std::size_t ky = 0; ky < layer.kernel; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * layer.stride + ky) - static_cast<std::ptrdiff_t>(layer.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t kx = 0; kx < layer.kernel; ++kx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * layer.stride + kx) - static_cast<std::ptrdiff_t>(layer.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            for (std::size_t i = 0; i < layer.in_channels; ++i) {
              z += layer.weight(o, ky, kx, i) * input(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), i);
            }
          }
        }
        out(oy, ox, o) = z > 0.0 ? z : 0.0;
      }
    }
  }
  return out;
}

Backbone Backbone::make_conv(const Dims3& input, const ConvBackboneSpec& spec) {
  if (spec.channels.empty()) throw std::invalid_argument("conv backbone needs at least one layer");
  Backbone b;
  b.kind_ = Kind::conv;
  b.input_ = input;
  RngStream rng(spec.seed);
  Dims3 cur = input;
  for (std::size_t l = 0; l < spec.channels.size(); ++l) {
    ConvLayer layer;
    layer.in_channels = cur.k;
    layer.out_channels = spec.channels[l];
    layer.kernel = spec.kernel;
    layer.stride = spec.stride;
    layer.pad = spec.pad;
    const std::size_t fan_in = layer.kernel * layer.kernel * layer.in_channels;
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    layer.weights.resize(layer.out_channels * fan_in);
    RngStream layer_rng = rng.derive(l);
    for (double& w : layer.weights) w = scale * layer_rng.normal();
    layer.bias.assign(layer.out_channels, 0.0);
    cur = layer.output_dims(cur);
    b.layers_.push_back(std::move(layer));
  }
  b.out_ = cur;
  return b;
}

Backbone Backbone::make_precomputed(const Dims3& out, std::unordered_map<std::uint64_t, FeatureMap> table) {
  for (const auto& [id, fm] : table) {
    if (fm.dims() != out) throw std::invalid_argument("precomputed feature map " + std::to_string(id) + " has wrong dims");
  }
  Backbone b;
  b.kind_ = Kind::precomputed;
  b.out_ = out;
  b.table_ = std::move(table);
  return b;
}

FeatureMap Backbone::forward(const LabeledExample& example) const {
  if (kind_ == Kind::precomputed) {
    auto it = table_.find(example.id);
    if (it == table_.end()) throw std::out_of_range("no precomputed features for example " + std::to_string(example.id));
    return it->second;
  }
  return forward_image(example.input);
}

FeatureMap Backbone::forward_image(const Tensor3& image) const {
  if (kind_ != Kind::conv) throw std::logic_error("precomputed backbone cannot embed raw images");
  if (image.dims() != input_) {
    throw std::invalid_argument("image dims (" + std::to_string(image.dims().h) + "," + std::to_string(image.dims().w) +
                                "," + std::to_string(image.dims().k) + ") do not match backbone input");
  }
  Tensor3 cur = image;
  for (const auto& layer : layers_) cur = conv_relu_forward(layer, cur);
  return cur;
}

// ---------------------------------------------------------------------------
// Feature file

FeatureFile read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SHRF", 4) != 0) throw std::runtime_error(path + ": not a SHRF feature file");
  const auto n = get_le<std::uint32_t>(in, path);
  FeatureFile f;
  f.dims.h = get_le<std::uint32_t>(in, path);
  f.dims.w = get_le<std::uint32_t>(in, path);
  f.dims.k = get_le<std::uint32_t>(in, path);
  f.records.reserve(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    FeatureRecord rec;
    rec.label = get_le<std::uint32_t>(in, path);
    rec.task = get_le<std::uint32_t>(in, path);
    Vec data(f.dims.volume());
    for (double& x : data) x = get_le<double>(in, path);
    rec.features = Tensor3(f.dims, std::move(data));
    if (!rec.features.all_finite()) throw std::runtime_error(path + ": non-finite feature value");
    f.records.push_back(std::move(rec));
  }
  return f;
}

void write_feature_file(const std::string& path, const FeatureFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.write("SHRF", 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.records.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.dims.h));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.dims.w));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.dims.k));
  for (const auto& rec : file.records) {
    if (rec.features.dims() != file.dims) throw std::invalid_argument("feature record dims mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.label));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.task));
    for (double x : rec.features.data()) put_le<double>(out, x);
  }
}

PrecomputedData precomputed_from_file(const FeatureFile& file) {
  LabeledSet set;
  set.dims = {0, 0, 0};
  std::unordered_map<std::uint64_t, FeatureMap> table;
  for (std::size_t r = 0; r < file.records.size(); ++r) {
    set.examples.push_back({r, Tensor3(), file.records[r].label, file.records[r].task});
    table.emplace(r, file.records[r].features);
  }
  return {std::move(set), Backbone::make_precomputed(file.dims, std::move(table))};
}

// ---------------------------------------------------------------------------
// Head

Head::Head(const HeadSpec& spec) : spec_(spec) {
  if (spec.input == 0 || spec.classes == 0) throw std::invalid_argument("head needs input and class counts");
  std::size_t off = 0;
  if (spec.hidden > 0) {
    layout_.w1 = off;
    off += spec.hidden * spec.input;
    layout_.b1 = off;
    off += spec.hidden;
  }
  const std::size_t feat = spec.hidden > 0 ? spec.hidden : spec.input;
  layout_.w2 = off;
  off += spec.classes * feat;
  layout_.b2 = off;
  off += spec.classes;
  params_.assign(off, 0.0);
}

Head::Head(const HeadSpec& spec, RngStream& rng) : Head(spec) {
  auto fill = [&](std::size_t start, std::size_t count, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) params_[start + i] = s * (2.0 * rng.uniform() - 1.0);
  };
  if (spec.hidden > 0) {
    fill(layout_.w1, spec.hidden * spec.input, spec.input);
    fill(layout_.w2, spec.classes * spec.hidden, spec.hidden);
  } else {
    fill(layout_.w2, spec.classes * spec.input, spec.input);
  }
}

void Head::set_params(Vec params) {
  if (params.size() != params_.size()) throw std::invalid_argument("parameter vector length mismatch");
  params_ = std::move(params);
}

Vec Head::logits(const FeatureMap& a, const std::optional<ClassRange>& mask) const {
  if (a.size() != spec_.input) throw std::invalid_argument("feature map size does not match head input");
  Vec out = head_trace(*this, a.flat()).logits;
  apply_mask(out, mask);
  return out;
}

std::size_t Head::predict(const FeatureMap& a, const std::optional<ClassRange>& mask) const {
  const Vec z = logits(a, mask);
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

LossGrad loss_and_grad(const Head& head, std::span<const TrainItem> items) {
  if (items.empty()) throw std::invalid_argument("loss_and_grad: empty item list");
  const auto& s = head.spec();
  LossGrad out;
  out.grad.assign(head.param_count(), 0.0);
  for (const auto& item : items) {
    if (item.features == nullptr || item.features->size() != s.input) {
      throw std::invalid_argument("loss_and_grad: feature map size does not match head input");
    }
    if (item.label >= s.classes) throw std::out_of_range("loss_and_grad: label out of range");
    if (item.mask && !item.mask->contains(item.label)) {
      throw std::invalid_argument("loss_and_grad: label outside its task mask");
    }
    HeadTrace tr = head_trace(head, item.features->flat());
    apply_mask(tr.logits, item.mask);
    out.loss += cross_entropy(tr.logits, item.label);
    Vec upstream = softmax(tr.logits);
    upstream[item.label] -= 1.0;
    head_backward(head, item.features->flat(), tr, upstream, out.grad, {});
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  out.loss *= inv;
  for (double& g : out.grad) g *= inv;
  return out;
}

Tensor3 class_score_input_grad(const Head& head, const FeatureMap& a, std::size_t c) {
  const auto& s = head.spec();
  if (c >= s.classes) throw std::out_of_range("class index out of range");
  if (a.size() != s.input) throw std::invalid_argument("feature map size does not match head input");
  const HeadTrace tr = head_trace(head, a.flat());
  Vec upstream(s.classes, 0.0);
  upstream[c] = 1.0;
  Tensor3 g(a.dims());
  head_backward(head, a.flat(), tr, upstream, {}, g.flat());
  return g;
}

void sgd_step(Head& head, std::span<const double> grad, double lr) {
  if (grad.size() != head.param_count()) throw std::invalid_argument("gradient length does not match parameter count");
  axpy(-lr, grad, head.mutable_params());
}

}  // namespace sharc
