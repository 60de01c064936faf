#include "mta/model.hpp"

#include <cmath>
#include <random>
#include <variant>

#include "mta/errors.hpp"

namespace mta {

std::string_view family_name(ArchFamily family) {
  switch (family) {
    case ArchFamily::ResNetSmall: return "resnet-small";
    case ArchFamily::PlainCnn: return "plain-cnn";
    case ArchFamily::Depthwise: return "depthwise";
    case ArchFamily::UserDefined: return "user-defined";
  }
  return "unknown";
}

ArchFamily parse_family(std::string_view name) {
  if (name == "resnet-small") return ArchFamily::ResNetSmall;
  if (name == "plain-cnn") return ArchFamily::PlainCnn;
  if (name == "depthwise") return ArchFamily::Depthwise;
  if (name == "user-defined") return ArchFamily::UserDefined;
  throw ConfigError("unknown architecture family '" + std::string(name) + "'");
}

std::string_view head_name(HeadKind head) { return head == HeadKind::Flatten ? "flatten" : "gap"; }

HeadKind parse_head(std::string_view name) {
  if (name == "gap") return HeadKind::GlobalAverage;
  if (name == "flatten") return HeadKind::Flatten;
  throw ConfigError("unknown head '" + std::string(name) + "'");
}

ArchitectureSpec ArchitectureSpec::resnet13(Shape input_shape, std::size_t num_classes,
                                            std::vector<std::size_t> widths) {
  ArchitectureSpec spec;
  spec.family = ArchFamily::ResNetSmall;
  spec.block_widths = std::move(widths);
  spec.num_blocks = 4;
  spec.num_classes = num_classes;
  spec.input_shape = std::move(input_shape);
  apply_dataset_normalization(spec, spec.input_shape.at(2) == 3 ? "cifar10" : "mnist");
  return spec;
}

std::vector<std::size_t> ArchitectureSpec::stages() const {
  const std::size_t n = num_blocks == 0 ? block_widths.size() : std::min(num_blocks, block_widths.size());
  return {block_widths.begin(), block_widths.begin() + static_cast<std::ptrdiff_t>(n)};
}

void ArchitectureSpec::validate() const {
  if (input_shape.size() != 3 || input_shape[0] == 0 || input_shape[1] == 0 || input_shape[2] == 0) {
    throw ConfigError("input_shape must be (H, W, C) with positive sizes");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const std::size_t c = input_shape[2];
  if (norm_mean.size() != c || norm_std.size() != c) {
    throw ConfigError("normalization needs one mean and one std per input channel");
  }
  for (double s : norm_std) {
    if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
  }
  for (auto w : block_widths) {
    if (w == 0) throw ConfigError("block widths must be positive");
  }
  if (num_blocks > block_widths.size()) throw ConfigError("num_blocks exceeds the number of block widths");
  if (family == ArchFamily::UserDefined) {
    if (layers.empty()) throw ConfigError("user-defined architecture needs a layer list");
  } else if (stages().empty()) {
    throw ConfigError("architecture needs at least one block width");
  }
}

void to_json(nlohmann::json& j, const ArchitectureSpec& spec) {
  j = nlohmann::json{{"family", family_name(spec.family)},
                     {"head", head_name(spec.head)},
                     {"block_widths", spec.block_widths},
                     {"num_blocks", spec.num_blocks},
                     {"num_classes", spec.num_classes},
                     {"input_shape", spec.input_shape},
                     {"norm_mean", spec.norm_mean},
                     {"norm_std", spec.norm_std}};
  if (!spec.layers.empty()) {
    auto layers = nlohmann::json::array();
    for (const auto& l : spec.layers) layers.push_back({{"type", l.type}, {"out", l.out}, {"kernel", l.kernel}});
    j["layers"] = std::move(layers);
  }
}

void from_json(const nlohmann::json& j, ArchitectureSpec& spec) {
  if (!j.is_object()) throw ConfigError("architecture must be a JSON object");
  ArchitectureSpec out;
  try {
    out.family = parse_family(j.value("family", std::string("plain-cnn")));
    out.head = parse_head(j.value("head", std::string("gap")));
    out.block_widths = j.value("block_widths", out.block_widths);
    out.num_blocks = j.value("num_blocks", std::size_t{0});
    out.num_classes = j.value("num_classes", std::size_t{10});
    out.input_shape = j.value("input_shape", out.input_shape);
    const std::string dataset = out.input_shape.size() == 3 && out.input_shape[2] == 3 ? "cifar10" : "mnist";
    apply_dataset_normalization(out, dataset);
    out.norm_mean = j.value("norm_mean", out.norm_mean);
    out.norm_std = j.value("norm_std", out.norm_std);
    if (j.contains("layers")) {
      for (const auto& l : j.at("layers")) {
        out.layers.push_back({l.at("type").get<std::string>(), l.value("out", std::size_t{0}),
                              l.value("kernel", std::size_t{3})});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid architecture: ") + e.what());
  }
  out.validate();
  spec = std::move(out);
}

void apply_dataset_normalization(ArchitectureSpec& spec, std::string_view dataset) {
  if (dataset == "cifar10") {
    spec.norm_mean = {125.3, 123.0, 113.9};
    spec.norm_std = {63.0, 62.1, 66.7};
  } else {
    const std::size_t c = spec.input_shape.size() == 3 ? spec.input_shape[2] : 1;
    spec.norm_mean.assign(c, 33.3);
    spec.norm_std.assign(c, 78.6);
  }
}

namespace {

struct ConvLayer {
  std::size_t weight, bias, kernel, in, out;
};
struct DepthwiseLayer {
  std::size_t weight, bias, kernel, channels;
};
struct LinearLayer {
  std::size_t weight, bias, in, out;
};
struct ResidualLayer {
  ConvLayer first, second, shortcut;
};
struct ReluLayer {};
struct MaxPoolLayer {};
struct GlobalPoolLayer {};
struct FlattenLayer {};

using Layer = std::variant<ConvLayer, DepthwiseLayer, LinearLayer, ResidualLayer, ReluLayer, MaxPoolLayer,
                           GlobalPoolLayer, FlattenLayer>;

ad::Var conv2d(const ad::Var& x, const ad::Var& w, const ad::Var& b, const ConvLayer& l) {
  const Shape& s = x.shape();
  ad::ConvGeometry geom{s[0], s[1], s[2], s[3], l.kernel, l.kernel, 1, l.kernel / 2};
  const std::size_t rows = geom.rows();
  ad::Var y = ad::matmul(ad::im2col(x, geom), w);
  y = ad::add(y, ad::expand_mid(b, 1, rows, l.out, {rows, l.out}));
  return ad::reshape(y, {s[0], geom.out_h(), geom.out_w(), l.out});
}

ad::Var depthwise2d(const ad::Var& x, const ad::Var& w, const ad::Var& b, const DepthwiseLayer& l) {
  const Shape& s = x.shape();
  ad::ConvGeometry geom{s[0], s[1], s[2], s[3], l.kernel, l.kernel, 1, l.kernel / 2};
  const std::size_t rows = geom.rows(), taps = l.kernel * l.kernel, patch = geom.patch();
  ad::Var prod = ad::mul(ad::im2col(x, geom), ad::expand_mid(w, 1, rows, patch, {rows, patch}));
  ad::Var y = ad::reduce_mid(prod, rows, taps, l.channels, {rows, l.channels});
  y = ad::add(y, ad::expand_mid(b, 1, rows, l.channels, {rows, l.channels}));
  return ad::reshape(y, {s[0], geom.out_h(), geom.out_w(), l.channels});
}

ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b, const LinearLayer& l) {
  const std::size_t rows = x.shape()[0];
  return ad::add(ad::matmul(x, w), ad::expand_mid(b, 1, rows, l.out, {rows, l.out}));
}

ad::Var max_pool2(const ad::Var& x) {
  const Shape& s = x.shape();
  const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max pool on a feature map smaller than 2x2");
  const Tensor& v = x.value();
  auto index = std::make_shared<std::vector<std::int64_t>>(b * oh * ow * c);
  std::size_t at = 0;
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        for (std::size_t k = 0; k < c; ++k) {
          std::size_t best = ((n * h + 2 * i) * w + 2 * j) * c + k;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t cand = ((n * h + 2 * i + dy) * w + 2 * j + dx) * c + k;
              if (v[cand] > v[best]) best = cand;
            }
          }
          (*index)[at++] = static_cast<std::int64_t>(best);
        }
      }
    }
  }
  return ad::gather(x, std::move(index), {b, oh, ow, c});
}

ad::Var global_pool(const ad::Var& x) {
  const Shape& s = x.shape();
  const std::size_t spatial = s[1] * s[2];
  return ad::scale(ad::reduce_mid(x, s[0], spatial, s[3], {s[0], s[3]}), 1.0 / static_cast<double>(spatial));
}

class Builder {
 public:
  Builder(const ArchitectureSpec& spec, std::uint64_t seed, std::vector<NamedParameter>& params)
      : rng_(seed), params_(params), h_(spec.input_shape[0]), w_(spec.input_shape[1]), c_(spec.input_shape[2]) {}

  std::vector<Layer> layers;

  ConvLayer conv(const std::string& name, std::size_t out, std::size_t kernel, bool push = true) {
    if (flat_) throw ConfigError("convolution after flatten in layer " + name);
    const std::size_t fan_in = kernel * kernel * c_;
    ConvLayer l{add_param(name + ".weight", {fan_in, out}, std::sqrt(2.0 / double(fan_in))),
                add_param(name + ".bias", {out}, 0.0), kernel, c_, out};
    if (push) {
      layers.emplace_back(l);
      c_ = out;
    }
    return l;
  }

  void dwconv(const std::string& name, std::size_t kernel) {
    if (flat_) throw ConfigError("convolution after flatten in layer " + name);
    const std::size_t fan_in = kernel * kernel;
    layers.emplace_back(DepthwiseLayer{add_param(name + ".weight", {fan_in * c_}, std::sqrt(2.0 / double(fan_in))),
                                       add_param(name + ".bias", {c_}, 0.0), kernel, c_});
  }

  void residual(const std::string& name, std::size_t out) {
    const std::size_t in = c_;
    ResidualLayer r;
    r.first = conv(name + ".conv1", out, 3, false);
    c_ = out;
    r.second = conv(name + ".conv2", out, 3, false);
    c_ = in;
    r.shortcut = conv(name + ".shortcut", out, 1, false);
    c_ = out;
    layers.emplace_back(r);
  }

  void relu() { layers.emplace_back(ReluLayer{}); }

  void maxpool() {
    if (flat_ || h_ < 2 || w_ < 2) throw ConfigError("max pool needs a feature map of at least 2x2");
    h_ /= 2;
    w_ /= 2;
    layers.emplace_back(MaxPoolLayer{});
  }

  void gap() {
    h_ = w_ = 1;
    flat_ = true;
    layers.emplace_back(GlobalPoolLayer{});
  }

  void flatten() {
    c_ = h_ * w_ * c_;
    h_ = w_ = 1;
    flat_ = true;
    layers.emplace_back(FlattenLayer{});
  }

  void head(HeadKind kind) {
    if (kind == HeadKind::Flatten) {
      flatten();
    } else {
      gap();
    }
  }

  void linear(const std::string& name, std::size_t out, bool last) {
    if (!flat_) flatten();
    const double stdev = last ? std::sqrt(1.0 / double(c_)) : std::sqrt(2.0 / double(c_));
    layers.emplace_back(
        LinearLayer{add_param(name + ".weight", {c_, out}, stdev), add_param(name + ".bias", {out}, 0.0), c_, out});
    c_ = out;
  }

  std::size_t features() const { return flat_ ? c_ : 0; }

 private:
  std::size_t add_param(std::string name, Shape shape, double stdev) {
    Tensor t(std::move(shape), 0.0);
    if (stdev > 0.0) {
      std::normal_distribution<double> dist(0.0, stdev);
      for (double& v : t.data()) v = dist(rng_);
    }
    params_.push_back({std::move(name), ad::Var(std::move(t), true)});
    return params_.size() - 1;
  }

  std::mt19937_64 rng_;
  std::vector<NamedParameter>& params_;
  std::size_t h_, w_, c_;
  bool flat_ = false;
};

}  // namespace

struct Classifier::Layers {
  std::vector<Layer> sequence;
  std::shared_ptr<const std::vector<double>> norm_scale;
  std::shared_ptr<const std::vector<double>> norm_shift;
};

Classifier::Classifier(ArchitectureSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), recorded_calls_(std::make_shared<std::atomic<std::size_t>>(0)) {
  spec_.validate();
  Builder b(spec_, seed, params_);
  const auto stages = spec_.stages();
  switch (spec_.family) {
    case ArchFamily::ResNetSmall:
      for (std::size_t i = 0; i < stages.size(); ++i) {
        b.residual("block" + std::to_string(i + 1), stages[i]);
        b.maxpool();
      }
      b.head(spec_.head);
      b.linear("classifier", spec_.num_classes, true);
      break;
    case ArchFamily::PlainCnn:
      for (std::size_t i = 0; i < stages.size(); ++i) {
        b.conv("conv" + std::to_string(i + 1), stages[i], 3);
        b.relu();
        b.maxpool();
      }
      b.flatten();
      b.linear("classifier", spec_.num_classes, true);
      break;
    case ArchFamily::Depthwise:
      b.conv("stem", stages[0], 3);
      b.relu();
      b.maxpool();
      for (std::size_t i = 1; i < stages.size(); ++i) {
        const std::string name = "block" + std::to_string(i);
        b.dwconv(name + ".depthwise", 3);
        b.relu();
        b.conv(name + ".pointwise", stages[i], 1);
        b.relu();
        b.maxpool();
      }
      b.head(spec_.head);
      b.linear("classifier", spec_.num_classes, true);
      break;
    case ArchFamily::UserDefined: {
      std::size_t idx = 0;
      for (const auto& l : spec_.layers) {
        const std::string name = "layer" + std::to_string(++idx);
        if (l.type == "conv") {
          if (l.out == 0) throw ConfigError(name + ": conv needs 'out'");
          b.conv(name, l.out, l.kernel);
        } else if (l.type == "dwconv") {
          b.dwconv(name, l.kernel);
        } else if (l.type == "residual") {
          if (l.out == 0) throw ConfigError(name + ": residual needs 'out'");
          b.residual(name, l.out);
        } else if (l.type == "relu") {
          b.relu();
        } else if (l.type == "maxpool") {
          b.maxpool();
        } else if (l.type == "gap") {
          b.gap();
        } else if (l.type == "flatten") {
          b.flatten();
        } else if (l.type == "linear") {
          if (l.out == 0) throw ConfigError(name + ": linear needs 'out'");
          b.linear(name, l.out, false);
        } else {
          throw ConfigError("unknown layer type '" + l.type + "'");
        }
      }
      if (b.features() != spec_.num_classes) {
        throw ConfigError("user-defined layers must end in a flat output of num_classes features");
      }
      break;
    }
  }

  auto layers = std::make_shared<Layers>();
  layers->sequence = std::move(b.layers);
  std::vector<double> scale(spec_.norm_std.size()), shift(spec_.norm_std.size());
  for (std::size_t c = 0; c < scale.size(); ++c) {
    scale[c] = 1.0 / spec_.norm_std[c];
    shift[c] = -spec_.norm_mean[c] / spec_.norm_std[c];
  }
  layers->norm_scale = std::make_shared<const std::vector<double>>(std::move(scale));
  layers->norm_shift = std::make_shared<const std::vector<double>>(std::move(shift));
  layers_ = std::move(layers);
}

Classifier::Classifier(const Classifier& other)
    : spec_(other.spec_), layers_(other.layers_), recorded_calls_(std::make_shared<std::atomic<std::size_t>>(0)) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, ad::Var(p.value.value(), true)});
}

Classifier& Classifier::operator=(const Classifier& other) {
  if (this != &other) *this = Classifier(other);
  return *this;
}

Classifier::~Classifier() = default;

ad::Var Classifier::forward(const ad::Var& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), s.begin() + 1)) {
    throw ShapeError("classifier expects images (B, " + shape_string(spec_.input_shape) + "), got " +
                     shape_string(s));
  }
  if (ad::grad_enabled()) recorded_calls_->fetch_add(1, std::memory_order_relaxed);
  auto p = [this](std::size_t i) -> const ad::Var& { return params_[i].value; };
  ad::Var x = ad::affine_channels(images, layers_->norm_scale, layers_->norm_shift);
  for (const Layer& layer : layers_->sequence) {
    x = std::visit(
        [&](const auto& l) -> ad::Var {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            return conv2d(x, p(l.weight), p(l.bias), l);
          } else if constexpr (std::is_same_v<L, DepthwiseLayer>) {
            return depthwise2d(x, p(l.weight), p(l.bias), l);
          } else if constexpr (std::is_same_v<L, LinearLayer>) {
            return linear(x, p(l.weight), p(l.bias), l);
          } else if constexpr (std::is_same_v<L, ResidualLayer>) {
            ad::Var h = ad::relu(conv2d(x, p(l.first.weight), p(l.first.bias), l.first));
            h = conv2d(h, p(l.second.weight), p(l.second.bias), l.second);
            return ad::relu(ad::add(h, conv2d(x, p(l.shortcut.weight), p(l.shortcut.bias), l.shortcut)));
          } else if constexpr (std::is_same_v<L, ReluLayer>) {
            return ad::relu(x);
          } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
            return max_pool2(x);
          } else if constexpr (std::is_same_v<L, GlobalPoolLayer>) {
            return global_pool(x);
          } else {
            const Shape& xs = x.shape();
            return ad::reshape(x, {xs[0], x.size() / xs[0]});
          }
        },
        layer);
  }
  return x;
}

std::vector<ad::Var> Classifier::parameters() const {
  std::vector<ad::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Tensor Classifier::flat_parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.value.value().values().begin(), p.value.value().values().end());
  const std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

void Classifier::set_flat_parameters(const Tensor& flat) {
  if (flat.size() != parameter_count()) throw ShapeError("flat parameter vector has the wrong length");
  std::size_t at = 0;
  for (auto& p : params_) {
    auto& t = p.value.mutable_value();
    std::copy_n(flat.ptr() + at, t.size(), t.ptr());
    at += t.size();
  }
}

Tensor Classifier::logits(const Tensor& images, std::size_t chunk) const {
  ad::NoGradGuard no_grad;
  const std::size_t n = images.dim(0);
  if (n <= chunk) return forward(ad::Var(images)).value();
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < n; i += chunk) {
    parts.push_back(forward(ad::Var(images.slice_rows(i, std::min(n, i + chunk)))).value());
  }
  return concat_rows(parts);
}

std::vector<int> Classifier::predict(const Tensor& images) const { return argmax_rows(logits(images)); }

double Classifier::accuracy(const ExampleBatch& batch) const {
  if (batch.size() == 0) return 0.0;
  const auto pred = predict(batch.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

std::size_t Classifier::recorded_forward_calls() const noexcept { return recorded_calls_->load(); }

Classifier build_model(const ArchitectureSpec& spec, std::uint64_t seed) { return Classifier(spec, seed); }

}  // namespace mta
