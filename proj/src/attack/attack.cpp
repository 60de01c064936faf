#include "mta/attack.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "mta/errors.hpp"
#include "mta/kernels.hpp"

namespace mta {

ExampleBatch ExampleBatch::slice(std::size_t begin, std::size_t end) const {
  ExampleBatch out;
  out.images = images.slice_rows(begin, end);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
  if (target_labels) {
    out.target_labels.emplace(target_labels->begin() + static_cast<std::ptrdiff_t>(begin),
                              target_labels->begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

ExampleBatch ExampleBatch::select(std::span<const std::size_t> rows) const {
  ExampleBatch out;
  out.images = images.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(r));
  if (target_labels) {
    out.target_labels.emplace();
    for (auto r : rows) out.target_labels->push_back(target_labels->at(r));
  }
  return out;
}

void ExampleBatch::validate(std::size_t num_classes, double pixel_lo, double pixel_hi) const {
  if (images.rank() != 4) throw ConfigError("images must be (batch, height, width, channels)");
  if (images.dim(0) != labels.size()) throw ConfigError("image count differs from label count");
  for (double v : images.data()) {
    if (!(v >= pixel_lo && v <= pixel_hi)) {
      throw ConfigError("pixel value " + std::to_string(v) + " outside [" + std::to_string(pixel_lo) + ", " +
                        std::to_string(pixel_hi) + "]");
    }
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ConfigError("label out of range: " + std::to_string(y));
  }
  if (target_labels) {
    if (target_labels->size() != labels.size()) throw ConfigError("target label count differs from label count");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int t = (*target_labels)[i];
      if (t < 0 || static_cast<std::size_t>(t) >= num_classes) throw ConfigError("target label out of range");
      if (t == labels[i]) throw ConfigError("target label equals true label at index " + std::to_string(i));
    }
  }
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
  if (!(epsilon_c >= 0.0)) throw ConfigError("epsilon_c must be >= 0");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (!(gamma1 >= 0.0) || !(gamma2 >= 0.0)) throw ConfigError("gamma1 and gamma2 must be >= 0");
  if (!(di_probability >= 0.0 && di_probability <= 1.0)) throw ConfigError("di_probability must lie in [0, 1]");
  if (!(pixel_hi > pixel_lo)) throw ConfigError("pixel range is empty");
  if (epsilon > pixel_hi - pixel_lo) throw ConfigError("epsilon exceeds the pixel range");
}

LossValues cross_entropy(const Tensor& logits, std::span<const int> labels) {
  ad::NoGradGuard no_grad;
  ad::Var loss = ad::cross_entropy(ad::Var(logits), labels);
  LossValues out;
  out.per_example = loss.value().values();
  double s = 0.0;
  for (double v : out.per_example) s += v;
  out.mean = out.per_example.empty() ? 0.0 : s / static_cast<double>(out.per_example.size());
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected (B, K)");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

namespace {

void check_input(const DifferentiableModel& model, const Shape& images) {
  const Shape expected = model.input_shape();
  if (images.size() != 4 || !std::equal(expected.begin(), expected.end(), images.begin() + 1)) {
    throw ShapeError("batch of shape " + shape_string(images) + " does not match model input " +
                     shape_string(expected));
  }
}

std::span<const int> attack_labels(const ExampleBatch& batch, bool targeted) {
  if (!targeted) return batch.labels;
  if (!batch.target_labels) throw ConfigError("targeted attack requires target labels");
  return *batch.target_labels;
}

struct EnsembleParts {
  ad::Var g1, gt, gs;
};

// Examples whose gradient L1 norm is below this are handled as zero-gradient
// examples: the normalizations would otherwise divide by values whose
// squares underflow, turning second-order terms into inf * 0.
constexpr double kNegligibleGradient = 1e-100;

EnsembleParts ensemble_parts(const ad::Var& g_raw) {
  const Shape& shape = g_raw.shape();
  const std::size_t rows = shape.at(0);
  const std::size_t per_example = g_raw.size() / rows;
  ad::Var g = g_raw;
  {
    const Tensor& gv = g_raw.value();
    const auto& k = kernels::active();
    auto keep = std::make_shared<Tensor>(shape, 1.0);
    bool any_dropped = false;
    for (std::size_t e = 0; e < rows; ++e) {
      if (k.abs_sum(per_example, gv.ptr() + e * per_example) < kNegligibleGradient) {
        std::fill_n(keep->ptr() + e * per_example, per_example, 0.0);
        any_dropped = true;
      }
    }
    if (any_dropped) g = ad::mul_const(g_raw, std::move(keep));
  }
  ad::Var abs_sum = ad::sum_per_row(ad::abs(g));
  ad::Var sum_safe = ad::replace_zero(abs_sum, 1.0);
  ad::Var mean_safe = ad::replace_zero(ad::scale(abs_sum, 1.0 / static_cast<double>(per_example)), 1.0);
  EnsembleParts p;
  p.g1 = ad::div(g, ad::expand_per_row(sum_safe, shape));
  p.gt = ad::scale(ad::atan(ad::div(g, ad::expand_per_row(mean_safe, shape))), 2.0 / std::numbers::pi);
  p.gs = ad::sign(g);
  return p;
}

// x <- clip(x + step * sign(direction))
void sign_step(Tensor& x, const Tensor& direction, double step, double lo, double hi) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = double((direction[i] > 0) - (direction[i] < 0));
    x[i] = std::min(hi, std::max(lo, x[i] + step * s));
  }
}

Tensor gradient_at(const DifferentiableModel& model, const Tensor& images, std::span<const int> labels,
                   bool targeted) {
  ad::Var x(images, true);
  return input_gradient(model, x, labels, targeted, false).value();
}

ExampleBatch with_images(const ExampleBatch& batch, Tensor images) {
  ExampleBatch out = batch;
  out.images = std::move(images);
  return out;
}

// Nearest-neighbour resize to a random side, zero-pad at a random offset,
// and sample back to the native grid, as one gather map.
ad::IndexMap diverse_input_map(const Shape& shape, std::size_t resize_max, std::mt19937_64& rng) {
  const std::size_t b = shape[0], h = shape[1], w = shape[2], c = shape[3];
  std::uniform_int_distribution<std::size_t> side_dist(h, resize_max);
  const std::size_t side = side_dist(rng);
  std::uniform_int_distribution<std::size_t> offset_dist(0, resize_max - side);
  const std::size_t off_y = offset_dist(rng);
  const std::size_t off_x = offset_dist(rng);

  auto map = std::make_shared<std::vector<std::int64_t>>(b * h * w * c, -1);
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t py = i * resize_max / h;
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t px = j * resize_max / w;
      if (py < off_y || py >= off_y + side || px < off_x || px >= off_x + side) continue;
      const std::size_t sy = (py - off_y) * h / side;
      const std::size_t sx = (px - off_x) * w / side;
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t k = 0; k < c; ++k) {
          (*map)[((n * h + i) * w + j) * c + k] = static_cast<std::int64_t>(((n * h + sy) * w + sx) * c + k);
        }
      }
    }
  }
  return map;
}

}  // namespace

ad::Var input_gradient(const DifferentiableModel& model, const ad::Var& images, std::span<const int> labels,
                       bool targeted, bool create_graph) {
  check_input(model, images.shape());
  ad::EnableGradGuard enable;
  ad::Var logits = model.forward(images);
  ad::Var loss = ad::sum_all(ad::cross_entropy(logits, labels));
  if (targeted) loss = ad::neg(loss);
  const ad::Var inputs[] = {images};
  return ad::grad(loss, inputs, create_graph).front();
}

Tensor input_gradient(const DifferentiableModel& model, const ExampleBatch& batch, bool targeted) {
  return gradient_at(model, batch.images, attack_labels(batch, targeted), targeted);
}

GradientEnsemble gradient_ensemble(const Tensor& g, double gamma1, double gamma2) {
  if (!g.all_finite()) throw NumericError("gradient_ensemble: non-finite gradient");
  if (g.rank() == 0 || g.empty()) throw ShapeError("gradient_ensemble: empty gradient");
  ad::NoGradGuard no_grad;
  const ad::Var gv(g);
  EnsembleParts p = ensemble_parts(gv);
  GradientEnsemble out;
  out.g = g;
  out.g1 = p.g1.value();
  out.gt = p.gt.value();
  out.gs = p.gs.value();
  out.g_ens = ad::add(ad::add(p.g1, ad::scale(p.gt, gamma1)), ad::scale(p.gs, gamma2)).value();
  return out;
}

ad::Var ensemble_direction(const ad::Var& g, double gamma1, double gamma2, double g1_weight) {
  EnsembleParts p = ensemble_parts(g);
  return ad::add(ad::add(ad::scale(p.g1, g1_weight), ad::scale(p.gt, gamma1)), ad::scale(p.gs, gamma2));
}

ExampleBatch fgsm(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config) {
  config.validate();
  const auto labels = attack_labels(batch, config.targeted);
  Tensor x = batch.images;
  sign_step(x, gradient_at(model, x, labels, config.targeted), config.epsilon, config.pixel_lo, config.pixel_hi);
  return with_images(batch, std::move(x));
}

ExampleBatch pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config) {
  config.validate();
  const auto labels = attack_labels(batch, config.targeted);
  const double step = config.epsilon / static_cast<double>(config.steps);
  Tensor x = batch.images;
  for (std::size_t k = 0; k < config.steps; ++k) {
    sign_step(x, gradient_at(model, x, labels, config.targeted), step, config.pixel_lo, config.pixel_hi);
  }
  return with_images(batch, std::move(x));
}

ExampleBatch momentum_pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config) {
  config.validate();
  const auto labels = attack_labels(batch, config.targeted);
  const double step = config.epsilon / static_cast<double>(config.steps);
  Tensor x = batch.images;
  Tensor momentum(x.shape(), 0.0);
  const std::size_t n = x.dim(0), per = x.row_size();
  for (std::size_t k = 0; k < config.steps; ++k) {
    const Tensor g = gradient_at(model, x, labels, config.targeted);
    for (std::size_t e = 0; e < n; ++e) {
      double l1 = 0.0;
      for (std::size_t i = 0; i < per; ++i) l1 += std::abs(g[e * per + i]);
      for (std::size_t i = 0; i < per; ++i) {
        double& m = momentum[e * per + i];
        m = config.momentum_mu * m + (l1 > 0.0 ? g[e * per + i] / l1 : 0.0);
      }
    }
    sign_step(x, momentum, step, config.pixel_lo, config.pixel_hi);
  }
  return with_images(batch, std::move(x));
}

ExampleBatch diverse_input_pgd(const DifferentiableModel& model, const ExampleBatch& batch,
                               const AttackConfig& config, std::uint64_t seed) {
  config.validate();
  const Shape& shape = batch.images.shape();
  check_input(model, shape);
  if (shape[1] != shape[2]) throw ConfigError("diverse-input attack needs square images");
  const std::size_t native = shape[1];
  const std::size_t resize_max =
      config.di_resize_max == 0 ? native + std::max<std::size_t>(1, native / 10) : config.di_resize_max;
  if (resize_max < native) {
    throw ConfigError("di_resize_max " + std::to_string(resize_max) + " is below the native side " +
                      std::to_string(native));
  }
  const auto labels = attack_labels(batch, config.targeted);
  const double step = config.epsilon / static_cast<double>(config.steps);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Tensor x = batch.images;
  for (std::size_t k = 0; k < config.steps; ++k) {
    Tensor g;
    if (coin(rng) < config.di_probability) {
      auto map = diverse_input_map(shape, resize_max, rng);
      ad::EnableGradGuard enable;
      ad::Var xv(x, true);
      ad::Var transformed = ad::gather(xv, map, shape);
      ad::Var loss = ad::sum_all(ad::cross_entropy(model.forward(transformed), labels));
      if (config.targeted) loss = ad::neg(loss);
      const ad::Var inputs[] = {xv};
      g = ad::grad(loss, inputs).front().value();
    } else {
      g = gradient_at(model, x, labels, config.targeted);
    }
    sign_step(x, g, step, config.pixel_lo, config.pixel_hi);
  }
  return with_images(batch, std::move(x));
}

ad::Var customized_pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config,
                       bool differentiable) {
  config.validate();
  const auto labels = attack_labels(batch, config.targeted);
  const double step = config.epsilon_c / static_cast<double>(config.steps);
  ad::EnableGradGuard enable;
  ad::Var x(batch.images, differentiable);
  for (std::size_t k = 0; k < config.steps; ++k) {
    ad::Var xin = differentiable ? x : ad::Var(x.value(), true);
    ad::Var g = input_gradient(model, xin, labels, config.targeted, differentiable);
    if (!g.value().all_finite()) {
      throw NumericError("customized_pgd: non-finite input gradient at step " + std::to_string(k));
    }
    ad::Var direction = ensemble_direction(g, config.gamma1, config.gamma2, config.g1_weight);
    x = ad::clip(ad::add(xin, ad::scale(direction, step)), config.pixel_lo, config.pixel_hi);
    if (!x.value().all_finite()) {
      throw NumericError("customized_pgd: non-finite adversarial images at step " + std::to_string(k));
    }
    if (!differentiable) x = x.detach();
  }
  return x;
}

AttackMethod parse_attack_method(std::string_view name) {
  if (name == "fgsm") return AttackMethod::Fgsm;
  if (name == "pgd") return AttackMethod::Pgd;
  if (name == "mpgd" || name == "m-pgd") return AttackMethod::MomentumPgd;
  if (name == "dipgd" || name == "di-pgd") return AttackMethod::DiversePgd;
  if (name == "cpgd" || name == "customized-pgd") return AttackMethod::CustomizedPgd;
  throw ConfigError("unknown attack method '" + std::string(name) + "'");
}

std::string_view attack_method_name(AttackMethod method) {
  switch (method) {
    case AttackMethod::Fgsm: return "fgsm";
    case AttackMethod::Pgd: return "pgd";
    case AttackMethod::MomentumPgd: return "mpgd";
    case AttackMethod::DiversePgd: return "dipgd";
    case AttackMethod::CustomizedPgd: return "cpgd";
  }
  return "unknown";
}

ExampleBatch run_attack(AttackMethod method, const DifferentiableModel& model, const ExampleBatch& batch,
                        const AttackConfig& config, std::uint64_t seed) {
  switch (method) {
    case AttackMethod::Fgsm: return fgsm(model, batch, config);
    case AttackMethod::Pgd: return pgd(model, batch, config);
    case AttackMethod::MomentumPgd: return momentum_pgd(model, batch, config);
    case AttackMethod::DiversePgd: return diverse_input_pgd(model, batch, config, seed);
    case AttackMethod::CustomizedPgd: return with_images(batch, customized_pgd(model, batch, config, false).value());
  }
  throw ConfigError("unknown attack method");
}

std::vector<double> linf_per_example(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("linf_per_example: shape mismatch");
  const std::size_t n = a.dim(0), per = a.row_size();
  std::vector<double> out(n, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t i = 0; i < per; ++i) out[e] = std::max(out[e], std::abs(a[e * per + i] - b[e * per + i]));
  }
  return out;
}

}  // namespace mta
