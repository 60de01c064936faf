#pragma once

// Attack mathematics in raw pixel space: cross entropy, input gradients, the
// gradient ensemble used by the customized (differentiable) PGD, and the
// sign-based FGSM / PGD / momentum PGD / diverse-input PGD loops.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mta/autodiff.hpp"
#include "mta/tensor.hpp"

namespace mta {

/// Anything that maps raw-pixel images (B, H, W, C) to logits (B, K).
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;
  virtual ad::Var forward(const ad::Var& images) const = 0;
  virtual std::size_t num_classes() const = 0;
  /// Expected (H, W, C) of one image.
  virtual Shape input_shape() const = 0;
};

struct ExampleBatch {
  Tensor images;  // (B, H, W, C), pixel units
  std::vector<int> labels;
  std::optional<std::vector<int>> target_labels;

  std::size_t size() const noexcept { return labels.size(); }
  ExampleBatch slice(std::size_t begin, std::size_t end) const;
  ExampleBatch select(std::span<const std::size_t> rows) const;
  /// Throws ConfigError when pixels, labels or target labels break their ranges.
  void validate(std::size_t num_classes, double pixel_lo = 0.0, double pixel_hi = 255.0) const;
};

struct AttackConfig {
  double epsilon = 15.0;      // L-inf budget of the sign attacks
  double epsilon_c = 1600.0;  // magnitude of the customized PGD update
  std::size_t steps = 10;
  double gamma1 = 0.01;
  double gamma2 = 0.01;
  /// Weight of the sum-normalized term of the ensemble. Always 1 except in
  /// ablations that isolate the other two terms.
  double g1_weight = 1.0;
  double momentum_mu = 1.0;
  double di_probability = 0.8;
  /// Largest side of the random resize; 0 picks native + max(1, native / 10).
  std::size_t di_resize_max = 0;
  bool targeted = false;
  double pixel_lo = 0.0;
  double pixel_hi = 255.0;

  void validate() const;
};

struct LossValues {
  std::vector<double> per_example;
  double mean = 0.0;
};

LossValues cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Index of the largest logit per row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

/// Gradient of the summed per-example loss with respect to `images`. In
/// targeted mode the loss toward `labels` (the target classes) is descended,
/// so the result is the negated gradient. With create_graph the result stays
/// differentiable with respect to the model weights and to `images`.
ad::Var input_gradient(const DifferentiableModel& model, const ad::Var& images, std::span<const int> labels,
                       bool targeted, bool create_graph);

/// Tensor convenience form; uses batch.target_labels when targeted.
Tensor input_gradient(const DifferentiableModel& model, const ExampleBatch& batch, bool targeted);

struct GradientEnsemble {
  Tensor g;      // raw gradient
  Tensor g1;     // g / sum(|g|)
  Tensor gt;     // (2 / pi) * atan(g / mean(|g|))
  Tensor gs;     // sign(g)
  Tensor g_ens;  // g1 + gamma1 * gt + gamma2 * gs
};

/// Reductions run over each example's full gradient. Examples whose
/// gradient is zero (L1 norm below 1e-100) get all-zero maps.
GradientEnsemble gradient_ensemble(const Tensor& g, double gamma1, double gamma2);

/// Differentiable ensemble direction g1_weight * g1 + gamma1 * gt + gamma2 * gs.
ad::Var ensemble_direction(const ad::Var& g, double gamma1, double gamma2, double g1_weight = 1.0);

ExampleBatch fgsm(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config);
ExampleBatch pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config);
ExampleBatch momentum_pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config);
ExampleBatch diverse_input_pgd(const DifferentiableModel& model, const ExampleBatch& batch,
                               const AttackConfig& config, std::uint64_t seed);

/// Unrolled customized PGD. With differentiable set, the returned images are
/// connected to the model weights through every step.
ad::Var customized_pgd(const DifferentiableModel& model, const ExampleBatch& batch, const AttackConfig& config,
                       bool differentiable);

enum class AttackMethod { Fgsm, Pgd, MomentumPgd, DiversePgd, CustomizedPgd };

AttackMethod parse_attack_method(std::string_view name);
std::string_view attack_method_name(AttackMethod method);

/// Dispatches to the named attack; seed is used by the diverse-input variant only.
ExampleBatch run_attack(AttackMethod method, const DifferentiableModel& model, const ExampleBatch& batch,
                        const AttackConfig& config, std::uint64_t seed = 0);

/// Per-example L-inf distance between two image batches.
std::vector<double> linf_per_example(const Tensor& a, const Tensor& b);

}  // namespace mta
