#pragma once

// Small image classifiers built from an architecture description. Inputs are
// raw pixels; each classifier applies its own per-channel normalization.

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mta/attack.hpp"
#include "mta/autodiff.hpp"

namespace mta {

enum class ArchFamily { ResNetSmall, PlainCnn, Depthwise, UserDefined };

std::string_view family_name(ArchFamily family);
ArchFamily parse_family(std::string_view name);

/// One entry of a user-defined layer list.
struct LayerSpec {
  std::string type;         // conv, dwconv, relu, maxpool, gap, flatten, linear, residual
  std::size_t out = 0;      // output channels / features
  std::size_t kernel = 3;   // conv kernels
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Classifier head of the residual and depthwise families. The plain family
/// always flattens.
enum class HeadKind { GlobalAverage, Flatten };

std::string_view head_name(HeadKind head);
HeadKind parse_head(std::string_view name);

struct ArchitectureSpec {
  ArchFamily family = ArchFamily::PlainCnn;
  HeadKind head = HeadKind::GlobalAverage;
  std::vector<std::size_t> block_widths{16, 32};
  /// Stages taken from block_widths; 0 means all of them.
  std::size_t num_blocks = 0;
  std::size_t num_classes = 10;
  Shape input_shape{28, 28, 1};  // (H, W, C)
  std::vector<double> norm_mean{33.3};  // pixel units, per channel
  std::vector<double> norm_std{78.6};
  std::vector<LayerSpec> layers;  // user-defined family only

  /// Four residual stages with max-pool downsampling, global average pooling
  /// and a linear classifier; widths default to 64, 128, 256, 512.
  static ArchitectureSpec resnet13(Shape input_shape = {32, 32, 3}, std::size_t num_classes = 10,
                                   std::vector<std::size_t> widths = {64, 128, 256, 512});

  void validate() const;
  std::vector<std::size_t> stages() const;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& spec);
void from_json(const nlohmann::json& j, ArchitectureSpec& spec);

/// Default per-channel normalization for a dataset id, in pixel units.
void apply_dataset_normalization(ArchitectureSpec& spec, std::string_view dataset);

struct NamedParameter {
  std::string name;
  ad::Var value;
};

class Classifier final : public DifferentiableModel {
 public:
  /// Builds the network described by `spec` with weights drawn from `seed`.
  Classifier(ArchitectureSpec spec, std::uint64_t seed);

  // Copies own independent parameter storage.
  Classifier(const Classifier& other);
  Classifier& operator=(const Classifier& other);
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;
  ~Classifier() override;

  ad::Var forward(const ad::Var& images) const override;
  std::size_t num_classes() const override { return spec_.num_classes; }
  Shape input_shape() const override { return spec_.input_shape; }

  const ArchitectureSpec& spec() const noexcept { return spec_; }

  const std::vector<NamedParameter>& named_parameters() const noexcept { return params_; }
  std::vector<ad::Var> parameters() const;
  std::size_t parameter_count() const;

  Tensor flat_parameters() const;
  void set_flat_parameters(const Tensor& flat);

  /// Logits without recording a graph, evaluated in chunks of `chunk` images.
  Tensor logits(const Tensor& images, std::size_t chunk = 256) const;
  std::vector<int> predict(const Tensor& images) const;
  double accuracy(const ExampleBatch& batch) const;

  /// Number of forward calls made while gradients were being recorded.
  /// The evaluator asserts this stays at zero for black-box targets.
  std::size_t recorded_forward_calls() const noexcept;

 private:
  struct Layers;
  ArchitectureSpec spec_;
  std::vector<NamedParameter> params_;
  std::shared_ptr<const Layers> layers_;
  std::shared_ptr<std::atomic<std::size_t>> recorded_calls_;
};

/// build_model: identical spec and seed give identical parameters.
Classifier build_model(const ArchitectureSpec& spec, std::uint64_t seed);

}  // namespace mta
