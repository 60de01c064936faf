#pragma once

// Tiny differentiable models with hand-checkable behaviour.

#include <random>

#include "mta/attack.hpp"
#include "test_util.hpp"

namespace mta::testing {

/// logits = flatten(x) * W, optionally through an atan hidden layer.
class ToyModel final : public DifferentiableModel {
 public:
  ToyModel(Shape input, Tensor w1, Tensor w2 = {})
      : input_(std::move(input)), w1_(std::move(w1), true), w2_(std::move(w2), true),
        hidden_(!w2_.value().empty()) {}

  ad::Var forward(const ad::Var& images) const override {
    const std::size_t b = images.shape().at(0);
    ad::Var flat = ad::reshape(images, {b, images.size() / b});
    ad::Var h = ad::matmul(flat, w1_);
    if (!hidden_) return h;
    return ad::matmul(ad::atan(h), w2_);
  }
  std::size_t num_classes() const override { return (hidden_ ? w2_ : w1_).shape().at(1); }
  Shape input_shape() const override { return input_; }

  std::vector<ad::Var> parameters() const {
    return hidden_ ? std::vector<ad::Var>{w1_, w2_} : std::vector<ad::Var>{w1_};
  }

 private:
  Shape input_;
  ad::Var w1_, w2_;
  bool hidden_;
};

/// One-pixel, two-class model whose loss for label 0 rises with the pixel.
inline ToyModel one_pixel_model() { return ToyModel({1, 1, 1}, Tensor({1, 2}, {-0.01, 0.01})); }

inline ExampleBatch one_pixel_batch(std::vector<double> pixels) {
  const std::size_t n = pixels.size();
  return ExampleBatch{Tensor({n, 1, 1, 1}, std::move(pixels)), std::vector<int>(n, 0), std::nullopt};
}

}  // namespace mta::testing
