#pragma once

// Supervised training of zoo classifiers with plain SGD and L2 weight decay.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "mta/model.hpp"

namespace mta {

struct AdversarialRecipe {
  double epsilon = 3.0;  // FGSM budget, pixel units
};

struct TrainRecipe {
  double learning_rate = 0.01;
  double weight_decay = 1e-5;
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  std::optional<AdversarialRecipe> adversarial;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainRecipe& r);
void from_json(const nlohmann::json& j, TrainRecipe& r);

struct TrainResult {
  std::vector<double> epoch_loss;      // mean training loss per epoch
  std::vector<double> epoch_accuracy;  // held-out accuracy after each epoch
  double final_accuracy = 0.0;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double accuracy)>;

/// Trains `model` in place for recipe.epochs. Throws NumericError naming the
/// last finite epoch if the loss diverges.
TrainResult train_classifier(Classifier& model, const ExampleBatch& train, const ExampleBatch& test,
                             const TrainRecipe& recipe, const EpochCallback& on_epoch = {});

/// One FGSM example per training image, crafted on `base`.
ExampleBatch fgsm_examples(const Classifier& base, const ExampleBatch& train, double epsilon);

/// Starts from a copy of `base` and trains on the clean images plus one FGSM
/// example per image crafted on `base` with recipe.adversarial->epsilon.
TrainResult adversarial_train(Classifier& model, const Classifier& base, const ExampleBatch& train,
                              const ExampleBatch& test, const TrainRecipe& recipe,
                              const EpochCallback& on_epoch = {});

}  // namespace mta
