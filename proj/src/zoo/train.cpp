#include "mta/train.hpp"

#include <cmath>
#include <string>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/kernels.hpp"

namespace mta {

void TrainRecipe::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (adversarial && !(adversarial->epsilon >= 0.0 && adversarial->epsilon <= 255.0)) {
    throw ConfigError("adversarial epsilon must lie in [0, 255]");
  }
}

void to_json(nlohmann::json& j, const TrainRecipe& r) {
  j = {{"learning_rate", r.learning_rate}, {"weight_decay", r.weight_decay}, {"batch_size", r.batch_size},
       {"epochs", r.epochs}, {"seed", r.seed}};
  if (r.adversarial) j["adversarial"] = {{"attack", "fgsm"}, {"epsilon", r.adversarial->epsilon}};
}

void from_json(const nlohmann::json& j, TrainRecipe& r) {
  try {
    r.learning_rate = j.value("learning_rate", r.learning_rate);
    r.weight_decay = j.value("weight_decay", r.weight_decay);
    r.batch_size = j.value("batch_size", r.batch_size);
    r.epochs = j.value("epochs", r.epochs);
    r.seed = j.value("seed", r.seed);
    if (j.contains("adversarial") && !j["adversarial"].is_null()) {
      const auto& a = j["adversarial"];
      if (a.value("attack", std::string("fgsm")) != "fgsm") throw ConfigError("adversarial attack must be fgsm");
      r.adversarial = AdversarialRecipe{a.value("epsilon", 3.0)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train recipe: ") + e.what());
  }
}

TrainResult train_classifier(Classifier& model, const ExampleBatch& train, const ExampleBatch& test,
                             const TrainRecipe& recipe, const EpochCallback& on_epoch) {
  recipe.validate();
  const auto& k = kernels::active();
  const std::vector<ad::Var> params = model.parameters();
  BatchStream stream(train, recipe.batch_size, recipe.seed);
  TrainResult result;
  ExampleBatch batch;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    while (stream.next(batch)) {
      ad::EnableGradGuard enable;
      const ad::Var logits = model.forward(ad::Var(batch.images));
      const ad::Var loss = ad::mean_all(ad::cross_entropy(logits, batch.labels));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("training diverged in epoch " + std::to_string(epoch) + "; last finite epoch " +
                           (epoch == 0 ? std::string("none") : std::to_string(epoch - 1)));
      }
      const auto grads = ad::grad(loss, params);
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& w = params[i].mutable_value();
        const Tensor& g = grads[i].value();
        // w <- w - lr * (g + wd * w)
        k.scale(w.size(), 1.0 - recipe.learning_rate * recipe.weight_decay, w.ptr(), w.ptr());
        k.axpy(w.size(), -recipe.learning_rate, g.ptr(), w.ptr());
      }
      loss_sum += value * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double mean_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    const double acc = test.size() ? model.accuracy(test) : 0.0;
    result.epoch_loss.push_back(mean_loss);
    result.epoch_accuracy.push_back(acc);
    if (on_epoch) on_epoch(epoch, mean_loss, acc);
  }
  result.final_accuracy = test.size() ? model.accuracy(test) : 0.0;
  return result;
}

ExampleBatch fgsm_examples(const Classifier& base, const ExampleBatch& train, double epsilon) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  constexpr std::size_t kChunk = 256;
  std::vector<Tensor> parts;
  for (std::size_t begin = 0; begin < train.size(); begin += kChunk) {
    const std::size_t end = std::min(train.size(), begin + kChunk);
    parts.push_back(fgsm(base, train.slice(begin, end), cfg).images);
  }
  ExampleBatch out;
  out.images = parts.empty() ? Tensor(train.images.shape()) : concat_rows(parts);
  out.labels = train.labels;
  return out;
}

TrainResult adversarial_train(Classifier& model, const Classifier& base, const ExampleBatch& train,
                              const ExampleBatch& test, const TrainRecipe& recipe, const EpochCallback& on_epoch) {
  recipe.validate();
  if (!recipe.adversarial) throw ConfigError("adversarial_train needs recipe.adversarial");
  const ExampleBatch adv = fgsm_examples(base, train, recipe.adversarial->epsilon);
  ExampleBatch mixed;
  const Tensor parts[] = {train.images, adv.images};
  mixed.images = concat_rows(parts);
  mixed.labels = train.labels;
  mixed.labels.insert(mixed.labels.end(), adv.labels.begin(), adv.labels.end());
  model = base;
  return train_classifier(model, mixed, test, recipe, on_epoch);
}

}  // namespace mta
