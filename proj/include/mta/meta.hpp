#pragma once

// Meta-surrogate training: unroll the customized PGD on the surrogate being
// trained, score the result on frozen source models, and ascend the summed
// source losses into the surrogate's weights.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mta/evaluator.hpp"
#include "mta/model.hpp"

namespace mta {

struct MetaTrainConfig {
  double alpha = 0.001;
  std::size_t batch_size = 64;
  std::size_t inner_steps = 7;  // T_t
  std::size_t epochs = 60;
  double epsilon_c_init = 1600.0;
  double epsilon_c_decay = 0.9;
  std::size_t epsilon_c_decay_every = 4000;
  double gamma1 = 0.01;
  double gamma2 = 0.01;
  /// Ablation knob: weight of the sum-normalized ensemble term.
  double g1_weight = 1.0;
  /// Global L2 norm the meta-gradient is clipped to; 0 disables clipping.
  double grad_clip = 10.0;
  std::size_t eval_every = 250;
  std::uint64_t seed = 0;
  ArchitectureSpec msm_arch;
  std::vector<std::string> source_checkpoints;

  // Snapshot evaluation on held-out targets during training.
  double eval_epsilon = 15.0;
  std::size_t eval_steps = 10;
  std::size_t eval_examples = 200;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetaTrainConfig& c);
void from_json(const nlohmann::json& j, MetaTrainConfig& c);

/// epsilon_c_init * decay^floor(iteration / decay_every)
double epsilon_c_schedule(std::size_t iteration, const MetaTrainConfig& config);

struct MetaObjective {
  double value = 0.0;               // J, summed over sources
  std::vector<double> source_loss;  // mean cross entropy per source
  std::vector<Tensor> gradient;     // dJ/dtheta, one per msm parameter
};

/// J = sum_i mean CE(F_i(x_adv), y) with x_adv the unrolled customized PGD on
/// `msm`, and its gradient with respect to msm's parameters. NumericError
/// naming the source index when a source loss is not finite.
MetaObjective meta_objective(const Classifier& msm, std::span<const Classifier* const> sources,
                             const ExampleBatch& batch, double epsilon_c, const MetaTrainConfig& config);

struct MetaStepMetrics {
  std::size_t iteration = 0;
  double epsilon_c = 0.0;
  double loss_sum = 0.0;
  std::vector<double> source_loss;
  double grad_norm = 0.0;  // before clipping
};

/// theta <- theta + alpha * clip(dJ/dtheta). Sources are only read.
MetaStepMetrics meta_step(Classifier& msm, std::span<const Classifier* const> sources, const ExampleBatch& batch,
                          std::size_t iteration, const MetaTrainConfig& config);

struct MetaLogRecord {
  std::size_t iteration = 0;
  double epsilon_c = 0.0;
  double loss_sum = 0.0;
  std::vector<double> source_loss;
  /// Present on snapshot iterations: success rate per target.
  std::optional<std::vector<double>> eval_success;
};

struct MetaTrainLog {
  std::vector<std::string> source_ids;
  std::vector<std::string> target_ids;
  std::vector<MetaLogRecord> records;

  /// "# config_hash=<hash>" line, then iteration,epsilon_c,loss_sum,
  /// loss_<source>...,success_<target>...; snapshot columns are empty on
  /// other rows.
  std::string to_csv(const std::string& config_hash) const;
  static MetaTrainLog from_csv(std::string_view text, const std::string& source = "<memory>");

  /// Snapshot rows only.
  std::vector<const MetaLogRecord*> snapshots() const;
};

struct MetaSources {
  std::vector<std::string> ids;
  std::vector<const Classifier*> models;
};

/// Held-out targets for snapshots with their already-filtered evaluation sets.
struct MetaTargets {
  std::vector<Target> targets;
  std::vector<ExampleBatch> eval_sets;
};

using MetaStepCallback = std::function<void(const MetaLogRecord&)>;

struct MetaTrainResult {
  Classifier msm;
  MetaTrainLog log;
};

/// epochs x ceil(train / batch_size) meta steps. Snapshots run after the
/// first step, every eval_every steps and after the last step. A failing
/// step raises with its iteration index; `last_stable` then holds the
/// weights from before that step.
MetaTrainResult train_msm(const MetaTrainConfig& config, const MetaSources& sources, const ExampleBatch& train,
                          const MetaTargets& targets, const MetaStepCallback& on_step = {},
                          Classifier* last_stable = nullptr);

/// Per-target PGD transfer success of `msm` on the snapshot sets.
std::vector<double> snapshot_success(const Classifier& msm, const MetaTargets& targets, const MetaTrainConfig& config);

}  // namespace mta
