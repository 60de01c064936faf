#pragma once

// Transfer evaluation: craft adversarial examples on a surrogate, query
// black-box targets once on the finished batch, and report success rates.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mta/attack.hpp"
#include "mta/model.hpp"

namespace mta {

/// Examples the target classifies correctly (argmax, ties to the lowest index).
ExampleBatch filter_correct(const Classifier& target, const ExampleBatch& data);

/// Unweighted mean of the members' logits.
class LogitEnsemble final : public DifferentiableModel {
 public:
  explicit LogitEnsemble(std::vector<const DifferentiableModel*> members);
  ad::Var forward(const ad::Var& images) const override;
  std::size_t num_classes() const override;
  Shape input_shape() const override;

 private:
  std::vector<const DifferentiableModel*> members_;
};

Tensor ensemble_logits(std::span<const Classifier* const> sources, const Tensor& images);

/// Target label rule for targeted attacks: (y + 1) mod K.
std::vector<int> next_class_targets(std::span<const int> labels, std::size_t num_classes);

struct Surrogate {
  std::string id;
  const DifferentiableModel* model = nullptr;
};

struct Target {
  std::string id;
  const Classifier* model = nullptr;
};

struct EvalSettings {
  AttackMethod method = AttackMethod::Pgd;
  AttackConfig attack{};  // epsilon 15, steps (T_v) 10 by default
  std::size_t n_examples = 1000;
  std::uint64_t seed = 0;
  /// Adversarial batches are crafted in chunks of this many images.
  std::size_t chunk = 128;

  void validate() const;
};

struct TransferRow {
  std::string attack;  // method name, with a "-targeted" suffix in targeted mode
  std::string surrogate;
  std::string target;
  double epsilon = 0.0;
  std::size_t t_v = 0;
  std::size_t n = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;

  friend bool operator==(const TransferRow&, const TransferRow&) = default;
};

struct TransferReport {
  std::vector<TransferRow> rows;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string timestamp;  // JSON only, so CSV output stays reproducible
  std::string target_label_rule = "(y+1) mod K";

  /// Header comment "# config_hash=<hash>" followed by
  /// attack,surrogate,target,epsilon,T_v,n,success_rate rows.
  std::string to_csv() const;
  nlohmann::json to_json() const;
  /// FormatError naming `source` on a schema mismatch.
  static TransferReport from_csv(std::string_view text, const std::string& source = "<memory>");
  static TransferReport from_json(const nlohmann::json& j, const std::string& source = "<memory>");
};

/// Per-target evaluation set: the target's correctly classified examples,
/// reduced to settings.n_examples by a seeded draw. ConfigError if empty.
ExampleBatch evaluation_set(const Target& target, const ExampleBatch& data, const EvalSettings& settings);

/// Crafts on the surrogate and counts target successes on `eval_set`, which
/// must already be filtered for the target.
TransferRow evaluate_cell(const Surrogate& surrogate, const Target& target, const ExampleBatch& eval_set,
                          const EvalSettings& settings);

/// Every (surrogate, target) pair, in the given order.
TransferReport transfer_eval(std::span<const Surrogate> surrogates, std::span<const Target> targets,
                             const ExampleBatch& data, const EvalSettings& settings);

/// transfer_eval with targeted attacks toward (y + 1) mod K.
TransferReport targeted_eval(std::span<const Surrogate> surrogates, std::span<const Target> targets,
                             const ExampleBatch& data, EvalSettings settings);

enum class SweepAxis { Tv, Epsilon, TtCheckpoints };

std::string_view sweep_axis_name(SweepAxis axis);
SweepAxis parse_sweep_axis(std::string_view name);

/// Surrogates used for one sweep value; the T_t axis swaps in the MSM
/// trained with that many inner steps, the other axes return a fixed list.
using SurrogatesFor = std::function<std::vector<Surrogate>(double value)>;

/// One transfer_eval per value with everything else fixed; rows concatenated
/// in value order.
TransferReport sweep(SweepAxis axis, std::span<const double> values, const SurrogatesFor& surrogates,
                     std::span<const Target> targets, const ExampleBatch& data, const EvalSettings& settings);

/// Mean success rate over rows whose surrogate matches `surrogate`.
double mean_success(const TransferReport& report, const std::string& surrogate);

}  // namespace mta
