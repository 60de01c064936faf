#pragma once

// Experiment configuration shared by the command-line tools: which dataset,
// which zoo members play source or target, how the surrogate is meta-trained
// and which transfer evaluations to run. Seeds not given explicitly are
// derived from the master seed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mta/evaluator.hpp"
#include "mta/meta.hpp"
#include "mta/train.hpp"

namespace mta {

enum class ZooRole { Source, Target };

std::string_view zoo_role_name(ZooRole role);
ZooRole parse_zoo_role(std::string_view name);

struct ZooEntry {
  std::string id;
  ZooRole role = ZooRole::Source;
  ArchitectureSpec arch;
  TrainRecipe recipe;
  /// Weight-initialization seed.
  std::uint64_t seed = 0;
  /// Id of a standard zoo entry this one is adversarially fine-tuned from.
  std::optional<std::string> adversarial_base;
};

/// Surrogate ids understood by the evaluator besides zoo ids.
inline constexpr std::string_view kMsmId = "msm";
inline constexpr std::string_view kMsmInitId = "msm-init";
inline constexpr std::string_view kEnsembleId = "ensemble";

struct EvalEntry {
  std::string name = "transfer";
  /// "msm", "msm-init", "ensemble" (logit ensemble of the meta sources),
  /// "msm-tt<N>" or any zoo id.
  std::vector<std::string> surrogates{"msm", "ensemble"};
  /// Zoo ids; empty means every target-role entry.
  std::vector<std::string> targets;
  AttackMethod method = AttackMethod::Pgd;
  double epsilon = 15.0;
  std::size_t t_v = 10;
  std::size_t n_examples = 1000;
  bool targeted = false;
  std::uint64_t seed = 0;
  std::optional<SweepAxis> sweep_axis;
  std::vector<double> sweep_values;
};

struct ExperimentConfig {
  std::string dataset = "mnist-5k";
  /// Empty: $MTA_DATA_DIR or ./data.
  std::string data_dir;
  /// Optional seeded subsets of the splits; 0 keeps everything.
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::uint64_t master_seed = 0;
  std::string output_dir = "runs/default";
  std::vector<ZooEntry> zoo;
  /// Zoo ids the surrogate is meta-trained against; empty means every
  /// source-role entry.
  std::vector<std::string> meta_sources;
  MetaTrainConfig meta;
  std::vector<EvalEntry> eval{EvalEntry{}};

  /// ConfigError on unknown ids, duplicate ids, shape mismatches and
  /// out-of-range values.
  void validate() const;
  /// Non-fatal findings, such as an architecture shared by a source and a target.
  std::vector<std::string> warnings() const;

  const ZooEntry& zoo_entry(const std::string& id) const;
  std::vector<std::string> ids_with_role(ZooRole role) const;
  std::vector<std::string> effective_meta_sources() const;
  std::vector<std::string> effective_targets(const EvalEntry& entry) const;

  std::filesystem::path output_path() const { return output_dir; }
  std::filesystem::path zoo_dir() const { return output_path() / "zoo"; }
  std::filesystem::path msm_dir() const { return output_path() / "msm"; }
  std::filesystem::path reports_dir() const { return output_path() / "reports"; }
  std::filesystem::path plots_dir() const { return output_path() / "plots"; }
  std::filesystem::path data_path() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);

/// Parses a config document, filling defaults and deriving unset seeds from
/// master_seed (or from `seed_override` when given). ConfigError on schema
/// violations.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, std::optional<std::uint64_t> seed_override = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> seed_override = {});

/// FNV-1a hash of the canonical JSON of the fully resolved config, as 16 hex
/// digits. output_dir and data_dir are left out.
std::string config_hash(const ExperimentConfig& config);

/// Seed for a named stream, mixed from the master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label);

}  // namespace mta
