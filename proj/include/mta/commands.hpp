#pragma once

// The subcommands of the `mta` tool. Each reads a resolved experiment
// config, writes its artifacts under config.output_dir and returns a process
// exit code; configuration problems surface as ConfigError or
// NotFoundError, anything else as another Error.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mta/experiment.hpp"

namespace mta::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Command-line flags layered over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  /// Zoo recipes for train-zoo, meta.epochs for train-msm.
  std::optional<std::size_t> epochs;
  std::optional<double> epsilon;
  std::optional<std::size_t> tv;
  bool targeted = false;
};

enum class Command { TrainZoo, TrainMsm, Attack, Evaluate, Report };

/// Loads `path` (or the defaults when empty) and applies the overrides that
/// matter to `command`.
ExperimentConfig resolve_config(const std::filesystem::path& path, const Overrides& overrides, Command command);

struct Splits {
  ExampleBatch train;
  ExampleBatch test;
};

/// Dataset splits after the config's train/test limits.
Splits load_splits(const ExperimentConfig& config);

std::filesystem::path zoo_checkpoint(const ExperimentConfig& config, const std::string& id);
/// msm, msm-init and msm-tt<N> live under msm/, everything else under zoo/.
std::filesystem::path surrogate_checkpoint(const ExperimentConfig& config, const std::string& id);

/// Trains every zoo entry, standard models before their adversarial twins,
/// and writes zoo/<id>.mtaw plus zoo/manifest.json. A failing entry is
/// recorded in the manifest and the remaining ones still run; the exit code
/// is then kExitRuntime.
int cmd_train_zoo(const ExperimentConfig& config, std::ostream& log);

struct TrainMsmOptions {
  /// Trains msm-tt<N> with N inner steps instead of the default surrogate.
  std::optional<std::size_t> inner_steps;
};

/// Meta-trains the surrogate against the meta sources and writes
/// msm/<id>.mtaw, msm/msm-init.mtaw, msm/<id>_log.csv and the
/// snapshot curve plots/<id>_curve.svg (+ .csv).
int cmd_train_msm(const ExperimentConfig& config, const TrainMsmOptions& options, std::ostream& log);

struct AttackOptions {
  std::string surrogate = "msm";
  /// Eval entry providing method, epsilon, T_v and targeting; empty = first.
  std::string eval_name;
  /// Images drawn from the test split when no input file is given.
  std::size_t count = 100;
  /// Optional (N, H, W, C) float64 .npy of clean images; labels then come
  /// from the surrogate's own predictions.
  std::optional<std::filesystem::path> input;
};

/// Writes attacks/<surrogate>-<attack>/ with clean_<i>.npy and adv_<i>.npy
/// per image, index.json and stats.json (max and mean L-inf).
int cmd_attack(const ExperimentConfig& config, const AttackOptions& options, std::ostream& log);

/// Runs every eval entry and writes reports/<name>.csv, reports/<name>.json,
/// the surrogate-by-target matrix reports/<name>_matrix.csv and, for
/// sweeps, plots/<name>_<axis>.svg. Targets with an empty evaluation set get
/// a row in reports/<name>.errors.csv and the exit code is kExitRuntime.
int cmd_evaluate(const ExperimentConfig& config, std::ostream& log);

struct ReportOptions {
  std::vector<std::filesystem::path> inputs;
  bool force = false;
};

/// Merges reports (CSV or JSON) into reports/merged.csv and draws one curve
/// plot per axis that varies among otherwise identical rows.
int cmd_report(const ExperimentConfig& config, const ReportOptions& options, std::ostream& log);

/// Reads a TransferReport from .csv or .json, naming the file on errors.
TransferReport read_report(const std::filesystem::path& path);

}  // namespace mta::cli
