#include "mta/commands.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <map>
#include <memory>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "mta/checkpoint.hpp"
#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/io.hpp"
#include "mta/plot.hpp"
#include "mta/train.hpp"

namespace mta::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& items, std::string_view sep = ", ") {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : std::string(sep)) + s;
  return out;
}

std::string tt_id(double inner_steps) { return "msm-tt" + std::to_string(static_cast<std::size_t>(inner_steps)); }

bool is_msm_id(const std::string& id) { return id == kMsmId || id == kMsmInitId || id.starts_with("msm-tt"); }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

/// Loads checkpoints on demand and builds the logit ensemble of the meta
/// sources for the "ensemble" surrogate.
class ModelCache {
 public:
  ModelCache(const ExperimentConfig& config, std::ostream& log) : config_(config), log_(log), hash_(config_hash(config)) {}

  const Classifier& classifier(const std::string& id) {
    auto it = models_.find(id);
    if (it != models_.end()) return *it->second;
    const fs::path path = surrogate_checkpoint(config_, id);
    LoadedCheckpoint ckpt = load_checkpoint(path);
    if (ckpt.meta.config_hash != hash_) {
      log_ << fmt::format("warning: {} was written under config hash {}, current is {}\n", path.string(),
                          ckpt.meta.config_hash, hash_);
    }
    auto model = std::make_unique<Classifier>(std::move(ckpt.model));
    return *models_.emplace(id, std::move(model)).first->second;
  }

  const DifferentiableModel& surrogate(const std::string& id) {
    if (id != kEnsembleId) return classifier(id);
    if (!ensemble_) {
      std::vector<const DifferentiableModel*> members;
      for (const auto& s : config_.effective_meta_sources()) members.push_back(&classifier(s));
      ensemble_ = std::make_unique<LogitEnsemble>(std::move(members));
    }
    return *ensemble_;
  }

  Tensor logits(const std::string& id, const Tensor& images) {
    if (id != kEnsembleId) return classifier(id).logits(images);
    std::vector<const Classifier*> members;
    for (const auto& s : config_.effective_meta_sources()) members.push_back(&classifier(s));
    return ensemble_logits(members, images);
  }

 private:
  const ExperimentConfig& config_;
  std::ostream& log_;
  std::string hash_;
  std::map<std::string, std::unique_ptr<Classifier>> models_;
  std::unique_ptr<LogitEnsemble> ensemble_;
};

void require_checkpoints(const ExperimentConfig& config, const std::vector<std::string>& ids, const std::string& what) {
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    const fs::path p = surrogate_checkpoint(config, id);
    if (!fs::exists(p) || !fs::exists(metadata_path(p))) missing.push_back(id);
  }
  if (!missing.empty()) {
    throw NotFoundError(fmt::format("missing {} checkpoints: {} (under {})", what, join(missing),
                                    config.output_path().string()));
  }
}

const EvalEntry& find_eval(const ExperimentConfig& config, const std::string& name) {
  if (config.eval.empty()) throw ConfigError("config has no eval entries");
  if (name.empty()) return config.eval.front();
  for (const auto& e : config.eval) {
    if (e.name == name) return e;
  }
  throw ConfigError("no eval entry named '" + name + "'");
}

EvalSettings eval_settings(const EvalEntry& e) {
  EvalSettings s;
  s.method = e.method;
  s.attack.epsilon = e.epsilon;
  s.attack.steps = e.t_v;
  s.attack.targeted = e.targeted;
  s.n_examples = e.n_examples;
  s.seed = e.seed;
  s.validate();
  return s;
}

void save_model(const Classifier& model, const std::string& id, const std::string& dataset, std::uint64_t seed,
                std::size_t epochs, double accuracy, TrainingKind kind, const std::string& hash, json extra,
                const fs::path& path) {
  CheckpointMeta meta;
  meta.id = id;
  meta.arch = model.spec();
  meta.dataset = dataset;
  meta.seed = seed;
  meta.epochs = epochs;
  meta.accuracy = accuracy;
  meta.training_kind = kind;
  meta.config_hash = hash;
  meta.extra = std::move(extra);
  save_checkpoint(model, meta, path);
}

}  // namespace

ExperimentConfig resolve_config(const fs::path& path, const Overrides& o, Command command) {
  ExperimentConfig c = path.empty() ? parse_experiment_config(json::object(), o.seed) : load_experiment_config(path, o.seed);
  if (o.output) c.output_dir = *o.output;
  if (o.epochs) {
    if (command == Command::TrainZoo) {
      for (auto& e : c.zoo) e.recipe.epochs = *o.epochs;
    } else if (command == Command::TrainMsm) {
      c.meta.epochs = *o.epochs;
    }
  }
  if (command == Command::Attack || command == Command::Evaluate) {
    for (auto& e : c.eval) {
      if (o.epsilon) e.epsilon = *o.epsilon;
      if (o.tv) e.t_v = *o.tv;
      if (o.targeted) e.targeted = true;
    }
  }
  c.validate();
  return c;
}

Splits load_splits(const ExperimentConfig& config) {
  Dataset train = load_dataset(config.dataset, Split::Train, config.data_path());
  Dataset test = load_dataset(config.dataset, Split::Test, config.data_path());
  if (config.train_limit) train = train.subset(config.train_limit, derive_seed(config.master_seed, "train-limit"));
  if (config.test_limit) test = test.subset(config.test_limit, derive_seed(config.master_seed, "test-limit"));
  return {std::move(train.examples), std::move(test.examples)};
}

fs::path zoo_checkpoint(const ExperimentConfig& config, const std::string& id) {
  return config.zoo_dir() / (id + ".mtaw");
}

fs::path surrogate_checkpoint(const ExperimentConfig& config, const std::string& id) {
  if (id == kEnsembleId) throw ConfigError("the ensemble surrogate has no checkpoint of its own");
  return is_msm_id(id) ? config.msm_dir() / (id + ".mtaw") : zoo_checkpoint(config, id);
}

int cmd_train_zoo(const ExperimentConfig& config, std::ostream& log) {
  const std::string hash = config_hash(config);
  for (const auto& w : config.warnings()) log << "warning: " << w << '\n';
  std::map<std::string, json> results;
  std::map<std::string, Classifier> trained;
  bool failed = false;

  if (!config.zoo.empty()) {
    const Splits data = load_splits(config);
    std::vector<const ZooEntry*> order;
    for (const auto& e : config.zoo) if (!e.adversarial_base) order.push_back(&e);
    for (const auto& e : config.zoo) if (e.adversarial_base) order.push_back(&e);

    for (const ZooEntry* e : order) {
      const fs::path path = zoo_checkpoint(config, e->id);
      try {
        log << fmt::format("[train-zoo] {} ({}, {})\n", e->id, zoo_role_name(e->role), family_name(e->arch.family));
        Classifier model = build_model(e->arch, e->seed);
        const EpochCallback progress = [&](std::size_t epoch, double loss, double acc) {
          log << fmt::format("  epoch {} loss {:.4f} acc {:.4f}\n", epoch, loss, acc);
        };
        TrainResult r;
        json extra = {{"role", zoo_role_name(e->role)}, {"recipe", e->recipe}};
        if (e->adversarial_base) {
          auto base = trained.find(*e->adversarial_base);
          if (base == trained.end()) throw Error("adversarial base '" + *e->adversarial_base + "' failed to train");
          r = adversarial_train(model, base->second, data.train, data.test, e->recipe, progress);
          extra["adversarial_base"] = *e->adversarial_base;
        } else {
          r = train_classifier(model, data.train, data.test, e->recipe, progress);
        }
        extra["epoch_loss"] = r.epoch_loss;
        extra["epoch_accuracy"] = r.epoch_accuracy;
        save_model(model, e->id, config.dataset, e->seed, e->recipe.epochs, r.final_accuracy,
                   e->adversarial_base ? TrainingKind::Adversarial : TrainingKind::Standard, hash, std::move(extra), path);
        results[e->id] = {{"status", "ok"}, {"accuracy", r.final_accuracy}};
        trained.emplace(e->id, std::move(model));
      } catch (const Error& ex) {
        failed = true;
        log << fmt::format("[train-zoo] {} failed: {}\n", e->id, ex.what());
        std::error_code ec;
        fs::remove(path, ec);
        fs::remove(metadata_path(path), ec);
        results[e->id] = {{"status", "failed"}, {"accuracy", nullptr}, {"error", ex.what()}};
      }
    }
  }

  json entries = json::array();
  for (const auto& e : config.zoo) {
    json row = {{"id", e.id},
                {"role", zoo_role_name(e.role)},
                {"family", family_name(e.arch.family)},
                {"checkpoint", e.id + ".mtaw"}};
    row.update(results.at(e.id));
    entries.push_back(std::move(row));
  }
  write_json(config.zoo_dir() / "manifest.json",
             {{"config_hash", hash}, {"dataset", config.dataset}, {"entries", std::move(entries)}});
  return failed ? kExitRuntime : kExitOk;
}

int cmd_train_msm(const ExperimentConfig& config, const TrainMsmOptions& options, std::ostream& log) {
  const std::string hash = config_hash(config);
  MetaTrainConfig mc = config.meta;
  std::string id(kMsmId);
  if (options.inner_steps) {
    if (*options.inner_steps == 0) throw ConfigError("--inner-steps must be positive");
    mc.inner_steps = *options.inner_steps;
    id = "msm-tt" + std::to_string(mc.inner_steps);
  }
  mc.validate();
  const std::vector<std::string> source_ids = config.effective_meta_sources();
  const std::vector<std::string> target_ids = config.ids_with_role(ZooRole::Target);
  if (source_ids.empty()) throw ConfigError("meta training needs at least one source zoo entry");
  require_checkpoints(config, source_ids, "source");
  require_checkpoints(config, target_ids, "target");

  const Splits data = load_splits(config);
  ModelCache cache(config, log);
  MetaSources sources;
  for (const auto& s : source_ids) {
    sources.ids.push_back(s);
    sources.models.push_back(&cache.classifier(s));
  }
  MetaTargets targets;
  for (const auto& t : target_ids) {
    targets.targets.push_back({t, &cache.classifier(t)});
    EvalSettings s;
    s.n_examples = mc.eval_examples;
    s.seed = derive_seed(config.master_seed, "msm-snapshot|" + t);
    targets.eval_sets.push_back(evaluation_set(targets.targets.back(), data.test, s));
  }

  const Classifier init = build_model(mc.msm_arch, mc.seed);
  save_model(init, std::string(kMsmInitId), config.dataset, mc.seed, 0, init.accuracy(data.test), TrainingKind::Msm,
             hash, {{"sources", source_ids}}, config.msm_dir() / (std::string(kMsmInitId) + ".mtaw"));

  log << fmt::format("[train-msm] {}: {} sources, {} targets, {} epochs, T_t {}\n", id, source_ids.size(),
                     target_ids.size(), mc.epochs, mc.inner_steps);
  const auto start = std::chrono::steady_clock::now();
  const MetaStepCallback progress = [&](const MetaLogRecord& r) {
    if (!r.eval_success && r.iteration % 50 != 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string line = fmt::format("  it {} ({:.0f}s) eps_c {:.1f} J {:.4f}", r.iteration, secs, r.epsilon_c, r.loss_sum);
    if (r.eval_success) {
      for (std::size_t t = 0; t < target_ids.size(); ++t) line += fmt::format(" {} {:.3f}", target_ids[t], (*r.eval_success)[t]);
    }
    log << line << '\n';
  };

  Classifier last_stable = init;
  MetaTrainResult result{init, {}};
  try {
    result = train_msm(mc, sources, data.train, targets, progress, &last_stable);
  } catch (const Error&) {
    const fs::path fallback = config.msm_dir() / (id + ".last_stable.mtaw");
    save_model(last_stable, id, config.dataset, mc.seed, mc.epochs, last_stable.accuracy(data.test), TrainingKind::Msm,
               hash, {{"sources", source_ids}, {"status", "aborted"}}, fallback);
    log << "[train-msm] aborted; last stable weights in " << fallback.string() << '\n';
    throw;
  }

  const json extra = {{"sources", source_ids},
                      {"targets", target_ids},
                      {"inner_steps", mc.inner_steps},
                      {"iterations", result.log.records.size()}};
  save_model(result.msm, id, config.dataset, mc.seed, mc.epochs, result.msm.accuracy(data.test), TrainingKind::Msm, hash,
             extra, config.msm_dir() / (id + ".mtaw"));
  io::write_file_atomic(config.msm_dir() / (id + "_log.csv"), result.log.to_csv(hash));

  LinePlot plot{id + " transfer success during meta-training", "iteration", "success rate", {}};
  for (std::size_t t = 0; t < target_ids.size(); ++t) {
    PlotSeries s{target_ids[t], {}, {}};
    for (const MetaLogRecord* r : result.log.snapshots()) {
      s.x.push_back(static_cast<double>(r->iteration));
      s.y.push_back(r->eval_success->at(t));
    }
    plot.series.push_back(std::move(s));
  }
  write_plot(plot, config.plots_dir() / (id + "_curve.svg"));
  log << fmt::format("[train-msm] wrote {} ({} iterations)\n", (config.msm_dir() / (id + ".mtaw")).string(),
                     result.log.records.size());
  return kExitOk;
}

int cmd_attack(const ExperimentConfig& config, const AttackOptions& options, std::ostream& log) {
  const std::string hash = config_hash(config);
  const EvalEntry& entry = find_eval(config, options.eval_name);
  const EvalSettings settings = eval_settings(entry);
  if (options.count == 0) throw ConfigError("--count must be positive");
  if (options.surrogate == kEnsembleId) {
    require_checkpoints(config, config.effective_meta_sources(), "source");
  } else {
    require_checkpoints(config, {options.surrogate}, "surrogate");
  }
  ModelCache cache(config, log);
  const DifferentiableModel& model = cache.surrogate(options.surrogate);

  ExampleBatch batch;
  if (options.input) {
    Tensor images = io::decode_npy(io::read_file(*options.input), options.input->string());
    Shape expect = model.input_shape();
    expect.insert(expect.begin(), images.rank() ? images.dim(0) : 0);
    if (images.shape() != expect) {
      throw ConfigError(options.input->string() + ": expected images of shape " + shape_string(expect) + ", got " +
                        shape_string(images.shape()));
    }
    batch.labels = argmax_rows(cache.logits(options.surrogate, images));
    batch.images = std::move(images);
  } else {
    const Splits data = load_splits(config);
    batch = sample_rows(data.test, options.count, derive_seed(config.master_seed, "attack|" + options.surrogate));
  }
  batch.validate(model.num_classes());
  if (settings.attack.targeted) batch.target_labels = next_class_targets(batch.labels, model.num_classes());

  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < batch.size(); i += settings.chunk) {
    const ExampleBatch chunk = batch.slice(i, std::min(batch.size(), i + settings.chunk));
    parts.push_back(run_attack(settings.method, model, chunk, settings.attack,
                               derive_seed(settings.seed, "attack-chunk|" + std::to_string(i)))
                        .images);
  }
  const Tensor adv = concat_rows(parts);
  const std::vector<double> linf = linf_per_example(batch.images, adv);

  std::string attack(attack_method_name(settings.method));
  if (settings.attack.targeted) attack += "-targeted";
  const fs::path dir = config.output_path() / "attacks" / (options.surrogate + "-" + attack);
  const Shape image_shape = model.input_shape();
  json images = json::array();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::string clean = fmt::format("clean_{:05d}.npy", i), adversarial = fmt::format("adv_{:05d}.npy", i);
    io::write_file_atomic(dir / clean, io::encode_npy(batch.images.slice_rows(i, i + 1).reshaped(image_shape)));
    io::write_file_atomic(dir / adversarial, io::encode_npy(adv.slice_rows(i, i + 1).reshaped(image_shape)));
    json row = {{"clean", clean}, {"adversarial", adversarial}, {"label", batch.labels[i]}, {"linf", linf[i]}};
    if (batch.target_labels) row["target_label"] = (*batch.target_labels)[i];
    images.push_back(std::move(row));
  }
  double max_linf = 0.0, sum = 0.0;
  for (double d : linf) max_linf = std::max(max_linf, d), sum += d;
  const double mean_linf = linf.empty() ? 0.0 : sum / static_cast<double>(linf.size());

  write_json(dir / "index.json", {{"config_hash", hash},
                                  {"surrogate", options.surrogate},
                                  {"attack", attack},
                                  {"epsilon", settings.attack.epsilon},
                                  {"T_v", settings.attack.steps},
                                  {"target_label_rule", "(y+1) mod K"},
                                  {"images", std::move(images)}});
  write_json(dir / "stats.json", {{"config_hash", hash},
                                  {"n", batch.size()},
                                  {"epsilon", settings.attack.epsilon},
                                  {"max_linf", max_linf},
                                  {"mean_linf", mean_linf}});
  log << fmt::format("[attack] {} images in {}: max L-inf {:.4f}, mean {:.4f}\n", batch.size(), dir.string(), max_linf,
                     mean_linf);
  return kExitOk;
}

int cmd_evaluate(const ExperimentConfig& config, std::ostream& log) {
  const std::string hash = config_hash(config);
  for (const auto& w : config.warnings()) log << "warning: " << w << '\n';

  std::set<std::string> needed;
  for (const auto& e : config.eval) {
    for (const auto& t : config.effective_targets(e)) needed.insert(t);
    for (const auto& s : e.surrogates) {
      if (s == kEnsembleId) {
        for (const auto& id : config.effective_meta_sources()) needed.insert(id);
      } else if (e.sweep_axis == SweepAxis::TtCheckpoints && s == kMsmId) {
        for (double v : e.sweep_values) needed.insert(tt_id(v));
      } else {
        needed.insert(s);
      }
    }
    if (config.effective_targets(e).empty()) throw ConfigError("eval '" + e.name + "' has no targets");
  }
  require_checkpoints(config, {needed.begin(), needed.end()}, "model");

  const Splits data = load_splits(config);
  ModelCache cache(config, log);
  bool failed = false;

  for (const auto& e : config.eval) {
    const EvalSettings settings = eval_settings(e);
    if (e.sweep_axis == SweepAxis::TtCheckpoints) {
      for (double v : e.sweep_values) {
        if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
          throw ConfigError("eval '" + e.name + "': T_t sweep values must be positive integers");
        }
      }
    }
    const SurrogatesFor surrogates_for = [&](double value) {
      std::vector<Surrogate> list;
      for (const auto& s : e.surrogates) {
        std::string id = s;
        if (e.sweep_axis == SweepAxis::TtCheckpoints && s == kMsmId) id = tt_id(value);
        list.push_back({id, &cache.surrogate(id)});
      }
      return list;
    };

    TransferReport report;
    report.seed = settings.seed;
    report.config_hash = hash;
    report.timestamp = utc_timestamp();
    json errors = json::array();
    std::string errors_csv = fmt::format("# config_hash={}\nattack,target,error\n", hash);
    std::string attack(attack_method_name(settings.method));
    if (settings.attack.targeted) attack += "-targeted";

    for (const auto& tid : config.effective_targets(e)) {
      const Target target{tid, &cache.classifier(tid)};
      log << fmt::format("[evaluate] {}: target {}\n", e.name, tid);
      try {
        evaluation_set(target, data.test, settings);
      } catch (const ConfigError& ex) {
        failed = true;
        log << fmt::format("[evaluate] {}: target {} skipped: {}\n", e.name, tid, ex.what());
        errors.push_back({{"attack", attack}, {"target", tid}, {"error", ex.what()}});
        std::string msg = ex.what();
        std::replace(msg.begin(), msg.end(), ',', ';');
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        errors_csv += fmt::format("{},{},{}\n", attack, tid, msg);
        continue;
      }
      const std::vector<Target> one{target};
      const std::vector<double> values = e.sweep_axis ? e.sweep_values : std::vector<double>{0.0};
      TransferReport part = e.sweep_axis ? sweep(*e.sweep_axis, values, surrogates_for, one, data.test, settings)
                                         : transfer_eval(surrogates_for(0.0), one, data.test, settings);
      for (const auto& r : part.rows) {
        log << fmt::format("  {} {} -> {}: eps {} T_v {} n {} success {:.4f}\n", r.attack, r.surrogate, r.target,
                           r.epsilon, r.t_v, r.n, r.success_rate);
      }
      report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
    }

    const fs::path base = config.reports_dir() / e.name;
    io::write_file_atomic(fs::path(base).concat(".csv"), report.to_csv());
    json j = report.to_json();
    j["metadata"]["eval"] = e.name;
    j["errors"] = errors;
    write_json(fs::path(base).concat(".json"), j);
    const fs::path errors_path = fs::path(base).concat(".errors.csv");
    std::error_code ec;
    if (errors.empty()) {
      fs::remove(errors_path, ec);
    } else {
      io::write_file_atomic(errors_path, errors_csv);
    }

    if (!e.sweep_axis) {
      // Surrogate-by-target table, one row per attack/surrogate pair.
      std::vector<std::string> targets;
      for (const auto& r : report.rows) {
        if (std::find(targets.begin(), targets.end(), r.target) == targets.end()) targets.push_back(r.target);
      }
      std::string matrix = fmt::format("# config_hash={}\nattack,surrogate", hash);
      for (const auto& t : targets) matrix += "," + t;
      matrix += ",mean\n";
      for (const auto& s : e.surrogates) {
        matrix += attack + "," + s;
        double sum = 0.0;
        for (const auto& t : targets) {
          auto it = std::find_if(report.rows.begin(), report.rows.end(),
                                 [&](const TransferRow& r) { return r.surrogate == s && r.target == t; });
          matrix += it == report.rows.end() ? std::string(",") : fmt::format(",{}", it->success_rate);
          if (it != report.rows.end()) sum += it->success_rate;
        }
        matrix += targets.empty() ? std::string(",\n") : fmt::format(",{}\n", sum / static_cast<double>(targets.size()));
      }
      io::write_file_atomic(fs::path(base).concat("_matrix.csv"), matrix);
    } else {
      const std::string axis(sweep_axis_name(*e.sweep_axis));
      LinePlot plot{e.name + ": success vs " + axis, axis, "success rate", {}};
      for (const auto& s : e.surrogates) {
        for (const auto& tid : config.effective_targets(e)) {
          PlotSeries series{s + "/" + tid, {}, {}};
          for (std::size_t k = 0; k < e.sweep_values.size(); ++k) {
            const double v = e.sweep_values[k];
            const std::string sid =
                e.sweep_axis == SweepAxis::TtCheckpoints && s == kMsmId ? tt_id(v) : s;
            auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const TransferRow& r) {
              if (r.surrogate != sid || r.target != tid) return false;
              if (e.sweep_axis == SweepAxis::Tv) return static_cast<double>(r.t_v) == v;
              if (e.sweep_axis == SweepAxis::Epsilon) return r.epsilon == v;
              return true;
            });
            if (it == report.rows.end()) continue;
            series.x.push_back(v);
            series.y.push_back(it->success_rate);
          }
          if (!series.x.empty()) plot.series.push_back(std::move(series));
        }
      }
      write_plot(plot, config.plots_dir() / (e.name + "_" + axis + ".svg"));
    }
  }
  return failed ? kExitRuntime : kExitOk;
}

TransferReport read_report(const fs::path& path) {
  const std::string text = io::read_file(path);
  if (path.extension() == ".json") {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    return TransferReport::from_json(j, path.string());
  }
  return TransferReport::from_csv(text, path.string());
}

namespace {

/// The numeric position of a row along `axis`; nullopt when the row's
/// surrogate is not a T_t checkpoint.
std::optional<double> axis_value(const TransferRow& r, SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Tv: return static_cast<double>(r.t_v);
    case SweepAxis::Epsilon: return r.epsilon;
    case SweepAxis::TtCheckpoints:
      if (r.surrogate.starts_with("msm-tt")) return std::stod(r.surrogate.substr(6));
      return std::nullopt;
  }
  return std::nullopt;
}

/// Series key: everything about a row except its position on `axis`.
std::string series_key(const TransferRow& r, SweepAxis axis) {
  const std::string surrogate = axis == SweepAxis::TtCheckpoints ? std::string("msm-tt") : r.surrogate;
  std::string key = r.attack + "/" + surrogate + "/" + r.target;
  if (axis != SweepAxis::Epsilon) key += fmt::format("/eps{}", r.epsilon);
  if (axis != SweepAxis::Tv) key += fmt::format("/tv{}", r.t_v);
  return key;
}

}  // namespace

int cmd_report(const ExperimentConfig& config, const ReportOptions& options, std::ostream& log) {
  if (options.inputs.empty()) throw ConfigError("report needs at least one report file");
  TransferReport merged;
  for (const auto& path : options.inputs) {
    TransferReport part = read_report(path);
    if (merged.rows.empty() && merged.config_hash.empty()) {
      merged.config_hash = part.config_hash;
      merged.seed = part.seed;
    } else if (part.config_hash != merged.config_hash) {
      if (!options.force) {
        throw ConfigError(fmt::format("{} has config hash {} but {} has {}; pass --force to merge anyway",
                                      path.string(), part.config_hash, options.inputs.front().string(),
                                      merged.config_hash));
      }
      log << "warning: merging " << path.string() << " with a different config hash\n";
      merged.config_hash = "mixed";
    }
    merged.rows.insert(merged.rows.end(), part.rows.begin(), part.rows.end());
  }
  io::write_file_atomic(config.reports_dir() / "merged.csv", merged.to_csv());
  log << fmt::format("[report] merged {} rows from {} files into {}\n", merged.rows.size(), options.inputs.size(),
                     (config.reports_dir() / "merged.csv").string());

  for (SweepAxis axis : {SweepAxis::Tv, SweepAxis::Epsilon, SweepAxis::TtCheckpoints}) {
    std::vector<std::string> order;
    std::map<std::string, std::map<double, double>> series;
    for (const auto& r : merged.rows) {
      const auto v = axis_value(r, axis);
      if (!v) continue;
      const std::string key = series_key(r, axis);
      if (!series.count(key)) order.push_back(key);
      series[key][*v] = r.success_rate;
    }
    const std::string name(sweep_axis_name(axis));
    LinePlot plot{"success vs " + name, name, "success rate", {}};
    for (const auto& key : order) {
      if (series[key].size() < 2) continue;
      PlotSeries s{key, {}, {}};
      for (const auto& [x, y] : series[key]) s.x.push_back(x), s.y.push_back(y);
      plot.series.push_back(std::move(s));
    }
    if (plot.series.empty()) continue;
    const fs::path out = config.plots_dir() / ("report_" + name + ".svg");
    write_plot(plot, out);
    log << "[report] wrote " << out.string() << '\n';
  }
  return kExitOk;
}

}  // namespace mta::cli
