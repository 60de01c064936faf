#include "mta/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {
namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

bool reserved_id(std::string_view id) {
  return id == kMsmId || id == kMsmInitId || id == kEnsembleId || id.starts_with("msm-tt");
}

void check_id(const std::string& id, const std::string& what) {
  if (id.empty()) throw ConfigError(what + " id must be non-empty");
  for (char c : id) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    if (!ok) throw ConfigError(what + " id '" + id + "' may only use letters, digits, '-', '_' and '.'");
  }
}

ArchitectureSpec parse_arch(nlohmann::json j, const std::string& dataset) {
  if (!j.is_object()) throw ConfigError("architecture must be a JSON object");
  if (!j.contains("input_shape")) j["input_shape"] = dataset_input_shape(dataset);
  ArchitectureSpec spec = j.get<ArchitectureSpec>();
  if (!j.contains("norm_mean") && !j.contains("norm_std")) apply_dataset_normalization(spec, dataset);
  return spec;
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  try {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

ZooEntry parse_zoo_entry(const nlohmann::json& j, const std::string& dataset, std::uint64_t master) {
  check_keys(j, {"id", "role", "arch", "recipe", "seed", "adversarial_base"}, "zoo entry");
  ZooEntry e;
  e.id = get_or<std::string>(j, "id", "", "zoo entry");
  const std::string where = "zoo entry '" + e.id + "'";
  e.role = parse_zoo_role(get_or<std::string>(j, "role", "source", where));
  e.arch = parse_arch(j.value("arch", nlohmann::json::object()), dataset);
  const nlohmann::json recipe = j.value("recipe", nlohmann::json::object());
  check_keys(recipe, {"learning_rate", "weight_decay", "batch_size", "epochs", "seed", "adversarial"}, where + ".recipe");
  e.recipe = recipe.get<TrainRecipe>();
  if (!recipe.contains("seed")) e.recipe.seed = derive_seed(master, "zoo-train|" + e.id);
  e.seed = get_or<std::uint64_t>(j, "seed", derive_seed(master, "zoo-init|" + e.id), where);
  if (j.contains("adversarial_base") && !j["adversarial_base"].is_null()) {
    e.adversarial_base = get_or<std::string>(j, "adversarial_base", "", where);
    if (!e.recipe.adversarial) e.recipe.adversarial = AdversarialRecipe{};
  }
  return e;
}

EvalEntry parse_eval_entry(const nlohmann::json& j, std::uint64_t master) {
  check_keys(j,
             {"name", "surrogates", "targets", "attack", "epsilon", "T_v", "n_examples", "targeted", "seed", "sweep"},
             "eval entry");
  EvalEntry e;
  e.name = get_or<std::string>(j, "name", e.name, "eval entry");
  const std::string where = "eval entry '" + e.name + "'";
  e.surrogates = get_or(j, "surrogates", e.surrogates, where);
  e.targets = get_or(j, "targets", e.targets, where);
  e.method = parse_attack_method(get_or<std::string>(j, "attack", "pgd", where));
  e.epsilon = get_or(j, "epsilon", e.epsilon, where);
  e.t_v = get_or(j, "T_v", e.t_v, where);
  e.n_examples = get_or(j, "n_examples", e.n_examples, where);
  e.targeted = get_or(j, "targeted", e.targeted, where);
  e.seed = get_or<std::uint64_t>(j, "seed", derive_seed(master, "eval|" + e.name), where);
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"axis", "values"}, where + ".sweep");
    e.sweep_axis = parse_sweep_axis(get_or<std::string>(s, "axis", "", where + ".sweep"));
    e.sweep_values = get_or<std::vector<double>>(s, "values", {}, where + ".sweep");
  }
  return e;
}

}  // namespace

std::string_view zoo_role_name(ZooRole role) { return role == ZooRole::Source ? "source" : "target"; }

ZooRole parse_zoo_role(std::string_view name) {
  if (name == "source") return ZooRole::Source;
  if (name == "target") return ZooRole::Target;
  throw ConfigError("unknown zoo role '" + std::string(name) + "' (expected source or target)");
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  // splitmix64 finalizer over the mixed inputs
  std::uint64_t z = master ^ io::fnv1a64(label);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::filesystem::path ExperimentConfig::data_path() const {
  return data_dir.empty() ? default_data_dir() : std::filesystem::path(data_dir);
}

const ZooEntry& ExperimentConfig::zoo_entry(const std::string& id) const {
  for (const auto& e : zoo) {
    if (e.id == id) return e;
  }
  throw ConfigError("no zoo entry with id '" + id + "'");
}

std::vector<std::string> ExperimentConfig::ids_with_role(ZooRole role) const {
  std::vector<std::string> out;
  for (const auto& e : zoo) {
    if (e.role == role) out.push_back(e.id);
  }
  return out;
}

std::vector<std::string> ExperimentConfig::effective_meta_sources() const {
  return meta_sources.empty() ? ids_with_role(ZooRole::Source) : meta_sources;
}

std::vector<std::string> ExperimentConfig::effective_targets(const EvalEntry& entry) const {
  return entry.targets.empty() ? ids_with_role(ZooRole::Target) : entry.targets;
}

void ExperimentConfig::validate() const {
  const Shape shape = dataset_input_shape(dataset);
  std::set<std::string> ids;
  for (const auto& e : zoo) {
    check_id(e.id, "zoo");
    if (reserved_id(e.id)) throw ConfigError("zoo id '" + e.id + "' is reserved for surrogates");
    if (!ids.insert(e.id).second) throw ConfigError("duplicate zoo id '" + e.id + "'");
    e.arch.validate();
    e.recipe.validate();
    if (e.arch.input_shape != shape || e.arch.num_classes != 10) {
      throw ConfigError("zoo entry '" + e.id + "' does not match the input shape or classes of " + dataset);
    }
  }
  for (const auto& e : zoo) {
    if (e.adversarial_base) {
      const ZooEntry& base = zoo_entry(*e.adversarial_base);
      if (base.adversarial_base) throw ConfigError("adversarial base '" + base.id + "' must be a standard model");
      if (!(base.arch == e.arch)) throw ConfigError("zoo entry '" + e.id + "' must share its base's architecture");
    } else if (e.recipe.adversarial) {
      throw ConfigError("zoo entry '" + e.id + "' has an adversarial recipe but no adversarial_base");
    }
  }
  for (const auto& id : meta_sources) zoo_entry(id);
  meta.validate();
  if (meta.msm_arch.input_shape != shape || meta.msm_arch.num_classes != 10) {
    throw ConfigError("meta.msm_arch does not match the input shape or classes of " + dataset);
  }
  std::set<std::string> names;
  for (const auto& e : eval) {
    check_id(e.name, "eval");
    if (!names.insert(e.name).second) throw ConfigError("duplicate eval name '" + e.name + "'");
    if (e.surrogates.empty()) throw ConfigError("eval '" + e.name + "' needs at least one surrogate");
    for (const auto& s : e.surrogates) {
      if (!reserved_id(s)) zoo_entry(s);
      if (s.starts_with("msm-tt") && (s.size() == 6 || s.find_first_not_of("0123456789", 6) != std::string::npos)) {
        throw ConfigError("surrogate '" + s + "' must be msm-tt<inner steps>");
      }
    }
    for (const auto& t : e.targets) zoo_entry(t);
    if (!(e.epsilon >= 0.0 && e.epsilon <= 255.0)) throw ConfigError("eval '" + e.name + "': epsilon must lie in [0, 255]");
    if (e.t_v == 0 || e.n_examples == 0) throw ConfigError("eval '" + e.name + "': T_v and n_examples must be positive");
    if (e.sweep_axis && e.sweep_values.empty()) throw ConfigError("eval '" + e.name + "': sweep needs values");
  }
}

std::vector<std::string> ExperimentConfig::warnings() const {
  std::vector<std::string> out;
  for (const auto& s : zoo) {
    if (s.role != ZooRole::Source) continue;
    for (const auto& t : zoo) {
      if (t.role == ZooRole::Target && t.arch == s.arch) {
        out.push_back("source '" + s.id + "' and target '" + t.id + "' share an architecture");
      }
    }
  }
  for (const auto& e : eval) {
    for (const auto& s : e.surrogates) {
      const auto targets = effective_targets(e);
      if (std::find(targets.begin(), targets.end(), s) != targets.end()) {
        out.push_back("eval '" + e.name + "' attacks target '" + s + "' with itself (white-box)");
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  auto zoo = nlohmann::json::array();
  for (const auto& e : c.zoo) {
    nlohmann::json z = {{"id", e.id}, {"role", zoo_role_name(e.role)}, {"arch", e.arch}, {"recipe", e.recipe},
                        {"seed", e.seed}};
    if (e.adversarial_base) z["adversarial_base"] = *e.adversarial_base;
    zoo.push_back(std::move(z));
  }
  auto eval = nlohmann::json::array();
  for (const auto& e : c.eval) {
    nlohmann::json v = {{"name", e.name},           {"surrogates", e.surrogates}, {"targets", e.targets},
                        {"attack", attack_method_name(e.method)}, {"epsilon", e.epsilon},
                        {"T_v", e.t_v},             {"n_examples", e.n_examples}, {"targeted", e.targeted},
                        {"seed", e.seed}};
    if (e.sweep_axis) v["sweep"] = {{"axis", sweep_axis_name(*e.sweep_axis)}, {"values", e.sweep_values}};
    eval.push_back(std::move(v));
  }
  nlohmann::json meta = c.meta;
  meta["sources"] = c.meta_sources;
  j = {{"dataset", c.dataset},         {"data_dir", c.data_dir},     {"train_limit", c.train_limit},
       {"test_limit", c.test_limit},   {"master_seed", c.master_seed}, {"output_dir", c.output_dir},
       {"zoo", std::move(zoo)},        {"meta", std::move(meta)},    {"eval", std::move(eval)}};
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j, std::optional<std::uint64_t> seed_override) {
  check_keys(j, {"dataset", "data_dir", "train_limit", "test_limit", "master_seed", "output_dir", "zoo", "meta", "eval"},
             "experiment config");
  ExperimentConfig c;
  const std::string where = "experiment config";
  c.dataset = get_or(j, "dataset", c.dataset, where);
  dataset_input_shape(c.dataset);
  c.data_dir = get_or(j, "data_dir", c.data_dir, where);
  c.train_limit = get_or(j, "train_limit", c.train_limit, where);
  c.test_limit = get_or(j, "test_limit", c.test_limit, where);
  c.master_seed = seed_override ? *seed_override : get_or(j, "master_seed", c.master_seed, where);
  c.output_dir = get_or(j, "output_dir", c.output_dir, where);

  if (j.contains("zoo")) {
    if (!j["zoo"].is_array()) throw ConfigError("zoo must be a list");
    for (const auto& e : j["zoo"]) c.zoo.push_back(parse_zoo_entry(e, c.dataset, c.master_seed));
  }

  nlohmann::json meta = j.value("meta", nlohmann::json::object());
  {
    nlohmann::json allowed_json = MetaTrainConfig{};
    std::set<std::string> allowed{"sources"};
    for (const auto& [key, _] : allowed_json.items()) allowed.insert(key);
    check_keys(meta, allowed, "meta");
  }
  c.meta_sources = get_or(meta, "sources", c.meta_sources, "meta");
  meta.erase("sources");
  const bool has_arch = meta.contains("msm_arch");
  const bool has_seed = meta.contains("seed");
  nlohmann::json arch = has_arch ? meta["msm_arch"] : nlohmann::json::object();
  meta.erase("msm_arch");
  c.meta = meta.get<MetaTrainConfig>();
  c.meta.msm_arch = parse_arch(arch, c.dataset);
  if (!has_seed) c.meta.seed = derive_seed(c.master_seed, "meta");
  c.meta.source_checkpoints.clear();
  for (const auto& id : c.effective_meta_sources()) c.meta.source_checkpoints.push_back("zoo/" + id + ".mtaw");

  if (j.contains("eval")) {
    if (!j["eval"].is_array()) throw ConfigError("eval must be a list");
    c.eval.clear();
    for (const auto& e : j["eval"]) c.eval.push_back(parse_eval_entry(e, c.master_seed));
  } else {
    c.eval.front().seed = derive_seed(c.master_seed, "eval|" + c.eval.front().name);
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(j, seed_override);
}

std::string config_hash(const ExperimentConfig& config) {
  // Locations do not change results, so identical experiments written to
  // different directories share a hash.
  nlohmann::json j = config;
  j.erase("output_dir");
  j.erase("data_dir");
  return io::hex64(io::fnv1a64(j.dump()));
}

}  // namespace mta
