#include "mta/meta.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"

namespace mta {

namespace {

constexpr std::uint64_t kStreamSalt = 0x6d657461ULL;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& source, std::size_t line) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw FormatError(source + ":" + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

void MetaTrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (batch_size == 0) throw ConfigError("meta batch_size must be positive");
  if (inner_steps == 0) throw ConfigError("inner_steps must be >= 1");
  if (!(epsilon_c_init >= 0.0)) throw ConfigError("epsilon_c_init must be >= 0");
  if (!(epsilon_c_decay > 0.0 && epsilon_c_decay <= 1.0)) throw ConfigError("epsilon_c_decay must lie in (0, 1]");
  if (epsilon_c_decay_every == 0) throw ConfigError("epsilon_c_decay_every must be positive");
  if (!(gamma1 >= 0.0 && gamma2 >= 0.0)) throw ConfigError("gamma1 and gamma2 must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(eval_epsilon >= 0.0 && eval_epsilon <= 255.0)) throw ConfigError("eval_epsilon must lie in [0, 255]");
  if (eval_steps == 0 || eval_examples == 0) throw ConfigError("eval_steps and eval_examples must be positive");
  msm_arch.validate();
}

void to_json(nlohmann::json& j, const MetaTrainConfig& c) {
  j = {{"alpha", c.alpha},
       {"batch_size", c.batch_size},
       {"inner_steps", c.inner_steps},
       {"epochs", c.epochs},
       {"epsilon_c_init", c.epsilon_c_init},
       {"epsilon_c_decay", c.epsilon_c_decay},
       {"epsilon_c_decay_every", c.epsilon_c_decay_every},
       {"gamma1", c.gamma1},
       {"gamma2", c.gamma2},
       {"g1_weight", c.g1_weight},
       {"grad_clip", c.grad_clip},
       {"eval_every", c.eval_every},
       {"seed", c.seed},
       {"msm_arch", c.msm_arch},
       {"source_checkpoints", c.source_checkpoints},
       {"eval_epsilon", c.eval_epsilon},
       {"eval_steps", c.eval_steps},
       {"eval_examples", c.eval_examples}};
}

void from_json(const nlohmann::json& j, MetaTrainConfig& c) {
  if (!j.is_object()) throw ConfigError("meta config must be a JSON object");
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.epochs = j.value("epochs", c.epochs);
    c.epsilon_c_init = j.value("epsilon_c_init", c.epsilon_c_init);
    c.epsilon_c_decay = j.value("epsilon_c_decay", c.epsilon_c_decay);
    c.epsilon_c_decay_every = j.value("epsilon_c_decay_every", c.epsilon_c_decay_every);
    c.gamma1 = j.value("gamma1", c.gamma1);
    c.gamma2 = j.value("gamma2", c.gamma2);
    c.g1_weight = j.value("g1_weight", c.g1_weight);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    if (j.contains("msm_arch")) c.msm_arch = j.at("msm_arch").get<ArchitectureSpec>();
    c.source_checkpoints = j.value("source_checkpoints", c.source_checkpoints);
    c.eval_epsilon = j.value("eval_epsilon", c.eval_epsilon);
    c.eval_steps = j.value("eval_steps", c.eval_steps);
    c.eval_examples = j.value("eval_examples", c.eval_examples);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("meta config: ") + e.what());
  }
}

double epsilon_c_schedule(std::size_t iteration, const MetaTrainConfig& config) {
  const auto decays = static_cast<double>(iteration / config.epsilon_c_decay_every);
  return config.epsilon_c_init * std::pow(config.epsilon_c_decay, decays);
}

MetaObjective meta_objective(const Classifier& msm, std::span<const Classifier* const> sources,
                             const ExampleBatch& batch, double epsilon_c, const MetaTrainConfig& config) {
  if (sources.empty()) throw ConfigError("meta objective needs at least one source model");
  AttackConfig attack;
  attack.epsilon_c = epsilon_c;
  attack.steps = config.inner_steps;
  attack.gamma1 = config.gamma1;
  attack.gamma2 = config.gamma2;
  attack.g1_weight = config.g1_weight;
  ExampleBatch untargeted = batch;
  untargeted.target_labels.reset();

  ad::EnableGradGuard enable;
  const ad::Var x_adv = customized_pgd(msm, untargeted, attack, true);
  MetaObjective out;
  ad::Var total;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    ad::Var loss;
    try {
      loss = ad::mean_all(ad::cross_entropy(sources[i]->forward(x_adv), batch.labels));
    } catch (const NumericError& e) {
      throw NumericError("meta objective: source " + std::to_string(i) + ": " + e.what());
    }
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericError("meta objective: non-finite loss from source " + std::to_string(i));
    out.source_loss.push_back(v);
    total = total.defined() ? ad::add(total, loss) : loss;
  }
  out.value = total.value()[0];
  const std::vector<ad::Var> params = msm.parameters();
  for (auto& g : ad::grad(total, params)) out.gradient.push_back(g.value());
  return out;
}

MetaStepMetrics meta_step(Classifier& msm, std::span<const Classifier* const> sources, const ExampleBatch& batch,
                          std::size_t iteration, const MetaTrainConfig& config) {
  MetaStepMetrics m;
  m.iteration = iteration;
  m.epsilon_c = epsilon_c_schedule(iteration, config);
  MetaObjective obj = meta_objective(msm, sources, batch, m.epsilon_c, config);
  m.loss_sum = obj.value;
  m.source_loss = std::move(obj.source_loss);

  double sq = 0.0;
  for (const auto& g : obj.gradient) {
    for (double v : g.data()) sq += v * v;
  }
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) throw NumericError("meta step: non-finite meta-gradient");
  const double factor = config.grad_clip > 0.0 && m.grad_norm > config.grad_clip ? config.grad_clip / m.grad_norm : 1.0;

  const std::vector<ad::Var> params = msm.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].mutable_value();
    const Tensor& g = obj.gradient[i];
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += config.alpha * (factor * g[k]);
  }
  return m;
}

std::vector<double> snapshot_success(const Classifier& msm, const MetaTargets& targets, const MetaTrainConfig& config) {
  EvalSettings settings;
  settings.method = AttackMethod::Pgd;
  settings.attack.epsilon = config.eval_epsilon;
  settings.attack.steps = config.eval_steps;
  settings.seed = config.seed;
  const Surrogate surrogate{"msm", &msm};
  std::vector<double> out;
  for (std::size_t i = 0; i < targets.targets.size(); ++i) {
    out.push_back(evaluate_cell(surrogate, targets.targets[i], targets.eval_sets[i], settings).success_rate);
  }
  return out;
}

MetaTrainResult train_msm(const MetaTrainConfig& config, const MetaSources& sources, const ExampleBatch& train,
                          const MetaTargets& targets, const MetaStepCallback& on_step, Classifier* last_stable) {
  config.validate();
  if (sources.models.empty() || sources.models.size() != sources.ids.size()) {
    throw ConfigError("meta training needs at least one source model with an id");
  }
  if (targets.targets.size() != targets.eval_sets.size()) throw ConfigError("one evaluation set per target required");
  for (const auto* s : sources.models) {
    if (s->num_classes() != config.msm_arch.num_classes || s->input_shape() != config.msm_arch.input_shape) {
      throw ConfigError("source model does not match the surrogate's input shape or class count");
    }
  }

  MetaTrainResult result{Classifier(config.msm_arch, config.seed), {}};
  result.log.source_ids = sources.ids;
  for (const auto& t : targets.targets) result.log.target_ids.push_back(t.id);
  if (config.epochs == 0 || train.size() == 0) return result;

  Classifier& msm = result.msm;
  BatchStream stream(train, config.batch_size, config.seed ^ kStreamSalt);
  const std::size_t total = config.epochs * stream.batches_per_epoch();
  ExampleBatch batch;
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    while (stream.next(batch)) {
      const Tensor before = msm.flat_parameters();
      MetaStepMetrics m;
      try {
        m = meta_step(msm, sources.models, batch, iteration, config);
      } catch (const Error& e) {
        if (last_stable) {
          *last_stable = msm;
          last_stable->set_flat_parameters(before);
        }
        const std::string msg = "meta step at iteration " + std::to_string(iteration) + ": " + e.what();
        if (dynamic_cast<const NumericError*>(&e)) throw NumericError(msg);
        throw Error(msg);
      }
      MetaLogRecord rec{iteration, m.epsilon_c, m.loss_sum, std::move(m.source_loss), std::nullopt};
      const bool snapshot = iteration == 0 || (iteration + 1) % config.eval_every == 0 || iteration + 1 == total;
      if (snapshot && !targets.targets.empty()) rec.eval_success = snapshot_success(msm, targets, config);
      if (on_step) on_step(rec);
      result.log.records.push_back(std::move(rec));
      ++iteration;
    }
  }
  if (last_stable) *last_stable = msm;
  return result;
}

std::string MetaTrainLog::to_csv(const std::string& config_hash) const {
  std::string out = fmt::format("# config_hash={}\niteration,epsilon_c,loss_sum", config_hash);
  for (const auto& s : source_ids) out += ",loss_" + s;
  for (const auto& t : target_ids) out += ",success_" + t;
  out += '\n';
  for (const auto& r : records) {
    out += fmt::format("{},{},{}", r.iteration, r.epsilon_c, r.loss_sum);
    for (double l : r.source_loss) out += fmt::format(",{}", l);
    for (std::size_t t = 0; t < target_ids.size(); ++t) {
      out += ',';
      if (r.eval_success) out += fmt::format("{}", r.eval_success->at(t));
    }
    out += '\n';
  }
  return out;
}

MetaTrainLog MetaTrainLog::from_csv(std::string_view text, const std::string& source) {
  MetaTrainLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    const auto f = split_csv(line);
    if (!header) {
      if (f.size() < 3 || f[0] != "iteration" || f[1] != "epsilon_c" || f[2] != "loss_sum") {
        throw FormatError(source + ": not a meta-training log");
      }
      for (std::size_t i = 3; i < f.size(); ++i) {
        if (f[i].starts_with("loss_")) {
          log.source_ids.push_back(f[i].substr(5));
        } else if (f[i].starts_with("success_")) {
          log.target_ids.push_back(f[i].substr(8));
        } else {
          throw FormatError(source + ": unknown column '" + f[i] + "'");
        }
      }
      header = true;
      continue;
    }
    const std::size_t ns = log.source_ids.size(), nt = log.target_ids.size();
    if (f.size() != 3 + ns + nt) throw FormatError(source + ":" + std::to_string(lineno) + ": wrong column count");
    MetaLogRecord r;
    r.iteration = static_cast<std::size_t>(parse_double(f[0], source, lineno));
    r.epsilon_c = parse_double(f[1], source, lineno);
    r.loss_sum = parse_double(f[2], source, lineno);
    for (std::size_t i = 0; i < ns; ++i) r.source_loss.push_back(parse_double(f[3 + i], source, lineno));
    if (nt > 0 && !f[3 + ns].empty()) {
      std::vector<double> s;
      for (std::size_t i = 0; i < nt; ++i) s.push_back(parse_double(f[3 + ns + i], source, lineno));
      r.eval_success = std::move(s);
    }
    log.records.push_back(std::move(r));
  }
  if (!header) throw FormatError(source + ": missing header");
  return log;
}

std::vector<const MetaLogRecord*> MetaTrainLog::snapshots() const {
  std::vector<const MetaLogRecord*> out;
  for (const auto& r : records) {
    if (r.eval_success) out.push_back(&r);
  }
  return out;
}

}  // namespace mta
