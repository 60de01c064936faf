#include "mta/evaluator.hpp"

#include <charconv>
#include <sstream>

#include <fmt/format.h>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {

namespace {

constexpr std::string_view kCsvHeader = "attack,surrogate,target,epsilon,T_v,n,success_rate";

std::uint64_t cell_seed(std::uint64_t seed, const std::string& a, const std::string& b) {
  return seed ^ io::fnv1a64(a + "|" + b);
}

void check_id(const std::string& id) {
  if (id.empty() || id.find_first_of(",\n\r\"") != std::string::npos) {
    throw ConfigError("model id '" + id + "' must be non-empty and free of commas, quotes and newlines");
  }
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& source, std::size_t line) {
  T value{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw FormatError(source + ":" + std::to_string(line) + ": bad number '" + s + "'");
  }
  return value;
}

}  // namespace

ExampleBatch filter_correct(const Classifier& target, const ExampleBatch& data) {
  if (data.size() == 0) return data;
  const std::vector<int> pred = target.predict(data.images);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == data.labels[i]) keep.push_back(i);
  }
  return data.select(keep);
}

LogitEnsemble::LogitEnsemble(std::vector<const DifferentiableModel*> members) : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("logit ensemble needs at least one member");
  for (const auto* m : members_) {
    if (m->num_classes() != members_.front()->num_classes()) {
      throw ConfigError("logit ensemble members disagree on the number of classes");
    }
    if (m->input_shape() != members_.front()->input_shape()) {
      throw ConfigError("logit ensemble members disagree on the input shape");
    }
  }
}

ad::Var LogitEnsemble::forward(const ad::Var& images) const {
  ad::Var sum = members_.front()->forward(images);
  for (std::size_t i = 1; i < members_.size(); ++i) sum = ad::add(sum, members_[i]->forward(images));
  return members_.size() == 1 ? sum : ad::scale(sum, 1.0 / static_cast<double>(members_.size()));
}

std::size_t LogitEnsemble::num_classes() const { return members_.front()->num_classes(); }
Shape LogitEnsemble::input_shape() const { return members_.front()->input_shape(); }

Tensor ensemble_logits(std::span<const Classifier* const> sources, const Tensor& images) {
  std::vector<const DifferentiableModel*> members(sources.begin(), sources.end());
  const LogitEnsemble ensemble(std::move(members));
  ad::NoGradGuard no_grad;
  return ensemble.forward(ad::Var(images)).value();
}

std::vector<int> next_class_targets(std::span<const int> labels, std::size_t num_classes) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<int>((labels[i] + 1) % num_classes);
  return out;
}

void EvalSettings::validate() const {
  attack.validate();
  if (n_examples == 0) throw ConfigError("n_examples must be positive");
  if (chunk == 0) throw ConfigError("chunk must be positive");
}

ExampleBatch evaluation_set(const Target& target, const ExampleBatch& data, const EvalSettings& settings) {
  ExampleBatch correct = filter_correct(*target.model, data);
  if (correct.size() == 0) {
    throw ConfigError("target '" + target.id + "' classifies none of the evaluation examples correctly");
  }
  ExampleBatch out = sample_rows(correct, settings.n_examples, cell_seed(settings.seed, "eval-set", target.id));
  if (settings.attack.targeted) out.target_labels = next_class_targets(out.labels, target.model->num_classes());
  return out;
}

TransferRow evaluate_cell(const Surrogate& surrogate, const Target& target, const ExampleBatch& eval_set,
                          const EvalSettings& settings) {
  settings.validate();
  check_id(surrogate.id);
  check_id(target.id);
  if (eval_set.size() == 0) throw ConfigError("empty evaluation set for target '" + target.id + "'");
  if (settings.attack.targeted && !eval_set.target_labels) {
    throw ConfigError("targeted evaluation needs target labels");
  }
  const bool white_box = static_cast<const void*>(surrogate.model) == static_cast<const void*>(target.model);
  const std::size_t calls_before = target.model->recorded_forward_calls();
  const std::uint64_t seed = cell_seed(settings.seed, surrogate.id, target.id);

  std::vector<Tensor> parts;
  for (std::size_t begin = 0, k = 0; begin < eval_set.size(); begin += settings.chunk, ++k) {
    const ExampleBatch chunk = eval_set.slice(begin, std::min(eval_set.size(), begin + settings.chunk));
    parts.push_back(run_attack(settings.method, *surrogate.model, chunk, settings.attack, seed + k).images);
  }
  if (!white_box && target.model->recorded_forward_calls() != calls_before) {
    throw Error("black-box violation: gradients were recorded through target '" + target.id + "'");
  }
  const std::vector<int> pred = target.model->predict(concat_rows(parts));

  TransferRow row;
  row.attack = std::string(attack_method_name(settings.method)) + (settings.attack.targeted ? "-targeted" : "");
  row.surrogate = surrogate.id;
  row.target = target.id;
  row.epsilon = settings.method == AttackMethod::CustomizedPgd ? settings.attack.epsilon_c : settings.attack.epsilon;
  row.t_v = settings.attack.steps;
  row.n = eval_set.size();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool hit = settings.attack.targeted ? pred[i] == (*eval_set.target_labels)[i] : pred[i] != eval_set.labels[i];
    row.successes += hit ? 1 : 0;
  }
  row.success_rate = static_cast<double>(row.successes) / static_cast<double>(row.n);
  return row;
}

TransferReport transfer_eval(std::span<const Surrogate> surrogates, std::span<const Target> targets,
                             const ExampleBatch& data, const EvalSettings& settings) {
  settings.validate();
  if (targets.empty()) throw ConfigError("transfer evaluation needs at least one target");
  if (surrogates.empty()) throw ConfigError("transfer evaluation needs at least one surrogate");
  TransferReport report;
  report.seed = settings.seed;
  for (const auto& target : targets) {
    const ExampleBatch eval_set = evaluation_set(target, data, settings);
    for (const auto& surrogate : surrogates) report.rows.push_back(evaluate_cell(surrogate, target, eval_set, settings));
  }
  return report;
}

TransferReport targeted_eval(std::span<const Surrogate> surrogates, std::span<const Target> targets,
                             const ExampleBatch& data, EvalSettings settings) {
  settings.attack.targeted = true;
  return transfer_eval(surrogates, targets, data, settings);
}

std::string_view sweep_axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Tv: return "T_v";
    case SweepAxis::Epsilon: return "epsilon";
    case SweepAxis::TtCheckpoints: return "T_t";
  }
  return "T_v";
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "T_v" || name == "tv") return SweepAxis::Tv;
  if (name == "epsilon") return SweepAxis::Epsilon;
  if (name == "T_t" || name == "tt") return SweepAxis::TtCheckpoints;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "'");
}

TransferReport sweep(SweepAxis axis, std::span<const double> values, const SurrogatesFor& surrogates,
                     std::span<const Target> targets, const ExampleBatch& data, const EvalSettings& settings) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  TransferReport out;
  out.seed = settings.seed;
  for (double v : values) {
    EvalSettings s = settings;
    if (axis == SweepAxis::Tv) {
      if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw ConfigError("T_v sweep values must be positive integers");
      }
      s.attack.steps = static_cast<std::size_t>(v);
    } else if (axis == SweepAxis::Epsilon) {
      s.attack.epsilon = v;
    }
    const std::vector<Surrogate> list = surrogates(v);
    const TransferReport part = transfer_eval(list, targets, data, s);
    out.rows.insert(out.rows.end(), part.rows.begin(), part.rows.end());
  }
  return out;
}

double mean_success(const TransferReport& report, const std::string& surrogate) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : report.rows) {
    if (r.surrogate == surrogate) {
      sum += r.success_rate;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("no report rows for surrogate '" + surrogate + "'");
  return sum / static_cast<double>(n);
}

std::string TransferReport::to_csv() const {
  std::string out = fmt::format("# config_hash={}\n{}\n", config_hash, kCsvHeader);
  for (const auto& r : rows) {
    check_id(r.surrogate);
    check_id(r.target);
    out += fmt::format("{},{},{},{},{},{},{}\n", r.attack, r.surrogate, r.target, r.epsilon, r.t_v, r.n,
                       r.success_rate);
  }
  return out;
}

nlohmann::json TransferReport::to_json() const {
  auto rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"attack", r.attack}, {"surrogate", r.surrogate}, {"target", r.target},
                         {"epsilon", r.epsilon}, {"T_v", r.t_v}, {"n", r.n}, {"successes", r.successes},
                         {"success_rate", r.success_rate}});
  }
  return {{"metadata",
           {{"seed", seed}, {"config_hash", config_hash}, {"timestamp", timestamp},
            {"target_label_rule", target_label_rule}}},
          {"rows", rows_json}};
}

TransferReport TransferReport::from_csv(std::string_view text, const std::string& source) {
  TransferReport report;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      constexpr std::string_view key = "# config_hash=";
      if (line.starts_with(key)) report.config_hash = line.substr(key.size());
      continue;
    }
    if (!header_seen) {
      if (line != kCsvHeader) throw FormatError(source + ": unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 7) throw FormatError(source + ":" + std::to_string(lineno) + ": expected 7 columns");
    TransferRow r;
    r.attack = f[0];
    r.surrogate = f[1];
    r.target = f[2];
    r.epsilon = parse_number<double>(f[3], source, lineno);
    r.t_v = parse_number<std::size_t>(f[4], source, lineno);
    r.n = parse_number<std::size_t>(f[5], source, lineno);
    r.success_rate = parse_number<double>(f[6], source, lineno);
    if (!(r.success_rate >= 0.0 && r.success_rate <= 1.0) || r.n == 0) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": success rate or n out of range");
    }
    r.successes = static_cast<std::size_t>(std::llround(r.success_rate * static_cast<double>(r.n)));
    report.rows.push_back(std::move(r));
  }
  if (!header_seen) throw FormatError(source + ": missing header");
  return report;
}

TransferReport TransferReport::from_json(const nlohmann::json& j, const std::string& source) {
  TransferReport report;
  try {
    const auto& meta = j.at("metadata");
    report.seed = meta.at("seed").get<std::uint64_t>();
    report.config_hash = meta.at("config_hash").get<std::string>();
    report.timestamp = meta.value("timestamp", std::string());
    report.target_label_rule = meta.value("target_label_rule", report.target_label_rule);
    for (const auto& r : j.at("rows")) {
      TransferRow row;
      row.attack = r.at("attack").get<std::string>();
      row.surrogate = r.at("surrogate").get<std::string>();
      row.target = r.at("target").get<std::string>();
      row.epsilon = r.at("epsilon").get<double>();
      row.t_v = r.at("T_v").get<std::size_t>();
      row.n = r.at("n").get<std::size_t>();
      row.successes = r.at("successes").get<std::size_t>();
      row.success_rate = r.at("success_rate").get<double>();
      report.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  return report;
}

}  // namespace mta
