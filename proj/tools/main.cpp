#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mta/commands.hpp"
#include "mta/errors.hpp"

int main(int argc, char** argv) {
  using namespace mta::cli;
  CLI::App app{"Meta-surrogate transfer attacks: train a model zoo, meta-train a surrogate, craft and evaluate attacks"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string output;
  std::size_t epochs = 0;
  double epsilon = 0.0;
  std::size_t tv = 0;
  bool targeted = false;
  std::size_t inner_steps = 0;
  AttackOptions attack;
  std::string input;
  ReportOptions report;
  std::vector<std::string> inputs;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed, replacing the config's");
    sub->add_option("--output", output, "Output directory, replacing the config's");
  };

  CLI::App* zoo = app.add_subcommand("train-zoo", "Train every zoo entry and write zoo/manifest.json");
  common(zoo);
  zoo->add_option("--epochs", epochs, "Epochs for every zoo recipe");

  CLI::App* msm = app.add_subcommand("train-msm", "Meta-train the surrogate against the source models");
  common(msm);
  msm->add_option("--epochs", epochs, "Meta-training epochs");
  msm->add_option("--inner-steps", inner_steps, "Train msm-tt<N> with N unrolled attack steps")->check(CLI::PositiveNumber);

  CLI::App* atk = app.add_subcommand("attack", "Craft adversarial examples on one surrogate");
  common(atk);
  atk->add_option("--surrogate", attack.surrogate, "msm, msm-init, msm-tt<N>, ensemble or a zoo id");
  atk->add_option("--eval", attack.eval_name, "Eval entry supplying the attack settings (default: first)");
  atk->add_option("--count", attack.count, "Test images to attack");
  atk->add_option("--input", input, "float64 .npy of clean images (N, H, W, C)")->check(CLI::ExistingFile);

  CLI::App* eval = app.add_subcommand("evaluate", "Run the configured transfer evaluations");
  common(eval);

  for (CLI::App* sub : {atk, eval}) {
    sub->add_option("--epsilon", epsilon, "L-inf budget in pixel units");
    sub->add_option("--tv", tv, "Attack iterations T_v")->check(CLI::PositiveNumber);
    sub->add_flag("--targeted", targeted, "Targeted attacks toward (y+1) mod K");
  }

  CLI::App* rep = app.add_subcommand("report", "Merge reports and plot curves along swept axes");
  common(rep);
  rep->add_option("reports", inputs, "Report files (.csv or .json)")->required()->check(CLI::ExistingFile);
  rep->add_flag("--force", report.force, "Merge reports with differing config hashes");

  CLI11_PARSE(app, argc, argv);

  try {
    Overrides o;
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--output")) o.output = output;
    if (sub->get_option_no_throw("--epochs") && sub->count("--epochs")) o.epochs = epochs;
    if (sub->get_option_no_throw("--epsilon") && sub->count("--epsilon")) o.epsilon = epsilon;
    if (sub->get_option_no_throw("--tv") && sub->count("--tv")) o.tv = tv;
    o.targeted = targeted;

    if (sub == zoo) return cmd_train_zoo(resolve_config(config_path, o, Command::TrainZoo), std::cerr);
    if (sub == msm) {
      TrainMsmOptions opts;
      if (msm->count("--inner-steps")) opts.inner_steps = inner_steps;
      return cmd_train_msm(resolve_config(config_path, o, Command::TrainMsm), opts, std::cerr);
    }
    if (sub == atk) {
      if (!input.empty()) attack.input = input;
      return cmd_attack(resolve_config(config_path, o, Command::Attack), attack, std::cerr);
    }
    if (sub == eval) return cmd_evaluate(resolve_config(config_path, o, Command::Evaluate), std::cerr);
    report.inputs.assign(inputs.begin(), inputs.end());
    return cmd_report(resolve_config(config_path, o, Command::Report), report, std::cerr);
  } catch (const mta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const mta::NotFoundError& e) {
    std::cerr << "not found: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
