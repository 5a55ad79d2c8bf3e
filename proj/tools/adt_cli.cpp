// adt_cli: dataset generation, critic fitting, policy training, evaluation,
// ablations and the acceptance suite.
//
// Exit codes: 0 success, 1 acceptance failure, 2 usage or input error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adt/acceptance.hpp"
#include "adt/commands.hpp"

namespace {

// "key=value" strings from --set, layered after the config file.
adt::KeyValueConfig layered(const std::string& file, const std::vector<std::string>& sets) {
  adt::KeyValueConfig c;
  if (!file.empty()) c = adt::KeyValueConfig::load(file);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw adt::cmd::UsageError("--set expects key=value, got '" + kv + "'");
    c.set(adt::trim(kv.substr(0, eq)), adt::trim(kv.substr(eq + 1)));
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Autotuned decision transformer lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", adt::kToolVersion);

  std::string env, policy = "scripted", out, dataset, variant, critic, config_file, bundle, suite, level = "quick";
  std::size_t n = 3, episodes = 20;
  std::uint64_t seed = 0;
  std::optional<double> tau, gamma, rtg;
  std::optional<std::size_t> workers;
  std::vector<std::string> sets;
  bool sample = false;

  auto* gen = app.add_subcommand("gen-data", "Generate an offline dataset");
  gen->add_option("--env", env, "Built-in environment name or config file")->required();
  gen->add_option("--policy", policy, "Behavior policy: scripted, uniform, optimal, partial-demos");
  gen->add_option("--n", n, "Number of trajectories");
  gen->add_option("--seed", seed, "Seed");
  gen->add_option("--out", out, "Output directory")->required();

  auto* fit = app.add_subcommand("fit-critic", "Fit a critic or the exact in-sample value table");
  fit->add_option("--dataset", dataset, "Dataset file or gen-data directory")->required();
  fit->add_option("--variant", variant, "iql, hiql or exact-dp")->required();
  fit->add_option("--tau", tau, "Expectile");
  fit->add_option("--gamma", gamma, "Discount");
  fit->add_option("--config", config_file, "Key-value file with critic.* settings");
  fit->add_option("--set", sets, "Override a setting, key=value");
  fit->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a low-level policy bundle");
  tr->add_option("--variant", variant, "vadt, gadt or dt")->required();
  tr->add_option("--dataset", dataset, "Dataset file or gen-data directory")->required();
  tr->add_option("--critic", critic, "Critic directory (vadt: iql, gadt: hiql)");
  tr->add_option("--config", config_file, "Key-value settings file");
  tr->add_option("--set", sets, "Override a setting, key=value");
  tr->add_option("--seed", seed, "Training seed");
  tr->add_option("--out", out, "Bundle directory")->required();

  auto* ev = app.add_subcommand("eval", "Roll out a trained bundle");
  ev->add_option("--bundle", bundle, "Bundle directory")->required();
  ev->add_option("--env", env, "Environment (defaults to the bundle's)");
  ev->add_option("--episodes", episodes, "Episodes");
  ev->add_option("--seed", seed, "Evaluation seed");
  ev->add_option("--rtg", rtg, "Initial return-to-go for dt bundles");
  ev->add_flag("--sample", sample, "Sample actions instead of argmax");
  ev->add_option("--out", out, "Report directory")->required();

  auto* ab = app.add_subcommand("ablate", "Run an ablation grid");
  ab->add_option("--suite", suite, "Suite config file")->required();
  ab->add_option("--workers", workers, "Parallel worker processes");
  ab->add_option("--out", out, "Output directory")->required();

  auto* ver = app.add_subcommand("verify", "Run the acceptance suite");
  ver->add_option("--level", level, "quick or full")->check(CLI::IsMember({"quick", "full"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      adt::cmd::gen_data(env, policy, n, seed, out, std::cout);
    } else if (*fit) {
      auto c = layered(config_file, sets);
      if (tau) c.set("critic.tau", adt::format_number(*tau));
      if (gamma) c.set("critic.gamma", adt::format_number(*gamma));
      adt::cmd::fit_critic(dataset, variant, c, out, std::cout);
    } else if (*tr) {
      std::optional<adt::fs::path> critic_dir;
      if (!critic.empty()) critic_dir = critic;
      adt::cmd::train(variant, dataset, critic_dir, layered(config_file, sets), seed, out, std::cout);
    } else if (*ev) {
      std::optional<std::string> env_name;
      if (!env.empty()) env_name = env;
      adt::cmd::eval(bundle, env_name, episodes, seed, rtg, sample, out, std::cout);
    } else if (*ab) {
      adt::cmd::ablate(suite, workers, out, std::cout);
    } else if (*ver) {
      const auto ids = adt::acceptance::criteria_for(adt::acceptance::parse_level(level));
      const auto results = adt::acceptance::run(ids, std::cout, std::cerr);
      for (const auto& r : results)
        if (!r.pass) return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
