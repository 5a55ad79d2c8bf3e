#pragma once

// The CLI commands as library calls. Each writes into its own output
// directory together with a manifest.json.

#include <optional>
#include <ostream>
#include <string>

#include "adt/pipeline.hpp"

namespace adt::cmd {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_text(p))); }

inline void require_exists(const fs::path& p, const std::string& flag) {
  if (!fs::exists(p)) throw UsageError(flag + ": no such file or directory: " + p.string());
}

inline fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / "dataset.jsonl" : p; }

inline void print_config(std::ostream& log, const std::string& command, const std::string& resolved) {
  log << "# " << command << " resolved config\n" << resolved;
}

// gen-data: dataset.jsonl + manifest.json in `out`.
inline void gen_data(const std::string& env_name, const std::string& policy, std::size_t n, std::uint64_t seed,
                     const fs::path& out, std::ostream& log) {
  const auto env = envs::load(env_name);
  const auto behavior = parse_behavior_policy(policy);
  KeyValueConfig c;
  c.set("env", env_name);
  c.set("policy", policy);
  c.set("n", std::to_string(n));
  c.set("seed", std::to_string(seed));
  print_config(log, "gen-data", c.resolved());
  auto d = generate_dataset(env, behavior, n, seed);
  d.env_name = env_name;
  fs::create_directories(out);
  save_dataset((out / "dataset.jsonl").string(), d);
  write_manifest(out, "gen-data", c.resolved(), {seed}, {}, {"dataset.jsonl"});
  log << "wrote " << d.size() << " trajectories (" << d.transitions() << " transitions) to " << (out / "dataset.jsonl").string()
      << "\n";
}

// fit-critic: iql/hiql checkpoints or the exact-dp table.
inline void fit_critic(const fs::path& dataset, const std::string& variant, const KeyValueConfig& overrides,
                       const fs::path& out, std::ostream& log) {
  const fs::path file = dataset_file(dataset);
  require_exists(file, "--dataset");
  const auto d = load_dataset(file.string());
  const auto env = env_for(d);
  const auto kind = parse_critic_kind(variant);
  CriticConfig cc = recipe_for(env, kind == CriticKind::Hiql ? Variant::GAdt : Variant::VAdt).critic;
  KeyValueConfig defaults;
  write_settings(defaults, cc);
  check_keys(overrides, keys_of(defaults), "fit-critic");
  read_settings(overrides, cc);
  KeyValueConfig resolved = defaults;
  resolved.merge(overrides);
  resolved.set("variant", variant);
  print_config(log, "fit-critic", resolved.resolved());
  fs::create_directories(out);
  if (kind == CriticKind::ExactDp) {
    std::optional<std::size_t> horizon;
    if (cc.gamma >= 1.0) horizon = cc.horizon;
    const auto table = exact_dp(d, cc.gamma, horizon);
    KeyValueConfig k;
    k.set("kind", "exact-dp");
    k.set("env", d.env_name);
    k.set("env_hash", hex64(env.hash()));
    k.set("critic.gamma", format_number(cc.gamma));
    write_text(out / "critic.txt", k.resolved());
    write_text(out / "values.txt", table.to_text(&env));
    log << table.to_text(&env);
  } else {
    cc.validate();
    const auto critic = adt::fit_critic(d, env, kind, cc);
    save_critic(out, critic);
    ExactValueTable view;
    view.gamma = cc.gamma;
    // Goal-conditioned critics are shown toward the environment's goal.
    const bool show = kind == CriticKind::Iql || env.goals.size() == 1;
    for (std::size_t s : critic.net.support()) {
      if (!show) break;
      view.v[s] = kind == CriticKind::Iql ? critic.net.value(s) : critic.net.value(s, *env.goals.begin());
    }
    write_text(out / "values.txt", view.to_text(&env));
  }
  write_manifest(out, "fit-critic", resolved.resolved(), {cc.seed}, {{file.string(), file_hash(file)}},
                 {"critic.txt", "values.txt"});
  log << "wrote " << variant << " critic to " << out.string() << "\n";
}

// train: defaults < config file < flag overrides.
inline void train(const std::string& variant, const fs::path& dataset, const std::optional<fs::path>& critic_dir,
                  const KeyValueConfig& config, std::uint64_t seed, const fs::path& out, std::ostream& log) {
  const fs::path file = dataset_file(dataset);
  require_exists(file, "--dataset");
  const auto d = load_dataset(file.string());
  const auto env = env_for(d);
  const auto v = parse_variant(variant);
  Experiment x = recipe_for(env, v).with(config, "train");
  x.variant = v;
  x.env = d.env_name;
  std::optional<FittedCritic> critic;
  std::map<std::string, std::string> inputs{{file.string(), file_hash(file)}};
  if (v != Variant::Dt) {
    if (!critic_dir) throw UsageError("--critic is required for variant " + variant);
    require_exists(*critic_dir / "critic.txt", "--critic");
    critic = load_critic(*critic_dir);
    inputs[(*critic_dir / "critic.bin").string()] = file_hash(*critic_dir / "critic.bin");
  }
  auto resolved = x.to_config();
  resolved.set("seed", std::to_string(seed));
  print_config(log, "train", resolved.resolved());
  const auto b = train_policy(x, seed, env, d, critic ? &*critic : nullptr);
  save_bundle(out, b);
  write_manifest(out, "train", resolved.resolved(), {seed}, inputs, {"policy.bin", "bundle.txt", "curve.csv"});
  log << "trained " << variant << " policy, final loss "
      << (b.curve.empty() ? 0.0 : b.curve.back().value) << ", bundle at " << out.string() << "\n";
}

// eval: episodes.csv, prompts.csv, summary.json.
inline EvalReport eval(const fs::path& bundle, const std::optional<std::string>& env_name, std::size_t episodes,
                       std::uint64_t seed, std::optional<double> rtg, bool sample, const fs::path& out, std::ostream& log) {
  require_exists(bundle / "bundle.txt", "--bundle");
  const auto b = load_bundle(bundle);
  const auto env = envs::load(env_name.value_or(b.env_source));
  if (b.variant == Variant::Dt && !rtg) throw UsageError("--rtg is required for dt bundles");
  RolloutOptions o;
  o.episodes = episodes;
  o.seed = seed;
  o.sample = sample;
  KeyValueConfig c;
  c.set("bundle", bundle.string());
  c.set("env", env_name.value_or(b.env_source));
  c.set("episodes", std::to_string(episodes));
  c.set("seed", std::to_string(seed));
  c.set("sample", format_bool(sample));
  if (rtg) c.set("rtg", format_number(*rtg));
  print_config(log, "eval", c.resolved());
  const auto r = evaluate(b, env, o, rtg);
  write_report(out, r);
  write_manifest(out, "eval", c.resolved(), {seed}, {{(bundle / "policy.bin").string(), file_hash(bundle / "policy.bin")}},
                 {"episodes.csv", "prompts.csv", "summary.json"});
  log << "success rate " << r.success_rate() << ", mean return " << r.returns().mean << " over " << r.episodes.size()
      << " episodes\n";
  return r;
}

// ablate: matrix.csv plus one directory per cell and seed.
inline std::vector<AblationCell> ablate(const fs::path& suite_file, std::optional<std::size_t> workers,
                                        const fs::path& out, std::ostream& log) {
  require_exists(suite_file, "--suite");
  auto c = KeyValueConfig::load(suite_file.string());
  auto suite = AblationSuite::from_config(c);
  if (workers) suite.workers = std::max<std::size_t>(1, *workers);
  KeyValueConfig resolved = suite.base.to_config();
  std::string names;
  for (const auto& f : suite.factors) names += (names.empty() ? "" : " ") + f.name;
  resolved.set("suite.factors", names);
  resolved.set("suite.seeds", std::to_string(suite.seeds));
  resolved.set("suite.workers", std::to_string(suite.workers));
  print_config(log, "ablate", resolved.resolved());
  const auto cells = run_ablations(suite, out, &log);
  std::ostringstream os;
  write_ablation_csv(os, suite.factors, cells);
  write_text(out / "matrix.csv", os.str());
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < suite.seeds; ++s) seeds.push_back(s);
  write_manifest(out, "ablate", resolved.resolved(), seeds, {{suite_file.string(), file_hash(suite_file)}}, {"matrix.csv"});
  log << os.str();
  return cells;
}

}  // namespace adt::cmd
