#pragma once

// End-to-end experiment plumbing: recipes, training of the three policy
// variants, on-disk artifacts (critics and policy bundles) and the ablation
// grid.

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "adt/checkpoint.hpp"
#include "adt/critics.hpp"
#include "adt/dataset.hpp"
#include "adt/env.hpp"
#include "adt/eval.hpp"
#include "adt/policies.hpp"
#include "adt/settings.hpp"

namespace adt {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

enum class Variant { VAdt, GAdt, Dt };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::VAdt: return "vadt";
    case Variant::GAdt: return "gadt";
    case Variant::Dt: return "dt";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "vadt") return Variant::VAdt;
  if (s == "gadt") return Variant::GAdt;
  if (s == "dt") return Variant::Dt;
  throw ConfigError("unknown variant '" + s + "' (expected vadt, gadt or dt)");
}

inline std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment description

struct Experiment {
  Variant variant = Variant::VAdt;
  std::string env = "stitch";
  BehaviorPolicy data_policy = BehaviorPolicy::Scripted;
  std::size_t data_n = 3;
  std::uint64_t data_seed = 0;
  CriticConfig critic;
  ModelConfig model;
  TrainConfig train;
  HighLevelConfig high;
  std::string goal;  // G-ADT goal label; empty means the environment's only goal
  std::size_t episodes = 10;
  bool sample = false;
  std::size_t subgoal_every = 1;
  std::vector<double> rtg_grid{0.5, 1.0, 1.1, 1.5, 2.0};  // DT prompts, multiples of the best dataset return
  std::size_t dt_context_length = 20;                      // the DT baseline conditions on its history

  KeyValueConfig to_config() const {
    KeyValueConfig c;
    c.set("variant", to_string(variant));
    c.set("env", env);
    c.set("data.policy", to_string(data_policy));
    c.set("data.n", std::to_string(data_n));
    c.set("data.seed", std::to_string(data_seed));
    c.set("goal", goal);
    c.set("eval.episodes", std::to_string(episodes));
    c.set("eval.sample", format_bool(sample));
    c.set("eval.subgoal_every", std::to_string(subgoal_every));
    std::string grid;
    for (std::size_t i = 0; i < rtg_grid.size(); ++i) grid += (i ? " " : "") + format_number(rtg_grid[i]);
    c.set("dt.rtg_grid", grid);
    c.set("dt.context_length", std::to_string(dt_context_length));
    write_settings(c, critic);
    write_settings(c, model);
    write_settings(c, train);
    write_settings(c, high);
    return c;
  }

  // Overrides on top of `*this`; unknown keys are an error.
  Experiment with(const KeyValueConfig& c, const std::string& where = "config") const {
    check_keys(c, keys_of(to_config()), where);
    Experiment x = *this;
    if (c.has("variant")) x.variant = parse_variant(c.get("variant"));
    x.env = c.get("env", x.env);
    if (c.has("data.policy")) x.data_policy = parse_behavior_policy(c.get("data.policy"));
    x.data_n = c.get_size("data.n", x.data_n);
    x.data_seed = c.get_size("data.seed", x.data_seed);
    x.goal = c.get("goal", x.goal);
    x.episodes = c.get_size("eval.episodes", x.episodes);
    x.sample = c.get_bool("eval.sample", x.sample);
    x.subgoal_every = c.get_size("eval.subgoal_every", x.subgoal_every);
    if (c.has("dt.rtg_grid")) {
      x.rtg_grid.clear();
      for (const auto& w : split_words(c.get("dt.rtg_grid"))) x.rtg_grid.push_back(KeyValueConfig::to_double("dt.rtg_grid", w));
    }
    x.dt_context_length = c.get_size("dt.context_length", x.dt_context_length);
    if (x.dt_context_length == 0) throw ConfigError("dt.context_length must be >= 1");
    read_settings(c, x.critic);
    read_settings(c, x.model);
    read_settings(c, x.train);
    read_settings(c, x.high);
    x.critic.validate();
    x.train.validate();
    return x;
  }
};

// Desk-scale settings for the stitching fixture: one-step context, full-batch
// training and a tabular critic fitted to convergence.
inline Experiment stitch_recipe() {
  Experiment x;
  x.variant = Variant::VAdt;
  x.env = "stitch";
  x.data_policy = BehaviorPolicy::Scripted;
  x.data_n = 3;
  x.critic.arch = CriticArch::Tabular;
  x.critic.tau = 0.99;
  x.critic.gamma = 1.0;
  x.critic.lr = 0.05;
  x.critic.batch_size = 0;
  x.critic.steps = 3000;
  x.critic.polyak = 0.05;
  x.critic.horizon = 2;
  x.model.layers = 3;
  x.model.hidden_dim = 64;
  x.model.heads = 1;
  x.model.context_length = 1;
  x.train.alpha = 3.0;
  x.train.steps = 300;
  x.train.lr = 1e-3;
  x.train.warmup_steps = 20;
  x.train.batch_size = 0;
  x.episodes = 10;
  return x;
}

inline Experiment four_rooms_recipe() {
  Experiment x = stitch_recipe();
  x.variant = Variant::GAdt;
  x.env = "four-rooms";
  x.data_policy = BehaviorPolicy::PartialDemos;
  x.data_n = 400;
  x.critic.gamma = 0.99;
  x.critic.horizon = 60;
  x.train.alpha = 0.3;
  x.train.steps = 800;
  x.train.batch_size = 64;
  x.episodes = 20;
  return x;
}

// Recipe matching an environment: the four-rooms settings for that maze, the
// stitching settings (with the env's discount and horizon) elsewhere.
inline Experiment recipe_for(const GridWorldSpec& env, Variant v) {
  Experiment x = env.name == "four-rooms" ? four_rooms_recipe() : stitch_recipe();
  x.variant = v;
  x.env = env.name;
  x.critic.gamma = env.gamma;
  x.critic.horizon = env.horizon;
  return x;
}

// ---------------------------------------------------------------------------
// Pipeline stages

inline std::string dataset_text(const OfflineDataset& d) {
  std::ostringstream os;
  write_dataset(os, d);
  return os.str();
}

inline GridWorldSpec env_for(const OfflineDataset& d) {
  auto env = envs::load(d.env_name);
  if (env.hash() != d.env_hash) {
    throw std::runtime_error("dataset was generated for a different definition of environment '" + d.env_name + "'");
  }
  return env;
}

inline OfflineDataset make_dataset(const Experiment& x, const GridWorldSpec& env) {
  auto d = generate_dataset(env, x.data_policy, x.data_n, x.data_seed);
  d.env_name = x.env;
  return d;
}

enum class CriticKind { Iql, Hiql, ExactDp };

inline const char* to_string(CriticKind k) {
  return k == CriticKind::Iql ? "iql" : k == CriticKind::Hiql ? "hiql" : "exact-dp";
}

inline CriticKind parse_critic_kind(const std::string& s) {
  if (s == "iql") return CriticKind::Iql;
  if (s == "hiql") return CriticKind::Hiql;
  if (s == "exact-dp") return CriticKind::ExactDp;
  throw ConfigError("unknown critic variant '" + s + "' (expected iql, hiql or exact-dp)");
}

struct FittedCritic {
  CriticKind kind = CriticKind::Iql;
  std::string env_source;
  CriticConfig config;
  CriticNet net;
};

inline FittedCritic fit_critic(const OfflineDataset& d, const GridWorldSpec& env, CriticKind kind,
                               const CriticConfig& config) {
  if (kind == CriticKind::ExactDp) throw std::invalid_argument("fit_critic: exact-dp produces a table, not a critic");
  FittedCritic f;
  f.kind = kind;
  f.env_source = d.env_name;
  f.config = config;
  f.net = kind == CriticKind::Iql ? fit_iql(d, env, config) : fit_hiql(d, env, config);
  return f;
}

inline std::size_t resolve_goal(const GridWorldSpec& env, const std::string& label) {
  if (!label.empty()) return env.state_of_label(label);
  if (env.goals.size() != 1) {
    throw std::invalid_argument("environment '" + env.name + "' has " + std::to_string(env.goals.size()) +
                                " goals; pick one with goal = <label>");
  }
  return *env.goals.begin();
}

struct PolicyBundle {
  Variant variant = Variant::VAdt;
  std::string env_source;
  std::uint64_t env_hash = 0;
  std::uint64_t seed = 0;
  ModelConfig model_config;
  TrainConfig train;
  HighLevelConfig high_config;
  CausalTransformer model;
  std::vector<CurveRow> curve;
  std::optional<FittedCritic> critic;
  std::optional<SubgoalPolicy> high;
  std::size_t goal = 0;
  double max_return = 0.0;
  std::string dataset_hash;
  std::string critic_hash;
  std::string high_hash;
};

inline std::string params_hash(const ParameterList& p) { return hex64(checkpoint::hash(p)); }

inline PolicyBundle train_policy(const Experiment& x, std::uint64_t seed, const GridWorldSpec& env,
                                 OfflineDataset d, const FittedCritic* critic) {
  if (d.transitions() == 0) throw std::invalid_argument("train: empty dataset");
  PolicyBundle b;
  b.variant = x.variant;
  b.env_source = d.env_name;
  b.env_hash = env.hash();
  b.seed = seed;
  b.train = x.train;
  b.train.seed = seed;
  b.high_config = x.high;
  b.dataset_hash = hex64(fnv1a(dataset_text(d)));
  b.max_return = d.max_return();
  ModelConfig mc = x.model;
  mc.action_vocab = kNumActions;
  mc.state_dim = env.encoding_dim();
  mc.max_timestep = env.horizon + 1;
  mc.prompt_dim = 1;

  std::vector<double> weights;
  switch (x.variant) {
    case Variant::Dt:
      weights = relabel_rtg_prompts(d);
      mc.context_length = x.dt_context_length;
      break;
    case Variant::VAdt:
      if (!critic || critic->kind != CriticKind::Iql) throw std::invalid_argument("train vadt: needs an iql critic");
      weights = relabel_value_prompts(d, critic->net, b.train);
      b.critic = *critic;
      break;
    case Variant::GAdt: {
      if (!critic || critic->kind != CriticKind::Hiql) throw std::invalid_argument("train gadt: needs a hiql critic");
      b.goal = resolve_goal(env, x.goal);
      b.high_config.goals = critic->config;
      std::vector<LossPoint> high_curve;
      b.high = train_goal_high_level(d, critic->net, b.high_config, &high_curve);
      for (const auto& r : loss_rows(high_curve, seed, "high_loss")) b.curve.push_back(r);
      weights = relabel_goal_prompts(d, env, critic->net, *b.high, b.goal, b.train);
      mc.prompt_dim = env.encoding_dim();
      b.critic = *critic;
      b.high_hash = params_hash(b.high->parameters());
      break;
    }
  }
  if (b.critic) b.critic_hash = params_hash(b.critic->net.parameters());
  b.model_config = mc;
  auto trained = train_low_level(to_policy_trajectories(d, env, weights, b.train.use_prompt), mc, b.train);
  b.model = std::move(trained.model);
  for (const auto& r : loss_rows(trained.curve, seed, "loss")) b.curve.push_back(r);
  return b;
}

inline EvalReport evaluate(const PolicyBundle& b, const GridWorldSpec& env, const RolloutOptions& opt,
                           std::optional<double> rtg = std::nullopt, const IdealizedDTTable* seen = nullptr) {
  if (env.hash() != b.env_hash) throw std::invalid_argument("eval: bundle was trained on a different environment");
  switch (b.variant) {
    case Variant::VAdt:
      return rollout_vadt(env, b.critic->net, b.model, b.train.use_prompt, opt);
    case Variant::GAdt:
      return rollout_gadt(env, b.goal, *b.high, b.model, b.train.use_prompt, opt);
    case Variant::Dt:
      if (!rtg) throw std::invalid_argument("eval: the dt variant needs an initial return-to-go");
      return rollout_dt(env, b.model, *rtg, opt, seen);
  }
  throw std::logic_error("eval: unknown variant");
}

inline RolloutOptions rollout_options(const Experiment& x, std::uint64_t seed) {
  RolloutOptions o;
  o.episodes = x.episodes;
  o.seed = seed;
  o.sample = x.sample;
  o.subgoal_every = x.subgoal_every;
  return o;
}

// ---------------------------------------------------------------------------
// Artifacts

inline void write_manifest(const fs::path& dir, const std::string& command, const std::string& resolved_config,
                           const std::vector<std::uint64_t>& seeds, const std::map<std::string, std::string>& inputs,
                           const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = resolved_config;
  j["seeds"] = seeds;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["tool_version"] = kToolVersion;
  j["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

inline std::string join_keys(const std::set<std::size_t>& s) {
  std::string out;
  for (auto k : s) out += (out.empty() ? "" : " ") + std::to_string(k);
  return out;
}

inline std::set<std::size_t> parse_keys(const std::string& key, const std::string& text) {
  std::set<std::size_t> out;
  for (const auto& w : split_words(text)) out.insert(KeyValueConfig::to_size(key, w));
  return out;
}

inline void save_critic(const fs::path& dir, const FittedCritic& c) {
  fs::create_directories(dir);
  KeyValueConfig k;
  k.set("kind", to_string(c.kind));
  k.set("env", c.env_source);
  k.set("env_hash", hex64(c.net.env_hash()));
  k.set("support", join_keys(c.net.support()));
  write_settings(k, c.config);
  write_text(dir / "critic.txt", k.resolved());
  checkpoint::save_file((dir / "critic.bin").string(), c.net.parameters());
  std::vector<CurveRow> rows;
  for (const auto& p : c.net.curve()) {
    rows.push_back({p.step, c.config.seed, "value_loss", p.value_loss});
    if (c.kind == CriticKind::Iql) rows.push_back({p.step, c.config.seed, "q_loss", p.q_loss});
  }
  std::ostringstream os;
  write_curve_csv(os, rows);
  write_text(dir / "curve.csv", os.str());
}

inline FittedCritic load_critic(const fs::path& dir) {
  const auto k = KeyValueConfig::load((dir / "critic.txt").string());
  FittedCritic c;
  c.kind = parse_critic_kind(k.get("kind"));
  if (c.kind == CriticKind::ExactDp) throw std::invalid_argument(dir.string() + " holds an exact-dp table, not a critic");
  c.env_source = k.get("env");
  read_settings(k, c.config);
  const auto env = envs::load(c.env_source);
  if (hex64(env.hash()) != k.get("env_hash")) {
    throw std::runtime_error("critic " + dir.string() + " was fitted on a different environment definition");
  }
  c.net = CriticNet(env, c.kind == CriticKind::Hiql, c.config);
  ParameterList params = c.net.parameters();
  checkpoint::load_file((dir / "critic.bin").string(), params);
  c.net.mark_fitted(parse_keys("support", k.get("support")));
  return c;
}

inline void save_bundle(const fs::path& dir, const PolicyBundle& b) {
  fs::create_directories(dir);
  KeyValueConfig k;
  k.set("variant", to_string(b.variant));
  k.set("env", b.env_source);
  k.set("env_hash", hex64(b.env_hash));
  k.set("seed", std::to_string(b.seed));
  k.set("goal", std::to_string(b.goal));
  k.set("max_return", format_number(b.max_return));
  k.set("dataset_hash", b.dataset_hash);
  k.set("model.action_vocab", std::to_string(b.model_config.action_vocab));
  k.set("model.state_dim", std::to_string(b.model_config.state_dim));
  k.set("model.prompt_dim", std::to_string(b.model_config.prompt_dim));
  k.set("model.max_timestep", std::to_string(b.model_config.max_timestep));
  write_settings(k, b.model_config);
  write_settings(k, b.train);
  write_settings(k, b.high_config);
  if (b.critic) {
    k.set("critic_hash", b.critic_hash);
    save_critic(dir / "critic", *b.critic);
  }
  if (b.high) {
    k.set("high_hash", b.high_hash);
    k.set("high.observed", join_keys(b.high->observed_keys()));
    checkpoint::save_file((dir / "subgoal.bin").string(), b.high->parameters());
  }
  write_text(dir / "bundle.txt", k.resolved());
  checkpoint::save_file((dir / "policy.bin").string(), b.model.parameters());
  std::ostringstream os;
  write_curve_csv(os, b.curve);
  write_text(dir / "curve.csv", os.str());
}

// Rebuilds a bundle and checks that the stored critic and subgoal policy are
// the ones the low level was trained against.
inline PolicyBundle load_bundle(const fs::path& dir) {
  if (!fs::exists(dir / "bundle.txt")) throw std::runtime_error(dir.string() + " is not a policy bundle");
  const auto k = KeyValueConfig::load((dir / "bundle.txt").string());
  PolicyBundle b;
  b.variant = parse_variant(k.get("variant"));
  b.env_source = k.get("env");
  const auto env = envs::load(b.env_source);
  if (hex64(env.hash()) != k.get("env_hash")) throw std::runtime_error("bundle environment definition changed");
  b.env_hash = env.hash();
  b.seed = k.get_size("seed", 0);
  b.goal = k.get_size("goal", 0);
  b.max_return = k.get_double("max_return", 0.0);
  b.dataset_hash = k.get("dataset_hash", "");
  read_settings(k, b.model_config);
  b.model_config.action_vocab = k.get_size("model.action_vocab", kNumActions);
  b.model_config.state_dim = k.get_size("model.state_dim", 1);
  b.model_config.prompt_dim = k.get_size("model.prompt_dim", 1);
  b.model_config.max_timestep = k.get_size("model.max_timestep", 256);
  read_settings(k, b.train);
  b.train.seed = b.seed;
  read_settings(k, b.high_config);
  b.model = CausalTransformer(b.model_config, b.seed);
  ParameterList params = b.model.parameters();
  checkpoint::load_file((dir / "policy.bin").string(), params);
  if (k.has("critic_hash")) {
    b.critic = load_critic(dir / "critic");
    b.critic_hash = params_hash(b.critic->net.parameters());
    if (b.critic_hash != k.get("critic_hash")) throw std::runtime_error("bundle critic does not match its provenance hash");
  }
  if (k.has("high_hash")) {
    b.high = SubgoalPolicy(env.num_states());
    ParameterList hp = b.high->parameters();
    checkpoint::load_file((dir / "subgoal.bin").string(), hp);
    b.high->set_observed(parse_keys("high.observed", k.get("high.observed")));
    b.high_hash = params_hash(b.high->parameters());
    if (b.high_hash != k.get("high_hash")) throw std::runtime_error("bundle subgoal policy does not match its provenance hash");
  }
  if (b.variant == Variant::VAdt && !b.critic) throw std::runtime_error("vadt bundle without a critic");
  if (b.variant == Variant::GAdt && (!b.critic || !b.high)) throw std::runtime_error("gadt bundle without its high level");
  return b;
}

inline void write_report(const fs::path& dir, const EvalReport& r) {
  std::ostringstream episodes, prompts;
  write_episodes_csv(episodes, r);
  write_prompt_trace_csv(prompts, r);
  write_text(dir / "episodes.csv", episodes.str());
  write_text(dir / "prompts.csv", prompts.str());
  write_text(dir / "summary.json", summary_json(r, true).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Ablation grid

struct Factor {
  std::string name;                 // weights | prompt | tokenization
  std::vector<std::string> levels;
};

inline Factor make_factor(const std::string& name) {
  if (name == "weights" || name == "prompt") return {name, {"on", "off"}};
  if (name == "tokenization") return {name, {"concat", "separate"}};
  throw ConfigError("unknown ablation factor '" + name + "' (expected weights, prompt or tokenization)");
}

inline void apply_level(Experiment& x, const std::string& factor, const std::string& level) {
  if (factor == "weights") x.train.use_weights = level == "on";
  if (factor == "prompt") x.train.use_prompt = level == "on";
  if (factor == "tokenization") x.model.tokenization = parse_tokenization(level);
}

struct AblationSuite {
  Experiment base = stitch_recipe();
  std::vector<Factor> factors{make_factor("weights"), make_factor("prompt"), make_factor("tokenization")};
  std::size_t seeds = 10;
  std::size_t workers = 1;

  // suite.factors / suite.seeds / suite.workers plus any experiment key.
  static AblationSuite from_config(const KeyValueConfig& c) {
    AblationSuite s;
    KeyValueConfig rest;
    for (const auto& [k, v] : c.entries()) {
      if (k.rfind("suite.", 0) != 0) rest.set(k, v);
    }
    Experiment start = stitch_recipe();
    if (rest.has("env") && rest.get("env") == "four-rooms") start = four_rooms_recipe();
    s.base = start.with(rest, "suite");
    if (c.has("suite.factors")) {
      s.factors.clear();
      for (const auto& f : split_words(c.get("suite.factors"))) s.factors.push_back(make_factor(f));
    }
    s.seeds = c.get_size("suite.seeds", s.seeds);
    s.workers = std::max<std::size_t>(1, c.get_size("suite.workers", s.workers));
    for (const auto& [k, v] : c.with_prefix("suite.")) {
      if (k != "factors" && k != "seeds" && k != "workers") throw ConfigError("suite: unknown config key 'suite." + k + "'");
    }
    return s;
  }

  std::vector<std::map<std::string, std::string>> cells() const {
    std::vector<std::map<std::string, std::string>> out{{}};
    for (const auto& f : factors) {
      std::vector<std::map<std::string, std::string>> next;
      for (const auto& partial : out)
        for (const auto& level : f.levels) {
          auto m = partial;
          m[f.name] = level;
          next.push_back(m);
        }
      out = std::move(next);
    }
    return out;
  }
};

inline std::string cell_name(const std::vector<Factor>& factors, const std::map<std::string, std::string>& levels) {
  std::string out;
  for (const auto& f : factors) out += (out.empty() ? "" : "_") + f.name + "-" + levels.at(f.name);
  return out.empty() ? "base" : out;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  double success = 0.0;
  double mean_return = 0.0;
  std::string error;
};

struct AblationCell {
  std::map<std::string, std::string> levels;
  std::string name;
  std::vector<SeedOutcome> outcomes;

  std::vector<double> metric(bool success) const {
    std::vector<double> v;
    for (const auto& o : outcomes)
      if (o.ok) v.push_back(success ? o.success : o.mean_return);
    return v;
  }
  std::size_t failed() const {
    std::size_t n = 0;
    for (const auto& o : outcomes) n += o.ok ? 0 : 1;
    return n;
  }
};

namespace detail {

struct SuiteContext {
  GridWorldSpec env;
  OfflineDataset data;
  std::optional<FittedCritic> critic;
};

inline SeedOutcome run_job(const SuiteContext& ctx, const Experiment& x, std::uint64_t seed,
                           const std::optional<fs::path>& dir) {
  SeedOutcome o;
  o.seed = seed;
  try {
    const auto b = train_policy(x, seed, ctx.env, ctx.data, ctx.critic ? &*ctx.critic : nullptr);
    std::optional<double> rtg;
    if (x.variant == Variant::Dt) rtg = b.max_return;
    const auto r = evaluate(b, ctx.env, rollout_options(x, seed), rtg);
    o.ok = true;
    o.success = r.success_rate();
    o.mean_return = r.returns().mean;
    if (dir) {
      write_report(*dir, r);
      std::ostringstream os;
      write_curve_csv(os, b.curve);
      write_text(*dir / "curve.csv", os.str());
    }
  } catch (const std::exception& e) {
    o.ok = false;
    o.error = e.what();
  }
  return o;
}

inline nlohmann::json outcome_json(const SeedOutcome& o) {
  return {{"seed", o.seed}, {"ok", o.ok}, {"success_rate", o.success}, {"mean_return", o.mean_return}, {"error", o.error}};
}

inline SeedOutcome outcome_from_json(const nlohmann::json& j) {
  SeedOutcome o;
  o.seed = j.at("seed").get<std::uint64_t>();
  o.ok = j.at("ok").get<bool>();
  o.success = j.at("success_rate").get<double>();
  o.mean_return = j.at("mean_return").get<double>();
  o.error = j.at("error").get<std::string>();
  return o;
}

}  // namespace detail

// Full factorial over the suite's factors, `seeds` training runs per cell.
// The dataset and critic are shared by every cell. With workers > 1 the runs
// fan out to forked processes that report through `out_dir`. A failed run is
// recorded in its cell and the suite continues.
inline std::vector<AblationCell> run_ablations(const AblationSuite& suite, const std::optional<fs::path>& out_dir,
                                               std::ostream* log = nullptr) {
  if (suite.workers > 1 && !out_dir) throw std::invalid_argument("ablate: parallel workers need an output directory");
  detail::SuiteContext ctx;
  ctx.env = envs::load(suite.base.env);
  ctx.data = make_dataset(suite.base, ctx.env);
  if (suite.base.variant == Variant::VAdt) ctx.critic = fit_critic(ctx.data, ctx.env, CriticKind::Iql, suite.base.critic);
  if (suite.base.variant == Variant::GAdt) ctx.critic = fit_critic(ctx.data, ctx.env, CriticKind::Hiql, suite.base.critic);

  std::vector<AblationCell> cells;
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
    Experiment x;
    std::optional<fs::path> dir;
  };
  std::vector<Job> jobs;
  for (const auto& levels : suite.cells()) {
    AblationCell c;
    c.levels = levels;
    c.name = cell_name(suite.factors, levels);
    Experiment x = suite.base;
    for (const auto& [f, l] : levels) apply_level(x, f, l);
    for (std::uint64_t seed = 0; seed < suite.seeds; ++seed) {
      std::optional<fs::path> dir;
      if (out_dir) dir = *out_dir / "cells" / c.name / ("seed" + std::to_string(seed));
      jobs.push_back({cells.size(), seed, x, dir});
    }
    cells.push_back(std::move(c));
  }

  std::vector<SeedOutcome> results(jobs.size());
  if (suite.workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      results[i] = detail::run_job(ctx, jobs[i].x, jobs[i].seed, jobs[i].dir);
      if (log) *log << cells[jobs[i].cell].name << " seed " << jobs[i].seed << (results[i].ok ? " ok" : " FAILED") << "\n";
    }
  } else {
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    auto reap = [&]() {
      int status = 0;
      const pid_t pid = wait(&status);
      if (pid <= 0) return;
      const std::size_t i = running.at(pid);
      running.erase(pid);
      try {
        results[i] = detail::outcome_from_json(nlohmann::json::parse(read_text(*jobs[i].dir / "outcome.json")));
      } catch (const std::exception& e) {
        results[i].seed = jobs[i].seed;
        results[i].error = std::string("worker exited without a result: ") + e.what();
      }
      if (log) *log << cells[jobs[i].cell].name << " seed " << jobs[i].seed << (results[i].ok ? " ok" : " FAILED") << "\n";
    };
    while (next < jobs.size() || !running.empty()) {
      if (next < jobs.size() && running.size() < suite.workers) {
        fs::create_directories(*jobs[next].dir);
        if (log) log->flush();
        const pid_t pid = fork();
        if (pid < 0) throw std::runtime_error("ablate: fork failed");
        if (pid == 0) {
          const auto o = detail::run_job(ctx, jobs[next].x, jobs[next].seed, jobs[next].dir);
          try {
            write_text(*jobs[next].dir / "outcome.json", detail::outcome_json(o).dump() + "\n");
          } catch (...) {
            _exit(3);
          }
          _exit(0);
        }
        running[pid] = next++;
      } else {
        reap();
      }
    }
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) cells[jobs[i].cell].outcomes.push_back(results[i]);
  return cells;
}

// Mean and 95% half-width over the seeds of every cell at `factor = level`.
inline Estimate marginal(const std::vector<AblationCell>& cells, const std::string& factor, const std::string& level,
                         bool success = true) {
  std::vector<double> v;
  for (const auto& c : cells) {
    auto it = c.levels.find(factor);
    if (it == c.levels.end() || it->second != level) continue;
    for (double x : c.metric(success)) v.push_back(x);
  }
  return estimate(v);
}

inline void write_ablation_csv(std::ostream& os, const std::vector<Factor>& factors, const std::vector<AblationCell>& cells) {
  for (const auto& f : factors) os << f.name << ',';
  os << "seeds,failed,success_mean,success_ci95,return_mean,return_ci95\n";
  for (const auto& c : cells) {
    for (const auto& f : factors) os << c.levels.at(f.name) << ',';
    const auto s = estimate(c.metric(true)), r = estimate(c.metric(false));
    os << c.outcomes.size() << ',' << c.failed() << ',' << format_number(s.mean) << ',' << format_number(s.half_width)
       << ',' << format_number(r.mean) << ',' << format_number(r.half_width) << '\n';
  }
}

}  // namespace adt
