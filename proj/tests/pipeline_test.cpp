#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "adt/pipeline.hpp"

namespace adt {
namespace {

std::size_t cell(const GridWorldSpec& env, char label) { return env.state_of_label(std::string(1, label)); }

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("adt_pipeline_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CausalTransformer untrained(const GridWorldSpec& env, std::size_t prompt_dim, std::size_t K = 2) {
  ModelConfig mc;
  mc.layers = 1;
  mc.hidden_dim = 16;
  mc.context_length = K;
  mc.state_dim = env.encoding_dim();
  mc.prompt_dim = prompt_dim;
  mc.max_timestep = env.horizon + 1;
  return CausalTransformer(mc, 3);
}

TEST(Estimate, NormalApproximation) {
  const std::vector<double> xs{1.0, 2.0, 4.0, 7.0};
  const auto e = estimate(xs);
  // mean 3.5, sample variance (6.25 + 2.25 + 0.25 + 12.25) / 3 = 7
  EXPECT_DOUBLE_EQ(e.mean, 3.5);
  EXPECT_NEAR(e.half_width, 1.96 * std::sqrt(7.0) / 2.0, 1e-12);
  EXPECT_EQ(e.n, 4u);
  EXPECT_EQ(estimate({}).n, 0u);
  EXPECT_DOUBLE_EQ(estimate({5.0}).half_width, 0.0);
}

TEST(Rollout, ZeroEpisodes) {
  const auto env = envs::builtin("stitch");
  RolloutOptions o;
  o.episodes = 0;
  const auto r = rollout_dt(env, untrained(env, 1), 10.0, o);
  EXPECT_TRUE(r.episodes.empty());
  EXPECT_DOUBLE_EQ(r.success_rate(), 0.0);
  EXPECT_EQ(r.returns().n, 0u);
}

TEST(Rollout, StartingAtTheGoalSucceedsImmediately) {
  const auto env = envs::builtin("stitch");
  RolloutOptions o;
  o.episodes = 3;
  o.start = cell(env, 'e');
  const auto r = rollout_dt(env, untrained(env, 1), 10.0, o);
  for (const auto& e : r.episodes) {
    EXPECT_TRUE(e.success);
    EXPECT_EQ(e.length(), 0u);
    EXPECT_DOUBLE_EQ(e.ret, 0.0);
  }
}

TEST(Rollout, ReturnToGoIsDecrementedByRewards) {
  const auto env = envs::builtin("stitch");
  RolloutOptions o;
  o.episodes = 40;
  o.sample = true;
  const double r0 = 7.5;
  const auto r = rollout_dt(env, untrained(env, 1), r0, o);
  for (const auto& e : r.episodes) {
    ASSERT_EQ(e.prompts.size(), e.length());
    double collected = 0.0;
    for (std::size_t t = 0; t < e.length(); ++t) {
      EXPECT_DOUBLE_EQ(e.prompts[t][0], r0 - collected);
      collected += env.reward(e.path[t], e.actions[t]);
    }
    EXPECT_DOUBLE_EQ(collected, e.ret);
    if (e.ret == 0.0)
      for (const auto& p : e.prompts) EXPECT_DOUBLE_EQ(p[0], r0);
  }
}

TEST(Rollout, PathsFollowTheDynamics) {
  const auto env = envs::builtin("open5");
  RolloutOptions o;
  o.episodes = 10;
  o.sample = true;
  const auto r = rollout_dt(env, untrained(env, 1), -3.0, o);
  for (const auto& e : r.episodes) {
    ASSERT_EQ(e.path.size(), e.length() + 1);
    EXPECT_LE(e.length(), env.horizon);
    for (std::size_t t = 0; t < e.length(); ++t) EXPECT_EQ(e.path[t + 1], env.next_state(e.path[t], e.actions[t]));
    EXPECT_EQ(e.success, env.is_goal(e.path.back()));
    EXPECT_DOUBLE_EQ(e.normalized, env.normalized_score(e.ret));
  }
}

TEST(Rollout, EpisodesDoNotDependOnEpisodeCount) {
  const auto env = envs::builtin("open5");
  const auto model = untrained(env, 1);
  RolloutOptions o;
  o.sample = true;
  o.seed = 11;
  o.episodes = 3;
  const auto few = rollout_dt(env, model, -5.0, o);
  o.episodes = 8;
  const auto many = rollout_dt(env, model, -5.0, o);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(few.episodes[i].path, many.episodes[i].path);
    EXPECT_EQ(few.episodes[i].actions, many.episodes[i].actions);
  }
  o.seed = 12;
  o.episodes = 3;
  const auto other = rollout_dt(env, model, -5.0, o);
  bool differs = false;
  for (std::size_t i = 0; i < 3; ++i) differs |= other.episodes[i].path != few.episodes[i].path;
  EXPECT_TRUE(differs);
}

TEST(Rollout, DimensionMismatchIsAnError) {
  const auto stitch = envs::builtin("stitch");
  const auto open5 = envs::builtin("open5");
  RolloutOptions o;
  EXPECT_THROW(rollout_dt(open5, untrained(stitch, 1), 0.0, o), std::invalid_argument);
  EXPECT_THROW(rollout_dt(stitch, untrained(stitch, 2), 0.0, o), std::invalid_argument);
  SubgoalPolicy high(stitch.num_states());
  EXPECT_THROW(rollout_gadt(stitch, cell(stitch, 'e'), high, untrained(stitch, 1), true, o), std::invalid_argument);
  SubgoalPolicy wrong(3);
  EXPECT_THROW(rollout_gadt(stitch, cell(stitch, 'e'), wrong, untrained(stitch, stitch.encoding_dim()), true, o),
               std::invalid_argument);
}

TEST(Rollout, TableRolloutsFollowTheData) {
  const auto env = envs::builtin("stitch");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  const IdealizedDTTable table(d);
  RolloutOptions o;
  o.episodes = 5;
  const auto r = rollout_table(env, table, 10.0, o);
  for (const auto& e : r.episodes) {
    EXPECT_LT(e.ret, 10.0);
    EXPECT_FALSE(e.success);
    EXPECT_GT(e.ood_prompts, 0u);
  }
}

TEST(Writers, EpisodesCsv) {
  const auto env = envs::builtin("stitch");
  RolloutOptions o;
  o.episodes = 2;
  o.sample = true;
  const auto r = rollout_dt(env, untrained(env, 1), 10.0, o);
  std::ostringstream a, b;
  write_episodes_csv(a, r);
  write_episodes_csv(b, rollout_dt(env, untrained(env, 1), 10.0, o));
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "variant,seed,episode,return,normalized_score,success,length,ood_prompts,path");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2u);
}

TEST(Writers, PromptTraceHasOneRowPerStep) {
  const auto env = envs::builtin("open5");
  RolloutOptions o;
  o.episodes = 3;
  o.sample = true;
  const auto r = rollout_dt(env, untrained(env, 1), -2.0, o);
  std::ostringstream os;
  write_prompt_trace_csv(os, r);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "episode,step,state,action,prompt");
  std::size_t rows = 0, steps = 0;
  while (std::getline(in, line)) ++rows;
  for (const auto& e : r.episodes) steps += e.length();
  EXPECT_EQ(rows, steps);
}

TEST(Writers, SummaryTimingIsOptional) {
  EvalReport r;
  r.variant = "dt";
  r.wall_clock_seconds = 1.5;
  EXPECT_FALSE(summary_json(r, false).contains("wall_clock_seconds"));
  EXPECT_TRUE(summary_json(r, true).contains("wall_clock_seconds"));
}

TEST(Experiment, ConfigRoundTrip) {
  const auto x = four_rooms_recipe();
  const auto y = stitch_recipe().with(x.to_config());
  EXPECT_EQ(y.to_config().resolved(), x.to_config().resolved());
}

TEST(Experiment, UnknownKeysAreRejected) {
  KeyValueConfig c;
  c.set("train.alpah", "2");
  EXPECT_THROW(stitch_recipe().with(c), ConfigError);
}

TEST(Experiment, LaterLayersWin) {
  KeyValueConfig c;
  c.set("train.alpha", "0.5");
  c.set("critic.tau", "0.8");
  const auto x = stitch_recipe().with(c);
  EXPECT_DOUBLE_EQ(x.train.alpha, 0.5);
  EXPECT_DOUBLE_EQ(x.critic.tau, 0.8);
  EXPECT_EQ(x.model.layers, stitch_recipe().model.layers);
}

class StitchBundle : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    env_ = new GridWorldSpec(envs::builtin("stitch"));
    Experiment x = stitch_recipe();
    x.train.steps = 60;
    const auto d = make_dataset(x, *env_);
    const auto critic = fit_critic(d, *env_, CriticKind::Iql, x.critic);
    bundle_ = new PolicyBundle(train_policy(x, 4, *env_, d, &critic));
  }
  static void TearDownTestSuite() {
    delete bundle_;
    delete env_;
  }
  static GridWorldSpec* env_;
  static PolicyBundle* bundle_;
};
GridWorldSpec* StitchBundle::env_ = nullptr;
PolicyBundle* StitchBundle::bundle_ = nullptr;

TEST_F(StitchBundle, SaveLoadRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  save_bundle(dir, *bundle_);
  const auto b = load_bundle(dir);
  EXPECT_EQ(b.variant, Variant::VAdt);
  EXPECT_EQ(b.critic_hash, bundle_->critic_hash);
  EXPECT_EQ(params_hash(b.model.parameters()), params_hash(bundle_->model.parameters()));
  RolloutOptions o;
  o.episodes = 3;
  std::ostringstream a, c;
  write_episodes_csv(a, evaluate(*bundle_, *env_, o));
  write_episodes_csv(c, evaluate(b, *env_, o));
  EXPECT_EQ(a.str(), c.str());
  fs::remove_all(dir);
}

TEST_F(StitchBundle, TamperedCriticIsDetected) {
  const auto dir = temp_dir("tamper");
  save_bundle(dir, *bundle_);
  auto text = read_text(dir / "bundle.txt");
  const auto at = text.find("critic_hash = ");
  ASSERT_NE(at, std::string::npos);
  text.replace(at + 14, 16, "0000000000000000");
  write_text(dir / "bundle.txt", text);
  EXPECT_THROW(load_bundle(dir), std::runtime_error);
  fs::remove_all(dir);
}

TEST_F(StitchBundle, WrongEnvironmentIsRejected) {
  RolloutOptions o;
  EXPECT_THROW(evaluate(*bundle_, envs::builtin("open5"), o), std::invalid_argument);
}

TEST_F(StitchBundle, LoadingANonBundleFails) {
  const auto dir = temp_dir("empty");
  EXPECT_THROW(load_bundle(dir), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Pipeline, VariantNeedsMatchingCritic) {
  const auto env = envs::builtin("stitch");
  Experiment x = stitch_recipe();
  const auto d = make_dataset(x, env);
  x.variant = Variant::VAdt;
  EXPECT_THROW(train_policy(x, 0, env, d, nullptr), std::invalid_argument);
  x.variant = Variant::GAdt;
  const auto iql = fit_critic(d, env, CriticKind::Iql, x.critic);
  EXPECT_THROW(train_policy(x, 0, env, d, &iql), std::invalid_argument);
  EXPECT_THROW(fit_critic(d, env, CriticKind::ExactDp, x.critic), std::invalid_argument);
  EXPECT_THROW(train_policy(x, 0, env, OfflineDataset{}, nullptr), std::invalid_argument);
}

TEST(Pipeline, GoalPromptedCorridorWalksToTheGoal) {
  const auto env = envs::builtin("corridor6");
  Experiment x = recipe_for(env, Variant::GAdt);
  x.train.steps = 150;
  const auto d = make_dataset(x, env);
  const auto critic = fit_critic(d, env, CriticKind::Hiql, x.critic);
  const auto b = train_policy(x, 0, env, d, &critic);
  RolloutOptions o;
  o.episodes = 2;
  const auto r = evaluate(b, env, o);
  const std::size_t g = cell(env, 'g');
  for (const auto& e : r.episodes) {
    EXPECT_TRUE(e.success);
    for (std::size_t t = 0; t + 1 < e.path.size(); ++t) EXPECT_LT(g - e.path[t + 1], g - e.path[t]);
    for (const auto& p : e.prompts) EXPECT_EQ(p.size(), env.encoding_dim());
  }
}

TEST(Pipeline, OptimalDataOnOpenGridAlwaysSucceeds) {
  const auto env = envs::builtin("open5");
  Experiment x = recipe_for(env, Variant::VAdt);
  x.data_policy = BehaviorPolicy::Optimal;
  x.data_n = 40;
  const auto d = make_dataset(x, env);
  const auto critic = fit_critic(d, env, CriticKind::Iql, x.critic);
  const auto b = train_policy(x, 0, env, d, &critic);
  RolloutOptions o;
  o.episodes = 20;
  const auto r = evaluate(b, env, o);
  EXPECT_DOUBLE_EQ(r.success_rate(), 1.0);
}

TEST(Ablation, CellsCoverTheFactorial) {
  AblationSuite s;
  EXPECT_EQ(s.cells().size(), 8u);
  KeyValueConfig c;
  c.set("suite.factors", "weights prompt");
  c.set("suite.seeds", "2");
  const auto t = AblationSuite::from_config(c);
  EXPECT_EQ(t.cells().size(), 4u);
  EXPECT_EQ(t.seeds, 2u);
  KeyValueConfig bad;
  bad.set("suite.seed", "2");
  EXPECT_THROW(AblationSuite::from_config(bad), ConfigError);
  KeyValueConfig bad_factor;
  bad_factor.set("suite.factors", "dropout");
  EXPECT_THROW(AblationSuite::from_config(bad_factor), ConfigError);
}

TEST(Ablation, RunsEveryCellAndSeed) {
  KeyValueConfig c;
  c.set("suite.seeds", "2");
  c.set("suite.workers", "2");
  c.set("train.steps", "5");
  c.set("critic.steps", "200");
  c.set("eval.episodes", "2");
  const auto suite = AblationSuite::from_config(c);
  const auto dir = temp_dir("ablate");
  const auto cells = run_ablations(suite, dir, nullptr);
  ASSERT_EQ(cells.size(), 8u);
  for (const auto& cell : cells) {
    EXPECT_EQ(cell.outcomes.size(), 2u);
    EXPECT_EQ(cell.failed(), 0u);
  }
  std::ostringstream os;
  write_ablation_csv(os, suite.factors, cells);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "weights,prompt,tokenization,seeds,failed,success_mean,success_ci95,return_mean,return_ci95");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 8u);
  const auto on = marginal(cells, "weights", "on");
  EXPECT_EQ(on.n, 8u);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace adt
