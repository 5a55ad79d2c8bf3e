#include <gtest/gtest.h>

#include <cmath>

#include "adt/pipeline.hpp"

namespace adt {
namespace {

std::size_t cell(const GridWorldSpec& env, char label) { return env.state_of_label(std::string(1, label)); }

TEST(Awr, ZeroAdvantageIsUnitWeight) {
  const auto w = awr_weights({0.0}, 3.0, 100.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
}

TEST(Awr, DoublingAdvantage) {
  const double alpha = 0.7;
  EXPECT_NEAR(awr_weights({alpha * std::log(2.0)}, alpha, 100.0)[0], 2.0, 1e-12);
}

TEST(Awr, StitchWeights) {
  // Q - V at (b, right) is 0 and at (a, up) is 1 - 10 with alpha = 3.
  const auto w = awr_weights({0.0, -9.0}, 3.0, 100.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
  EXPECT_NEAR(w[1], std::exp(-3.0), 1e-12);
  EXPECT_NEAR(w[1], 0.0498, 1e-3);
}

TEST(Awr, PositiveAndClipped) {
  Rng rng = make_stream(1, "awr");
  std::vector<double> adv;
  for (int i = 0; i < 500; ++i) adv.push_back(40.0 * (uniform01(rng) - 0.5));
  for (double alpha : {0.1, 1.0, 10.0}) {
    for (double w : awr_weights(adv, alpha, 20.0)) {
      EXPECT_GT(w, 0.0);
      EXPECT_LE(w, 20.0);
    }
  }
}

TEST(Awr, ScaleInvariance) {
  // Scaling advantages and temperature together leaves the weights unchanged.
  Rng rng = make_stream(2, "awr");
  std::vector<double> adv, scaled;
  for (int i = 0; i < 50; ++i) {
    adv.push_back(uniform01(rng) - 0.5);
    scaled.push_back(7.0 * adv.back());
  }
  const auto a = awr_weights(adv, 0.5, 1e6), b = awr_weights(scaled, 3.5, 1e6);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * a[i]);
}

TEST(Awr, HugeTemperatureGivesUnitWeights) {
  for (double w : awr_weights({-5.0, 0.0, 5.0}, 1e9, 100.0)) EXPECT_NEAR(w, 1.0, 1e-8);
}

TEST(Awr, RejectsBadArguments) {
  EXPECT_THROW(awr_weights({0.0}, 0.0, 100.0), std::invalid_argument);
  EXPECT_THROW(awr_weights({0.0}, 1.0, 0.5), std::invalid_argument);
  EXPECT_THROW(awr_weights({std::nan("")}, 1.0, 100.0), std::invalid_argument);
}

class StitchPolicy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    env_ = new GridWorldSpec(envs::builtin("stitch"));
    const Experiment x = stitch_recipe();
    data_ = new OfflineDataset(make_dataset(x, *env_));
    critic_ = new FittedCritic(fit_critic(*data_, *env_, CriticKind::Iql, x.critic));
    bundle_ = new PolicyBundle(train_policy(x, 0, *env_, *data_, critic_));
  }
  static void TearDownTestSuite() {
    delete bundle_;
    delete critic_;
    delete data_;
    delete env_;
  }
  static GridWorldSpec* env_;
  static OfflineDataset* data_;
  static FittedCritic* critic_;
  static PolicyBundle* bundle_;
};
GridWorldSpec* StitchPolicy::env_ = nullptr;
OfflineDataset* StitchPolicy::data_ = nullptr;
FittedCritic* StitchPolicy::critic_ = nullptr;
PolicyBundle* StitchPolicy::bundle_ = nullptr;

TEST_F(StitchPolicy, PrefersRightAtTheJunction) {
  const std::size_t b = cell(*env_, 'b');
  PolicyWindow w{{{10.0}, env_->encode(b), std::nullopt, 1, 1.0}};
  const auto p = action_probabilities(bundle_->model, w);
  EXPECT_GE(p[static_cast<std::size_t>(Action::Right)], 0.9);
}

TEST_F(StitchPolicy, ValuePromptsAreCriticValues) {
  OfflineDataset d = *data_;
  relabel_value_prompts(d, critic_->net, bundle_->train);
  for (const auto& tr : d.trajectories)
    for (const auto& x : tr.steps) {
      ASSERT_EQ(x.prompt.size(), 1u);
      EXPECT_DOUBLE_EQ(x.prompt[0], critic_->net.value(x.state));
    }
}

TEST_F(StitchPolicy, UnweightedVariantUsesUnitWeights) {
  OfflineDataset d = *data_;
  TrainConfig c = bundle_->train;
  c.use_weights = false;
  for (double w : relabel_value_prompts(d, critic_->net, c)) EXPECT_DOUBLE_EQ(w, 1.0);
}

TEST(LowLevel, EmptyDatasetIsAnError) {
  ModelConfig mc;
  EXPECT_THROW(train_low_level({}, mc, TrainConfig{}), std::invalid_argument);
  EXPECT_THROW(train_low_level({PolicyTrajectory{}}, mc, TrainConfig{}), std::invalid_argument);
}

TEST(LowLevel, LossCurveIsReproducible) {
  const auto env = envs::builtin("corridor6");
  auto d = generate_dataset(env, BehaviorPolicy::Scripted, 1, 0);
  const auto w = relabel_rtg_prompts(d);
  ModelConfig mc;
  mc.layers = 1;
  mc.hidden_dim = 16;
  mc.context_length = 3;
  mc.state_dim = env.encoding_dim();
  mc.max_timestep = env.horizon + 1;
  TrainConfig tc;
  tc.steps = 20;
  tc.warmup_steps = 5;
  tc.lr = 1e-3;
  tc.batch_size = 4;
  tc.log_every = 1;
  const auto data = to_policy_trajectories(d, env, w, true);
  const auto a = train_low_level(data, mc, tc), b = train_low_level(data, mc, tc);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
  EXPECT_LT(a.curve.back().loss, a.curve.front().loss);
}

TEST(Prompts, RtgPromptsAreReturnsToGo) {
  auto d = generate_dataset(envs::builtin("stitch"), BehaviorPolicy::Scripted, 3, 0);
  const auto w = relabel_rtg_prompts(d);
  EXPECT_EQ(w.size(), d.transitions());
  for (const auto& tr : d.trajectories) {
    double suffix = 0.0;
    for (std::size_t t = tr.size(); t-- > 0;) {
      suffix += tr.steps[t].reward;
      ASSERT_EQ(tr.steps[t].prompt.size(), 1u);
      EXPECT_DOUBLE_EQ(tr.steps[t].prompt[0], suffix);
    }
  }
}

TEST(Prompts, MaybeZero) {
  EXPECT_EQ(maybe_zero({1.0, -2.0}, true), (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(maybe_zero({1.0, -2.0}, false), (std::vector<double>{0.0, 0.0}));
}

TEST(Prompts, WeightCountMustMatch) {
  const auto env = envs::builtin("stitch");
  auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  relabel_rtg_prompts(d);
  EXPECT_THROW(to_policy_trajectories(d, env, {1.0}, true), std::invalid_argument);
}

// Exact shortest-path goal value on a corridor: -(1 - gamma^dist) / (1 - gamma).
GoalValueFn corridor_values(double gamma) {
  return [gamma](std::size_t s, std::size_t g) {
    const double dist = std::abs(static_cast<double>(g) - static_cast<double>(s));
    return -(1.0 - std::pow(gamma, dist)) / (1.0 - gamma);
  };
}

TEST(Subgoals, CorridorJumpsWayStepAhead) {
  const auto env = envs::builtin("corridor6");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 1, 0);
  HighLevelConfig c;
  const auto tuples = subgoal_tuples(d, corridor_values(env.gamma), env.gamma, c);
  ASSERT_FALSE(tuples.empty());
  const std::size_t g = cell(env, 'g');
  for (const auto& t : tuples) {
    if (t.from == t.target) EXPECT_EQ(t.goal, t.from);  // only a reached goal stays put
    EXPECT_GT(t.weight, 0.0);
    // Jumps toward a goal ahead lie on a shortest path; goals behind are penalized.
    if (t.goal >= t.from) EXPECT_NEAR(t.advantage, 0.0, 1e-9);
    else EXPECT_LT(t.advantage, 0.0);
  }
  const auto high = train_goal_high_level(tuples, env.num_states(), c);
  const auto path = d.trajectories[0].states();
  for (std::size_t t = 0; t + 1 < path.size(); ++t) {
    EXPECT_EQ(high.subgoal(path[t], g), path[std::min(t + c.way_step, path.size() - 1)]) << "t=" << t;
  }
}

TEST(Subgoals, ReachedGoalIsItsOwnSubgoal) {
  SubgoalPolicy p(4);
  for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(p.subgoal(s, s), s);
  EXPECT_EQ(p.subgoal(0, 3), 3u);  // unobserved pair
}

TEST(Subgoals, EqualAdvantagesSplitEvenly) {
  std::vector<SubgoalTuple> tuples{{0, 5, 1, 0.0, 0.25}, {0, 5, 2, 0.0, 0.25}};
  HighLevelConfig c;
  c.steps = 500;
  const auto high = train_goal_high_level(tuples, 6, c);
  const auto p = high.probabilities(0, 5);
  EXPECT_NEAR(p[1], p[2], 1e-9);
  EXPECT_GT(p[1] + p[2], 0.98);
  EXPECT_TRUE(high.observed(0, 5));
  EXPECT_FALSE(high.observed(1, 5));
}

TEST(Subgoals, HigherAdvantageWins) {
  std::vector<SubgoalTuple> tuples{{0, 5, 1, -2.0, 0.25}, {0, 5, 2, 0.0, 0.25}};
  const auto high = train_goal_high_level(tuples, 6, HighLevelConfig{});
  EXPECT_EQ(high.subgoal(0, 5), 2u);
}

TEST(Subgoals, EmptyInputsAreErrors) {
  EXPECT_THROW(train_goal_high_level({}, 4, HighLevelConfig{}), std::invalid_argument);
  HighLevelConfig c;
  c.way_step = 0;
  EXPECT_THROW(subgoal_tuples(OfflineDataset{}, corridor_values(0.9), 0.9, c), std::invalid_argument);
}

TEST(Subgoals, NeedsGoalConditionedCritic) {
  EXPECT_THROW(subgoal_tuples(OfflineDataset{}, CriticNet{}, HighLevelConfig{}), std::logic_error);
}

TEST(IdealizedTable, MatchesTheData) {
  const auto env = envs::builtin("stitch");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  const IdealizedDTTable table(d);
  const std::size_t a = cell(env, 'a'), b = cell(env, 'b'), dd = cell(env, 'd');
  const auto right = static_cast<std::size_t>(Action::Right), down = static_cast<std::size_t>(Action::Down);
  // From d with R = 10 the data always goes down then right.
  const auto qd = table.query(dd, 10.0);
  EXPECT_FALSE(qd.out_of_distribution);
  EXPECT_DOUBLE_EQ(qd.probabilities[down], 1.0);
  // (a, 10) never occurs: only returns 0 and 1 start at a.
  EXPECT_TRUE(table.query(a, 10.0).out_of_distribution);
  // After visiting a, b has only been followed by down.
  const auto qb = table.query(std::vector<std::size_t>{a}, b, 10.0);
  EXPECT_TRUE(qb.out_of_distribution);
  EXPECT_DOUBLE_EQ(qb.probabilities[down], 1.0);
  EXPECT_DOUBLE_EQ(qb.probabilities[right], 0.0);
}

TEST(IdealizedTable, NeverStitchesFromA) {
  const auto env = envs::builtin("stitch");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  const IdealizedDTTable table(d);
  for (double rtg : {0.0, 1.0, 5.0, 10.0, 20.0}) {
    double total = 0.0;
    for (const auto& [ret, p] : enumerate_table_returns(env, table, cell(env, 'a'), rtg)) {
      EXPECT_LT(ret, 10.0) << "rtg " << rtg;
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

}  // namespace
}  // namespace adt
