#include <gtest/gtest.h>

#include <cmath>

#include "adt/critics.hpp"

namespace adt {
namespace {

// Bisection on the first-order condition tau * E[(Z - v)+] = (1 - tau) * E[(v - Z)+].
double expectile_by_bisection(const std::vector<double>& z, double tau) {
  double lo = *std::min_element(z.begin(), z.end()), hi = *std::max_element(z.begin(), z.end());
  for (int i = 0; i < 200; ++i) {
    const double v = 0.5 * (lo + hi);
    double up = 0.0, down = 0.0;
    for (double x : z) {
      up += std::max(x - v, 0.0);
      down += std::max(v - x, 0.0);
    }
    (tau * up > (1.0 - tau) * down ? lo : hi) = v;
  }
  return 0.5 * (lo + hi);
}

std::size_t cell(const GridWorldSpec& env, char label) { return env.state_of_label(std::string(1, label)); }

OfflineDataset stitch_data() { return generate_dataset(envs::builtin("stitch"), BehaviorPolicy::Scripted, 3, 0); }

TEST(Expectile, LossValues) {
  EXPECT_DOUBLE_EQ(expectile_loss(2.0, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(expectile_loss(1.0, 0.9), 0.9);
  EXPECT_NEAR(expectile_loss(-1.0, 0.9), 0.1, 1e-15);
  EXPECT_THROW(expectile_loss(1.0, 1.0), std::invalid_argument);
}

TEST(Expectile, SkewIdentity) {
  Rng rng = make_stream(0, "skew");
  for (double tau : {0.5, 0.7, 0.9, 0.99}) {
    for (int i = 0; i < 100; ++i) {
      const double x = 0.01 + 10.0 * uniform01(rng);
      EXPECT_NEAR(expectile_loss(x, tau) / expectile_loss(-x, tau), tau / (1.0 - tau), 1e-12 * tau / (1.0 - tau));
    }
  }
}

TEST(Expectile, TwoPointSample) {
  EXPECT_NEAR(expectile_by_bisection({0.0, 10.0}, 0.9), 9.0, 1e-9);
  EXPECT_NEAR(fit_scalar_expectile({0.0, 10.0}, 0.9), 9.0, 1e-12);
}

TEST(Expectile, FittedMatchesBisectionOracle) {
  Rng rng = make_stream(1, "sample");
  std::vector<double> z;
  for (int i = 0; i < 20; ++i) z.push_back(5.0 * standard_normal(rng) + 2.0);
  for (double tau : {0.5, 0.7, 0.9, 0.99}) {
    EXPECT_NEAR(fit_scalar_expectile(z, tau), expectile_by_bisection(z, tau), 1e-9) << "tau " << tau;
  }
}

TEST(ExactDp, StitchFixtureValues) {
  const auto env = envs::builtin("stitch");
  const auto d = stitch_data();
  const auto t = exact_dp(d, 1.0);
  EXPECT_EQ(t.value(cell(env, 'b')), 10.0);
  EXPECT_EQ(t.value(cell(env, 'a')), 10.0);
  EXPECT_EQ(t.value(cell(env, 'd')), 10.0);
  const auto best = best_observed_return(d);
  EXPECT_EQ(best.at(cell(env, 'a')), 1.0);
  for (const auto& [s, r] : best) EXPECT_GE(t.value(s), r);
  EXPECT_GT(t.value(cell(env, 'a')), best.at(cell(env, 'a')));
}

TEST(ExactDp, RespectsSupport) {
  const auto env = envs::builtin("stitch");
  const auto t = exact_dp(stitch_data(), 1.0);
  const auto b = cell(env, 'b');
  EXPECT_EQ(t.action_value(b, static_cast<std::size_t>(Action::Right)), 10.0);
  EXPECT_EQ(t.action_value(b, static_cast<std::size_t>(Action::Down)), 0.0);
  EXPECT_THROW(t.action_value(b, static_cast<std::size_t>(Action::Left)), std::out_of_range);
  EXPECT_THROW(t.value(cell(env, 'h')), std::out_of_range);
}

TEST(ExactDp, ZeroRewardsGiveZeroValues) {
  OfflineDataset d;
  Trajectory tr;
  for (std::size_t t = 0; t < 4; ++t) tr.steps.push_back({t, 3, 0.0, t + 1, t == 3, {}, {}, {}});
  d.trajectories.push_back(tr);
  for (const auto& [s, v] : exact_dp(d, 1.0).v) EXPECT_EQ(v, 0.0);
  for (const auto& [s, v] : exact_dp(d, 0.9).v) EXPECT_EQ(v, 0.0);
}

TEST(ExactDp, CyclicUndiscountedNeedsHorizon) {
  OfflineDataset d;
  Trajectory tr;
  tr.steps.push_back({0, 3, -1.0, 1, false, {}, {}, {}});
  tr.steps.push_back({1, 2, -1.0, 0, false, {}, {}, {}});
  d.trajectories.push_back(tr);
  EXPECT_THROW(exact_dp(d, 1.0), std::invalid_argument);
  EXPECT_EQ(exact_dp(d, 1.0, 3).value(0), -3.0);
}

// Independent check: the Bellman optimality equation holds at every state,
// recomputed from raw transitions.
TEST(ExactDp, BellmanResidualOnGrid) {
  const auto env = envs::builtin("open5");
  const auto d = generate_dataset(env, BehaviorPolicy::Uniform, 100, 3);
  const auto t = exact_dp(d, env.gamma);
  std::map<std::size_t, double> best;
  for (const auto& tr : d.trajectories)
    for (const auto& x : tr.steps) {
      const double q = x.reward + (x.done ? 0.0 : env.gamma * t.value(x.next_state));
      auto it = best.find(x.state);
      if (it == best.end() || q > it->second) best[x.state] = q;
    }
  for (const auto& [s, v] : best) EXPECT_NEAR(t.value(s), v, 1e-8);
}

TEST(Iql, SingleTerminalTransition) {
  const auto env = GridWorldSpec::parse("row = ab\nreward.b = 1\nterminal = b\nstart = a\ngamma = 0.9\n");
  OfflineDataset d;
  d.trajectories.emplace_back();
  d.trajectories[0].steps.push_back({0, 3, 1.0, 1, true, {}, {}, {}});
  for (double tau : {0.5, 0.9}) {
    CriticConfig c;
    c.arch = CriticArch::Tabular;
    c.tau = tau;
    c.lr = 0.05;
    c.batch_size = 0;
    c.steps = 3000;
    c.polyak = 0.05;
    const auto net = fit_iql(d, env, c);
    EXPECT_NEAR(net.action_value(0, 3), 1.0, 1e-3);
    EXPECT_NEAR(net.value(0), 1.0, 1e-3);
  }
}

CriticConfig tabular_config(double tau, double gamma) {
  CriticConfig c;
  c.arch = CriticArch::Tabular;
  c.tau = tau;
  c.gamma = gamma;
  c.lr = 0.05;
  c.batch_size = 0;
  c.steps = 4000;
  c.polyak = 0.05;
  return c;
}

TEST(Iql, StitchValueAtB) {
  const auto env = envs::builtin("stitch");
  const auto net = fit_iql(stitch_data(), env, tabular_config(0.99, 1.0));
  const double vb = net.value(cell(env, 'b'));
  EXPECT_GE(vb, 9.0);
  EXPECT_LE(vb, 10.5);
  EXPECT_TRUE(net.fitted());
  EXPECT_TRUE(net.in_support(cell(env, 'a')));
}

TEST(Iql, MlpCriticOnStitch) {
  const auto env = envs::builtin("stitch");
  auto c = tabular_config(0.99, 1.0);
  c.arch = CriticArch::Mlp;
  c.lr = 3e-3;
  c.steps = 3000;
  const auto net = fit_iql(stitch_data(), env, c);
  const double vb = net.value(cell(env, 'b'));
  EXPECT_GE(vb, 9.0);
  EXPECT_LE(vb, 10.5);
}

TEST(Iql, TwinQTakesTheMinimum) {
  const auto env = envs::builtin("stitch");
  auto c = tabular_config(0.9, 1.0);
  c.twin_q = true;
  c.steps = 10;
  const auto net = fit_iql(stitch_data(), env, c);
  ASSERT_EQ(net.q_nets().size(), 2u);
  const auto a = net.q_nets()[0].eval(net.state_inputs({0}));
  const auto b = net.q_nets()[1].eval(net.state_inputs({0}));
  EXPECT_EQ(net.action_value(0, 1), std::min(a[1], b[1]));
}

TEST(Iql, DivergenceIsDetected) {
  const auto env = envs::builtin("stitch");
  auto c = tabular_config(0.9, 1.0);
  c.lr = 1e3;
  c.steps = 200;
  c.log_every = 1;
  EXPECT_THROW(fit_iql(stitch_data(), env, c), DivergenceError);
}

TEST(Iql, RejectsEmptyDatasetAndBadTau) {
  const auto env = envs::builtin("stitch");
  EXPECT_THROW(fit_iql(OfflineDataset{}, env, tabular_config(0.9, 1.0)), std::invalid_argument);
  EXPECT_THROW(fit_iql(stitch_data(), env, tabular_config(1.0, 1.0)), std::invalid_argument);
  EXPECT_THROW(fit_iql(stitch_data(), env, tabular_config(0.3, 1.0)), std::invalid_argument);
}

TEST(Polyak, GapShrinksGeometrically) {
  Rng rng = make_stream(0, "polyak");
  ParameterList online{{"w", nn::normal_init({3, 2}, 1.0, rng)}};
  ParameterList target{{"w", nn::normal_init({3, 2}, 1.0, rng)}};
  auto gap = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i) s += std::pow(target[0].tensor[i] - online[0].tensor[i], 2);
    return std::sqrt(s);
  };
  const double g0 = gap();
  const double rho = 0.005;
  for (int n = 0; n < 300; ++n) polyak_update(target, online, rho);
  EXPECT_NEAR(gap(), g0 * std::pow(1.0 - rho, 300), 1e-12);
}

TEST(GoalTable, CorridorDistances) {
  const auto env = envs::builtin("corridor3");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 1, 0);
  const ExactGoalTable t(d, env.num_states(), 1.0, env.horizon);
  const auto a = cell(env, 'a'), b = cell(env, 'b'), g = cell(env, 'g');
  EXPECT_EQ(t.value(a, g), -2.0);
  EXPECT_EQ(t.value(b, g), -1.0);
  EXPECT_EQ(t.value(g, g), 0.0);
  EXPECT_FALSE(t.distance(g, a).has_value());
  EXPECT_EQ(t.value(g, a), t.floor());
}

TEST(GoalMixture, SumsToOne) {
  CriticConfig c;
  const std::vector<std::size_t> states{4, 5, 6, 7, 8};
  const std::map<std::size_t, double> random{{1, 0.25}, {4, 0.75}};
  for (std::size_t t = 0; t + 1 < states.size(); ++t) {
    double total = 0.0;
    for (const auto& [g, p] : goal_distribution(states, t, random, c)) total += p;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

CriticNet corridor_hiql(double tau) {
  const auto env = envs::builtin("corridor3");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 1, 0);
  CriticConfig c = tabular_config(tau, 1.0);
  c.horizon = env.horizon;
  return fit_hiql(d, env, c);
}

TEST(Hiql, CorridorMatchesNegativeDistance) {
  const auto env = envs::builtin("corridor3");
  const auto net = corridor_hiql(0.99);
  const auto a = cell(env, 'a'), b = cell(env, 'b'), g = cell(env, 'g');
  EXPECT_NEAR(net.value(a, g), -2.0, 0.05);
  EXPECT_NEAR(net.value(b, g), -1.0, 0.05);
  EXPECT_NEAR(net.value(a, b), -1.0, 0.05);
  EXPECT_EQ(net.value(g, g), 0.0);
  EXPECT_EQ(net.value(a, a), 0.0);
}

TEST(Hiql, MonotoneInTau) {
  const auto env = envs::builtin("open5");
  const auto d = generate_dataset(env, BehaviorPolicy::Uniform, 20, 1);
  std::vector<std::vector<double>> tables;
  for (double tau : {0.7, 0.9, 0.99}) {
    CriticConfig c = tabular_config(tau, env.gamma);
    c.horizon = env.horizon;
    c.steps = 1500;
    const auto net = fit_hiql(d, env, c);
    std::vector<double> v;
    for (std::size_t s : d.visited_states())
      for (std::size_t g : d.visited_states()) v.push_back(net.value(s, g));
    tables.push_back(v);
  }
  for (std::size_t i = 0; i < tables[0].size(); ++i) {
    EXPECT_LE(tables[0][i], tables[1][i] + 1e-6);
    EXPECT_LE(tables[1][i], tables[2][i] + 1e-6);
  }
}

TEST(Hiql, GoalConditionedQueriesAreGuarded) {
  const auto net = corridor_hiql(0.9);
  EXPECT_THROW(net.value(0), std::logic_error);
  EXPECT_THROW(net.action_value(0, 0), std::logic_error);
}

}  // namespace
}  // namespace adt
