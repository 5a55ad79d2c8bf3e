#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "adt/dataset.hpp"

namespace adt {
namespace {

std::size_t cell(const GridWorldSpec& env, char label) { return env.state_of_label(std::string(1, label)); }

TEST(Config, ParsesRepeatedKeysAndOverrides) {
  auto c = KeyValueConfig::parse("# comment\nrow = ab\nrow = cd\n  gamma = 0.5  \n");
  EXPECT_EQ(c.get_all("row"), (std::vector<std::string>{"ab", "cd"}));
  EXPECT_DOUBLE_EQ(c.get_double("gamma", 0.0), 0.5);
  c.merge(KeyValueConfig::parse("gamma = 0.9"));
  EXPECT_DOUBLE_EQ(c.get_double("gamma", 0.0), 0.9);
  EXPECT_THROW(KeyValueConfig::parse("no equals sign"), ConfigError);
  EXPECT_THROW(c.get_size("gamma", 0), ConfigError);
}

TEST(GridWorld, WallsAndEdgesMeanStay) {
  const auto env = envs::builtin("stitch");
  EXPECT_EQ(env.num_states(), 7u);
  const auto a = cell(env, 'a'), b = cell(env, 'b'), f = cell(env, 'f');
  EXPECT_EQ(env.next_state(a, static_cast<std::size_t>(Action::Left)), a);
  EXPECT_EQ(env.next_state(a, static_cast<std::size_t>(Action::Down)), a);  // wall below a
  EXPECT_EQ(env.next_state(a, static_cast<std::size_t>(Action::Right)), b);
  EXPECT_EQ(env.next_state(a, static_cast<std::size_t>(Action::Up)), f);
  EXPECT_DOUBLE_EQ(env.reward(b, static_cast<std::size_t>(Action::Right)), 10.0);
}

TEST(GridWorld, RejectsBadSpecs) {
  EXPECT_THROW(GridWorldSpec::parse("row = ..\nrow = .\n"), ConfigError);
  EXPECT_THROW(GridWorldSpec::parse("row = ab\nstart = a:0.3 b:0.3\n"), ConfigError);
  EXPECT_THROW(GridWorldSpec::parse("row = ab\nstart = z\n"), ConfigError);
  EXPECT_THROW(GridWorldSpec::parse("row = ab\ngamma = 1.5\n"), ConfigError);
}

TEST(GridWorld, FourRoomsLayout) {
  const auto env = envs::builtin("four-rooms");
  EXPECT_EQ(env.num_states(), 53u);
  EXPECT_EQ(env.rooms, 5u);
  EXPECT_EQ(env.encoding_dim(), 7u);
  const auto g = *env.goals.begin();
  EXPECT_EQ(env.coords(g), (std::pair<std::size_t, std::size_t>{7, 7}));
  const auto d = env.distances_to(g);
  for (std::size_t s = 0; s < env.num_states(); ++s) EXPECT_LT(d[s], 30u) << "cell " << s << " cut off from goal";
}

TEST(Generate, StitchScriptsGiveExactlyTheThreeTrajectories) {
  const auto env = envs::builtin("stitch");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  ASSERT_EQ(d.size(), 3u);
  const auto a = cell(env, 'a'), b = cell(env, 'b'), c = cell(env, 'c'), dd = cell(env, 'd'), e = cell(env, 'e'),
             f = cell(env, 'f');
  EXPECT_EQ(d.trajectories[0].states(), (std::vector<std::size_t>{a, b, c}));
  EXPECT_EQ(d.trajectories[1].states(), (std::vector<std::size_t>{dd, b, e}));
  EXPECT_EQ(d.trajectories[2].states(), (std::vector<std::size_t>{a, f}));
  EXPECT_DOUBLE_EQ(d.trajectories[0].total_return(), 0.0);
  EXPECT_DOUBLE_EQ(d.trajectories[1].total_return(), 10.0);
  EXPECT_DOUBLE_EQ(d.trajectories[2].total_return(), 1.0);
  for (const auto& tr : d.trajectories) EXPECT_TRUE(tr.terminal());
}

// The stitched path must never be stored.
TEST(Generate, StitchNegativeControl) {
  const auto env = envs::builtin("stitch");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 3, 0);
  for (const auto& tr : d.trajectories) {
    const auto s = tr.states();
    const bool has_a = std::count(s.begin(), s.end(), cell(env, 'a')) > 0;
    const bool has_e = std::count(s.begin(), s.end(), cell(env, 'e')) > 0;
    EXPECT_FALSE(has_a && has_e);
  }
}

TEST(Generate, ZeroTrajectoriesIsEmpty) {
  for (auto p : {BehaviorPolicy::Scripted, BehaviorPolicy::Uniform}) {
    EXPECT_TRUE(generate_dataset(envs::builtin("stitch"), p, 0, 1).empty());
  }
}

TEST(Generate, UniformCoverageOnOpenGrid) {
  const auto env = envs::builtin("open5");
  const auto d = generate_dataset(env, BehaviorPolicy::Uniform, 200, 0);
  const auto visited = d.visited_states().size();
  EXPECT_GE(visited, 24u);
  EXPECT_EQ(visited, 25u);  // recorded count for seed 0
  for (const auto& tr : d.trajectories) EXPECT_LE(tr.size(), env.horizon);
  validate(d, env);
}

TEST(Generate, DeterministicPerSeed) {
  const auto env = envs::builtin("four-rooms");
  auto bytes = [&](std::uint64_t seed) {
    std::ostringstream os;
    write_dataset(os, generate_dataset(env, BehaviorPolicy::PartialDemos, 50, seed));
    return os.str();
  };
  EXPECT_EQ(bytes(3), bytes(3));
  EXPECT_NE(bytes(3), bytes(4));
}

TEST(Generate, PartialDemosFollowShortestPaths) {
  const auto env = envs::builtin("four-rooms");
  const auto d = generate_dataset(env, BehaviorPolicy::PartialDemos, 100, 2);
  for (const auto& tr : d.trajectories) {
    ASSERT_GE(tr.size(), env.demo_min_length);
    ASSERT_LE(tr.size(), env.demo_max_length);
    const auto s = tr.states();
    const auto dist = env.distances_to(s.back());
    EXPECT_EQ(dist[s.front()], tr.size());
  }
}

TEST(Generate, UnreachableStartIsAnError) {
  const auto env = GridWorldSpec::parse("row = a#g\ngoal = g\nstart = a\n");
  EXPECT_THROW(generate_dataset(env, BehaviorPolicy::Uniform, 1, 0), std::invalid_argument);
}

Trajectory with_rewards(const std::vector<double>& rewards) {
  Trajectory tr;
  for (std::size_t t = 0; t < rewards.size(); ++t) tr.steps.push_back({t, 0, rewards[t], t + 1, false, {}, {}, {}});
  return tr;
}

TEST(ReturnToGo, SuffixSums) {
  OfflineDataset d;
  d.trajectories = {with_rewards({1, 2, 3}), with_rewards({0, 0, 0})};
  relabel_return_to_go(d);
  std::vector<double> a, b;
  for (const auto& t : d.trajectories[0].steps) a.push_back(*t.return_to_go);
  for (const auto& t : d.trajectories[1].steps) b.push_back(*t.return_to_go);
  EXPECT_EQ(a, (std::vector<double>{6, 5, 3}));
  EXPECT_EQ(b, (std::vector<double>{0, 0, 0}));
}

TEST(ReturnToGo, StitchHighReturnTrajectory) {
  auto d = generate_dataset(envs::builtin("stitch"), BehaviorPolicy::Scripted, 3, 0);
  relabel_return_to_go(d);
  const auto& tr = d.trajectories[1];
  EXPECT_EQ(*tr.steps[0].return_to_go, 10.0);
  EXPECT_EQ(*tr.steps[1].return_to_go, 10.0);
}

TEST(ReturnToGo, ConsistencyProperty) {
  auto d = generate_dataset(envs::builtin("open5"), BehaviorPolicy::Uniform, 30, 5);
  relabel_return_to_go(d);
  for (const auto& tr : d.trajectories)
    for (std::size_t t = 0; t + 1 < tr.size(); ++t) {
      EXPECT_NEAR(*tr.steps[t].return_to_go - tr.steps[t].reward, *tr.steps[t + 1].return_to_go, 1e-12);
    }
}

TEST(Prompts, EmptyDatasetStaysEmpty) {
  OfflineDataset d;
  relabel_prompts(d, [](const Transition&) { return std::vector<double>{1.0}; });
  EXPECT_TRUE(d.empty());
}

TEST(KStep, ClampsAtTrajectoryEnd) {
  const auto tr = with_rewards({1, 1, 1, 1});  // states 0..4
  const auto pairs = k_step_pairs(tr, 2, 1.0);
  ASSERT_EQ(pairs.size(), 5u);
  EXPECT_EQ(pairs[0].to, 2u);
  EXPECT_EQ(pairs[2].to, 4u);
  EXPECT_FALSE(pairs[2].clamped);
  EXPECT_TRUE(pairs[3].clamped);
  EXPECT_TRUE(pairs[4].clamped);
  EXPECT_EQ(pairs[3].to, 4u);
  EXPECT_EQ(pairs[4].to, 4u);
  EXPECT_DOUBLE_EQ(pairs[3].reward, 1.0);
  EXPECT_DOUBLE_EQ(pairs[4].reward, 0.0);
}

TEST(KStep, OneStepIsConsecutiveTransitions) {
  const auto tr = with_rewards({3, -2, 5});
  const auto pairs = k_step_pairs(tr, 1, 1.0);
  for (std::size_t t = 0; t < tr.size(); ++t) {
    EXPECT_EQ(pairs[t].from, tr.steps[t].state);
    EXPECT_EQ(pairs[t].to, tr.steps[t].next_state);
    EXPECT_EQ(pairs[t].reward, tr.steps[t].reward);
  }
  EXPECT_THROW(k_step_pairs(tr, 0, 1.0), std::invalid_argument);
}

TEST(KStep, DiscountedCorridorSum) {
  const auto env = envs::builtin("corridor6");
  const auto d = generate_dataset(env, BehaviorPolicy::Scripted, 1, 0);
  const auto pairs = k_step_pairs(d.trajectories[0], 3, 0.99);
  std::size_t unclamped = 0;
  for (const auto& p : pairs) {
    if (p.clamped) continue;
    ++unclamped;
    EXPECT_NEAR(p.reward, -2.9701, 1e-12);
  }
  EXPECT_EQ(unclamped, 3u);
}

TEST(Serialization, RoundTrip) {
  auto d = generate_dataset(envs::builtin("stitch"), BehaviorPolicy::Scripted, 3, 9);
  relabel_return_to_go(d);
  relabel_prompts(d, [](const Transition& t) { return std::vector<double>{0.5 * static_cast<double>(t.state)}; });
  std::stringstream ss;
  write_dataset(ss, d);
  const auto back = read_dataset(ss);
  std::stringstream again;
  write_dataset(again, back);
  EXPECT_EQ(ss.str(), again.str());
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.trajectories[1].steps[1].prompt, d.trajectories[1].steps[1].prompt);
  EXPECT_TRUE(back.trajectories[1].terminal());
}

TEST(Serialization, RejectsCorruptFiles) {
  std::stringstream bad_header("{\"format\":\"other\"}\n");
  EXPECT_THROW(read_dataset(bad_header), std::runtime_error);
  std::stringstream short_file("{\"format\":\"adt-dataset\",\"version\":1,\"count\":2}\n"
                               "{\"states\":[0,1],\"actions\":[3],\"rewards\":[0]}\n");
  EXPECT_THROW(read_dataset(short_file), std::runtime_error);
}

}  // namespace
}  // namespace adt
