#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adt/env.hpp"
#include "adt/rng.hpp"
#include "json.hpp"

namespace adt {

struct Transition {
  std::size_t state = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t next_state = 0;
  bool done = false;  // true terminal; a horizon cut-off is not done
  std::optional<std::size_t> goal;
  std::optional<double> return_to_go;
  std::vector<double> prompt;
};

struct Trajectory {
  std::vector<Transition> steps;
  std::optional<std::size_t> goal;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
  bool terminal() const { return !steps.empty() && steps.back().done; }

  // States s_0 .. s_T including the final next-state.
  std::vector<std::size_t> states() const {
    std::vector<std::size_t> out;
    for (const auto& t : steps) out.push_back(t.state);
    if (!steps.empty()) out.push_back(steps.back().next_state);
    return out;
  }

  double total_return() const {
    double r = 0.0;
    for (const auto& t : steps) r += t.reward;
    return r;
  }
};

struct OfflineDataset {
  std::vector<Trajectory> trajectories;
  std::string env_name;
  std::uint64_t env_hash = 0;
  std::string policy;
  std::uint64_t seed = 0;

  std::size_t size() const { return trajectories.size(); }
  bool empty() const { return trajectories.empty(); }

  std::size_t transitions() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.size();
    return n;
  }

  double max_abs_return() const {
    double m = 0.0;
    for (const auto& t : trajectories) {
      double s = 0.0;
      for (const auto& x : t.steps) s += std::abs(x.reward);
      m = std::max(m, s);
    }
    return m;
  }

  double max_return() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& t : trajectories) m = std::max(m, t.total_return());
    return m;
  }

  // Sorted distinct states, including final next-states.
  std::vector<std::size_t> visited_states() const {
    std::vector<std::size_t> out;
    for (const auto& t : trajectories)
      for (std::size_t s : t.states()) out.push_back(s);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

inline void validate(const OfflineDataset& d, const GridWorldSpec& env) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& tr = d.trajectories[i];
    if (tr.size() > env.horizon) {
      throw std::invalid_argument("dataset: trajectory " + std::to_string(i) + " longer than horizon");
    }
    for (const auto& t : tr.steps) {
      if (t.state >= env.num_states() || t.next_state >= env.num_states() || t.action >= env.num_actions()) {
        throw std::invalid_argument("dataset: trajectory " + std::to_string(i) + " has an out-of-range index");
      }
      if (env.next_state(t.state, t.action) != t.next_state) {
        throw std::invalid_argument("dataset: trajectory " + std::to_string(i) + " disagrees with the environment");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Behavior policies

enum class BehaviorPolicy {
  Scripted,      // the environment's script lines, one trajectory each
  Uniform,       // uniform over the five actions from a start-distribution draw
  Optimal,       // shortest path to the nearest goal, ties broken by action order
  PartialDemos,  // shortest-path segments between random cells (for stitching)
};

inline BehaviorPolicy parse_behavior_policy(const std::string& s) {
  if (s == "scripted") return BehaviorPolicy::Scripted;
  if (s == "uniform") return BehaviorPolicy::Uniform;
  if (s == "optimal") return BehaviorPolicy::Optimal;
  if (s == "partial-demos") return BehaviorPolicy::PartialDemos;
  throw std::invalid_argument("unknown behavior policy '" + s + "' (expected scripted|uniform|optimal|partial-demos)");
}

inline const char* to_string(BehaviorPolicy p) {
  switch (p) {
    case BehaviorPolicy::Scripted: return "scripted";
    case BehaviorPolicy::Uniform: return "uniform";
    case BehaviorPolicy::Optimal: return "optimal";
    case BehaviorPolicy::PartialDemos: return "partial-demos";
  }
  return "?";
}

namespace detail {

constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

// First action (in enum order) that moves one step closer along `dist`.
inline std::size_t greedy_action(const GridWorldSpec& env, const std::vector<std::size_t>& dist, std::size_t s) {
  for (std::size_t a = 0; a < kNumActions; ++a) {
    const std::size_t t = env.next_state(s, a);
    if (dist[t] != kUnreachable && dist[t] + 1 == dist[s]) return a;
  }
  return static_cast<std::size_t>(Action::Stay);
}

inline std::vector<std::size_t> goal_distances(const GridWorldSpec& env) {
  std::vector<std::size_t> best(env.num_states(), kUnreachable);
  for (std::size_t g : env.goals) {
    const auto d = env.distances_to(g);
    for (std::size_t s = 0; s < best.size(); ++s) best[s] = std::min(best[s], d[s]);
  }
  return best;
}

inline Trajectory rollout_actions(const GridWorldSpec& env, std::size_t start, const std::vector<std::size_t>& actions) {
  Trajectory tr;
  std::size_t s = start;
  for (std::size_t a : actions) {
    if (env.is_terminal(s) || tr.size() >= env.horizon) break;
    Transition t;
    t.state = s;
    t.action = a;
    t.reward = env.reward(s, a);
    t.next_state = env.next_state(s, a);
    t.done = env.is_terminal(t.next_state);
    tr.steps.push_back(std::move(t));
    s = tr.steps.back().next_state;
  }
  return tr;
}

}  // namespace detail

// Reproducible given (env, policy, n, seed): trajectory i draws from its own
// sub-stream, so trajectories never depend on each other.
inline OfflineDataset generate_dataset(const GridWorldSpec& env, BehaviorPolicy policy, std::size_t n,
                                       std::uint64_t seed) {
  OfflineDataset d;
  d.env_name = env.name;
  d.env_hash = env.hash();
  d.policy = to_string(policy);
  d.seed = seed;

  const auto goal_dist = detail::goal_distances(env);
  if (!env.goals.empty()) {
    for (const auto& [s, p] : env.start) {
      if (p > 0.0 && goal_dist[s] == detail::kUnreachable) {
        throw std::invalid_argument("generate_dataset: start cell " + std::to_string(s) + " cannot reach any goal");
      }
    }
  }

  if (policy == BehaviorPolicy::Scripted) {
    if (env.scripts.empty()) throw std::invalid_argument("generate_dataset: environment '" + env.name + "' has no scripts");
    // n = 0 still means an empty dataset; otherwise cycle through the scripts.
    for (std::size_t i = 0; i < n; ++i) {
      const auto& sc = env.scripts[i % env.scripts.size()];
      d.trajectories.push_back(detail::rollout_actions(env, sc.start, sc.actions));
    }
    return d;
  }

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, "data", i);
    if (policy == BehaviorPolicy::PartialDemos) {
      // Shortest path between two random cells at a distance within the configured band.
      const std::size_t n_states = env.num_states();
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw std::runtime_error("generate_dataset: no cell pairs in the demo distance band");
        const std::size_t from = uniform_index(rng, n_states);
        const std::size_t to = uniform_index(rng, n_states);
        if (env.is_terminal(from)) continue;
        const auto dist = env.distances_to(to);
        if (dist[from] == detail::kUnreachable || dist[from] < env.demo_min_length ||
            dist[from] > env.demo_max_length) {
          continue;
        }
        std::vector<std::size_t> actions;
        for (std::size_t s = from; s != to; s = env.next_state(s, actions.back())) {
          actions.push_back(detail::greedy_action(env, dist, s));
        }
        d.trajectories.push_back(detail::rollout_actions(env, from, actions));
        break;
      }
      continue;
    }
    std::size_t s = env.sample_start(rng);
    std::vector<std::size_t> actions;
    std::size_t cur = s;
    for (std::size_t t = 0; t < env.horizon && !env.is_terminal(cur); ++t) {
      const std::size_t a = policy == BehaviorPolicy::Uniform ? uniform_index(rng, kNumActions)
                                                               : detail::greedy_action(env, goal_dist, cur);
      actions.push_back(a);
      cur = env.next_state(cur, a);
    }
    d.trajectories.push_back(detail::rollout_actions(env, s, actions));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Relabeling

// R_t = r_t + R_{t+1}, undiscounted, along each stored trajectory.
inline void relabel_return_to_go(OfflineDataset& d) {
  for (auto& tr : d.trajectories) {
    double acc = 0.0;
    for (auto it = tr.steps.rbegin(); it != tr.steps.rend(); ++it) {
      acc += it->reward;
      it->return_to_go = acc;
    }
  }
}

// Fills every transition's prompt from the high-level policy.
inline void relabel_prompts(OfflineDataset& d, const std::function<std::vector<double>(const Transition&)>& prompt_of) {
  for (auto& tr : d.trajectories)
    for (auto& t : tr.steps) t.prompt = prompt_of(t);
}

// Attaches a goal to every trajectory and transition that lacks one.
inline void assign_goal(OfflineDataset& d, std::size_t goal) {
  for (auto& tr : d.trajectories) {
    if (!tr.goal) tr.goal = goal;
    for (auto& t : tr.steps)
      if (!t.goal) t.goal = tr.goal;
  }
}

struct StepPair {
  std::size_t from = 0;
  std::size_t to = 0;
  double reward = 0.0;     // discounted sum over the jump
  std::size_t steps = 0;   // jump length actually taken (shorter when clamped)
  bool clamped = false;
  bool terminal = false;   // `to` ends the episode
};

// One pair per state index t = 0..T. Targets past the end clamp to s_T.
inline std::vector<StepPair> k_step_pairs(const Trajectory& tr, std::size_t k, double gamma) {
  if (k == 0) throw std::invalid_argument("k_step_pairs: k must be >= 1");
  std::vector<StepPair> out;
  if (tr.empty()) return out;
  const auto states = tr.states();
  const std::size_t last = states.size() - 1;
  for (std::size_t t = 0; t <= last; ++t) {
    StepPair p;
    p.from = states[t];
    const std::size_t target = std::min(t + k, last);
    p.to = states[target];
    p.steps = target - t;
    p.clamped = t + k > last;
    double disc = 1.0;
    for (std::size_t u = t; u < target; ++u) {
      p.reward += disc * tr.steps[u].reward;
      disc *= gamma;
    }
    p.terminal = target == last && tr.terminal();
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: a header line followed by one JSON object per trajectory.

inline constexpr int kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const OfflineDataset& d) {
  nlohmann::json header = {{"format", "adt-dataset"},
                           {"version", kDatasetVersion},
                           {"env", d.env_name},
                           {"env_hash", d.env_hash},
                           {"policy", d.policy},
                           {"seed", d.seed},
                           {"count", d.size()}};
  os << header.dump() << '\n';
  for (const auto& tr : d.trajectories) {
    nlohmann::json j;
    j["states"] = tr.states();
    std::vector<std::size_t> actions;
    std::vector<double> rewards;
    std::vector<double> rtg;
    std::vector<std::vector<double>> prompts;
    bool has_rtg = !tr.empty(), has_prompts = !tr.empty();
    for (const auto& t : tr.steps) {
      actions.push_back(t.action);
      rewards.push_back(t.reward);
      has_rtg = has_rtg && t.return_to_go.has_value();
      has_prompts = has_prompts && !t.prompt.empty();
      rtg.push_back(t.return_to_go.value_or(0.0));
      prompts.push_back(t.prompt);
    }
    j["actions"] = actions;
    j["rewards"] = rewards;
    j["terminal"] = tr.terminal();
    if (tr.goal) j["goal"] = *tr.goal;
    if (has_rtg) j["rtg"] = rtg;
    if (has_prompts) j["prompts"] = prompts;
    os << j.dump() << '\n';
  }
}

inline OfflineDataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset: empty file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("dataset: bad header: ") + e.what());
  }
  if (header.value("format", "") != "adt-dataset") throw std::runtime_error("dataset: not an adt-dataset file");
  if (header.value("version", 0) != kDatasetVersion) throw std::runtime_error("dataset: unsupported version");
  OfflineDataset d;
  d.env_name = header.value("env", "");
  d.env_hash = header.value("env_hash", std::uint64_t{0});
  d.policy = header.value("policy", "");
  d.seed = header.value("seed", std::uint64_t{0});
  const std::size_t count = header.value("count", std::size_t{0});
  for (std::size_t n = 2; std::getline(is, line); ++n) {
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto states = j.at("states").get<std::vector<std::size_t>>();
      const auto actions = j.at("actions").get<std::vector<std::size_t>>();
      const auto rewards = j.at("rewards").get<std::vector<double>>();
      if (actions.size() != rewards.size() || (!actions.empty() && states.size() != actions.size() + 1)) {
        throw std::runtime_error("inconsistent lengths");
      }
      const bool terminal = j.value("terminal", false);
      Trajectory tr;
      if (j.contains("goal")) tr.goal = j["goal"].get<std::size_t>();
      for (std::size_t t = 0; t < actions.size(); ++t) {
        Transition x;
        x.state = states[t];
        x.action = actions[t];
        x.reward = rewards[t];
        x.next_state = states[t + 1];
        x.done = terminal && t + 1 == actions.size();
        x.goal = tr.goal;
        if (j.contains("rtg")) x.return_to_go = j["rtg"].at(t).get<double>();
        if (j.contains("prompts")) x.prompt = j["prompts"].at(t).get<std::vector<double>>();
        tr.steps.push_back(std::move(x));
      }
      d.trajectories.push_back(std::move(tr));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset: line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (d.size() != count) {
    throw std::runtime_error("dataset: header says " + std::to_string(count) + " trajectories, file has " +
                             std::to_string(d.size()));
  }
  return d;
}

inline void save_dataset(const std::string& path, const OfflineDataset& d) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(os, d);
}

inline OfflineDataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset " + path);
  return read_dataset(is);
}

}  // namespace adt
