#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "adt/critics.hpp"
#include "adt/dataset.hpp"
#include "adt/env.hpp"
#include "adt/optim.hpp"
#include "adt/transformer.hpp"

namespace adt {

// w = min(exp(A / alpha), clip)
inline std::vector<double> awr_weights(const std::vector<double>& advantages, double alpha, double clip) {
  if (!(alpha > 0.0)) throw std::invalid_argument("awr_weights: alpha must be > 0");
  if (!(clip >= 1.0)) throw std::invalid_argument("awr_weights: clip must be >= 1");
  std::vector<double> w(advantages.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(advantages[i])) throw std::invalid_argument("awr_weights: non-finite advantage");
    w[i] = std::min(std::exp(advantages[i] / alpha), clip);
  }
  return w;
}

struct TrainConfig {
  double alpha = 3.0;
  double weight_clip = 100.0;
  std::size_t steps = 1000;
  std::size_t warmup_steps = 100;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 0.25;
  std::size_t batch_size = 256;  // windows per step; 0 = every trajectory chunk each step
  bool use_weights = true;       // off: plain sequence modeling on prompted data
  bool use_prompt = true;        // off: prompts replaced by zeros in training and evaluation
  std::uint64_t seed = 0;
  std::size_t log_every = 10;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("train config: alpha must be > 0");
    if (!(weight_clip >= 1.0)) throw std::invalid_argument("train config: weight_clip must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
    if (steps == 0) throw std::invalid_argument("train config: steps must be >= 1");
  }
};

// One stored trajectory in the low-level policy's input format.
using PolicyTrajectory = std::vector<PolicyStep>;

struct LossPoint {
  std::size_t step;
  double loss;
};

struct TrainedPolicy {
  CausalTransformer model;
  std::vector<LossPoint> curve;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct WindowRef {
  std::size_t trajectory, begin, end;
};

inline PolicyWindow make_window(const std::vector<PolicyTrajectory>& data, const WindowRef& r) {
  return PolicyWindow(data[r.trajectory].begin() + static_cast<long>(r.begin),
                      data[r.trajectory].begin() + static_cast<long>(r.end));
}

}  // namespace detail

// Minimizes the weighted sequence NLL over windows of at most K steps with
// linear warmup, AdamW and global gradient clipping.
inline TrainedPolicy train_low_level(const std::vector<PolicyTrajectory>& data, const ModelConfig& model_config,
                                     const TrainConfig& config) {
  config.validate();
  model_config.validate();
  std::size_t total = 0;
  for (const auto& tr : data) total += tr.size();
  if (total == 0) throw std::invalid_argument("train_low_level: empty dataset");

  const std::size_t K = model_config.context_length;
  std::vector<detail::WindowRef> chunks, starts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t b = 0; b < data[i].size(); b += K) chunks.push_back({i, b, std::min(b + K, data[i].size())});
    for (std::size_t b = 0; b < data[i].size(); ++b) starts.push_back({i, b, std::min(b + K, data[i].size())});
  }

  TrainedPolicy out{CausalTransformer(model_config, config.seed), {}};
  ParameterList params = out.model.parameters();
  AdamW opt(params, AdamWOptions{config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng batch_rng = make_stream(config.seed, "batch");
  Rng dropout_rng = make_stream(config.seed, "dropout");

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<PolicyWindow> windows;
    if (config.batch_size == 0) {
      for (const auto& r : chunks) windows.push_back(detail::make_window(data, r));
    } else {
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        windows.push_back(detail::make_window(data, starts[uniform_index(batch_rng, starts.size())]));
      }
    }
    const auto batch = tokenize(windows, model_config);
    opt.zero_grad();
    Tape tape(true, &dropout_rng);
    double loss_value = 0.0;
    try {
      Tensor loss = weighted_nll_loss(tape, out.model.logits(tape, batch), batch);
      loss_value = loss.item();
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw TrainingError("train_low_level: non-finite value at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss_value)) {
      throw TrainingError("train_low_level: loss is " + std::to_string(loss_value) + " at step " + std::to_string(step));
    }
    clip_grad_norm(params, config.grad_clip);
    opt.step(warmup_lr(config.lr, step, config.warmup_steps));
    if (step % config.log_every == 0 || step + 1 == config.steps) out.curve.push_back({step, loss_value});
  }
  return out;
}

// Action distribution for the last step of `window` (whose action is absent).
inline std::vector<double> action_probabilities(const CausalTransformer& model, const PolicyWindow& window) {
  Tape tape;
  const auto batch = tokenize(window, model.config());
  Tensor logits = model.logits(tape, batch);
  const std::size_t A = model.config().action_vocab;
  return softmax_row(logits.data().subspan((batch.steps() - 1) * A, A));
}

// ---------------------------------------------------------------------------
// Building low-level training data

inline std::vector<double> maybe_zero(std::vector<double> p, bool use_prompt) {
  if (!use_prompt) std::fill(p.begin(), p.end(), 0.0);
  return p;
}

// Transitions with prompts already relabeled; one weight per transition in dataset order.
inline std::vector<PolicyTrajectory> to_policy_trajectories(const OfflineDataset& d, const GridWorldSpec& env,
                                                            const std::vector<double>& weights, bool use_prompt) {
  if (weights.size() != d.transitions()) throw std::invalid_argument("policy data: one weight per transition required");
  std::vector<PolicyTrajectory> out;
  std::size_t k = 0;
  for (const auto& tr : d.trajectories) {
    PolicyTrajectory p;
    for (std::size_t t = 0; t < tr.size(); ++t, ++k) {
      const auto& x = tr.steps[t];
      if (x.prompt.empty()) throw std::invalid_argument("policy data: transition without a prompt");
      p.push_back({maybe_zero(x.prompt, use_prompt), env.encode(x.state), x.action, t, weights[k]});
    }
    out.push_back(std::move(p));
  }
  return out;
}

// V-ADT: p_t = V(s_t), w_t = awr(Q(s_t, a_t) - V(s_t)).
inline std::vector<double> relabel_value_prompts(OfflineDataset& d, const CriticNet& critic, const TrainConfig& c) {
  if (!critic.fitted()) throw std::logic_error("value prompts: critic has not been fitted");
  std::vector<std::size_t> s, a;
  for (const auto& tr : d.trajectories)
    for (const auto& x : tr.steps) {
      if (!critic.in_support(x.state)) {
        throw std::out_of_range("value prompts: state " + std::to_string(x.state) + " outside the critic's support");
      }
      s.push_back(x.state);
      a.push_back(x.action);
    }
  const auto v = critic.values(s);
  const auto q = critic.action_values(s, a);
  std::vector<double> adv(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) adv[i] = q[i] - v[i];
  std::size_t k = 0;
  relabel_prompts(d, [&](const Transition&) { return std::vector<double>{v[k++]}; });
  if (!c.use_weights) return std::vector<double>(adv.size(), 1.0);
  return awr_weights(adv, c.alpha, c.weight_clip);
}

// DT: p_t = R_t, unit weights.
inline std::vector<double> relabel_rtg_prompts(OfflineDataset& d) {
  relabel_return_to_go(d);
  relabel_prompts(d, [](const Transition& t) { return std::vector<double>{*t.return_to_go}; });
  return std::vector<double>(d.transitions(), 1.0);
}

// ---------------------------------------------------------------------------
// Goal-prompted high level: a tabular categorical over next subgoal states.

struct HighLevelConfig {
  std::size_t way_step = 3;
  double alpha = 1.0;
  double weight_clip = 100.0;
  std::size_t steps = 300;
  double lr = 0.1;
  std::uint64_t seed = 0;
  CriticConfig goals;  // relabeling mixture; gamma is taken from the critic
};

class SubgoalPolicy {
 public:
  SubgoalPolicy() = default;
  explicit SubgoalPolicy(std::size_t num_states)
      : n_(num_states), logits_(nn::constant_init({num_states * num_states, num_states}, 0.0)) {}

  std::size_t num_states() const { return n_; }
  bool observed(std::size_t s, std::size_t g) const { return observed_.count(s * n_ + g) > 0; }

  std::vector<double> probabilities(std::size_t s, std::size_t g) const {
    check(s, g);
    return softmax_row(logits_.data().subspan((s * n_ + g) * n_, n_));
  }

  // argmax subgoal; g itself when (s, g) never occurred in training.
  std::size_t subgoal(std::size_t s, std::size_t g) const {
    if (s == g || !observed(s, g)) return g;
    const auto row = logits_.data().subspan((s * n_ + g) * n_, n_);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }

  ParameterList parameters() const { return {{"subgoal.logits", logits_}}; }
  const std::set<std::size_t>& observed_keys() const { return observed_; }
  void set_observed(std::set<std::size_t> keys) { observed_ = std::move(keys); }

  Tensor& logits() { return logits_; }

 private:
  void check(std::size_t s, std::size_t g) const {
    if (s >= n_ || g >= n_) throw std::out_of_range("subgoal policy: state out of range");
  }
  std::size_t n_ = 0;
  Tensor logits_;
  std::set<std::size_t> observed_;
};

struct SubgoalTuple {
  std::size_t from, goal, target;
  double advantage;
  double weight;  // data-distribution mass
};

using GoalValueFn = std::function<double(std::size_t, std::size_t)>;

// k-step jumps (s_t, s_{t+k}, g) with goals from the relabeling mixture. A
// jump that passes through g stops there.
inline std::vector<SubgoalTuple> subgoal_tuples(const OfflineDataset& d, const GoalValueFn& value, double gamma,
                                                const HighLevelConfig& c) {
  if (c.way_step == 0) throw std::invalid_argument("subgoal tuples: way step must be >= 1");
  const auto random_goals = random_goal_weights(d);
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::pair<double, double>> rows;  // -> (mass, adv)
  std::size_t positions = 0;
  for (const auto& tr : d.trajectories) positions += tr.states().size();
  for (const auto& tr : d.trajectories) {
    const auto states = tr.states();
    const std::size_t last = states.size() - 1;
    for (std::size_t t = 0; t <= last; ++t) {
      for (const auto& [g, p] : goal_distribution(states, t, random_goals, c.goals)) {
        std::size_t end = std::min(t + c.way_step, last);
        for (std::size_t u = t; u <= end; ++u)
          if (states[u] == g) {
            end = u;
            break;
          }
        if (end == t && states[t] != g) continue;  // a clamped jump to itself makes no progress
        double ret = 0.0, disc = 1.0;
        for (std::size_t u = t; u < end; ++u) {
          ret += disc * (states[u] == g ? 0.0 : -1.0);
          disc *= gamma;
        }
        const double adv = ret + disc * value(states[end], g) - value(states[t], g);
        auto& row = rows[{states[t], g, states[end]}];
        row.first += p / static_cast<double>(positions);
        row.second = adv;
      }
    }
  }
  std::vector<SubgoalTuple> out;
  for (const auto& [key, v] : rows) {
    const auto& [s, g, target] = key;
    out.push_back({s, g, target, v.second, v.first});
  }
  return out;
}

inline std::vector<SubgoalTuple> subgoal_tuples(const OfflineDataset& d, const CriticNet& critic,
                                                const HighLevelConfig& c) {
  if (!critic.fitted() || !critic.goal_conditioned()) {
    throw std::logic_error("subgoal tuples: need a fitted goal-conditioned critic");
  }
  return subgoal_tuples(
      d, [&critic](std::size_t s, std::size_t g) { return critic.value(s, g); }, critic.gamma(), c);
}

// Weighted NLL of the subgoal categorical, full batch over the exact tuple
// distribution. Tuples sharing (s, g) are folded into one soft-target row.
inline SubgoalPolicy train_goal_high_level(const std::vector<SubgoalTuple>& tuples, std::size_t num_states,
                                           const HighLevelConfig& c, std::vector<LossPoint>* curve = nullptr) {
  if (tuples.empty()) throw std::invalid_argument("train_goal_high_level: no training tuples");
  SubgoalPolicy policy(num_states);
  const std::size_t n = num_states;
  std::vector<double> adv;
  for (const auto& t : tuples) adv.push_back(t.advantage);
  const auto w = awr_weights(adv, c.alpha, c.weight_clip);
  std::map<std::size_t, std::size_t> row_of;  // key -> row
  std::vector<std::size_t> keys;
  for (const auto& t : tuples) {
    const std::size_t key = t.from * n + t.goal;
    if (row_of.emplace(key, keys.size()).second) keys.push_back(key);
  }
  std::vector<double> targets(keys.size() * n, 0.0);
  for (std::size_t i = 0; i < tuples.size(); ++i) {
    targets[row_of[tuples[i].from * n + tuples[i].goal] * n + tuples[i].target] += w[i] * tuples[i].weight;
  }
  const Tensor target_matrix = Tensor::constant({keys.size(), n}, std::move(targets));
  ParameterList params = policy.parameters();
  AdamW opt(params, AdamWOptions{c.lr, 0.9, 0.999, 1e-8, 0.0});
  for (std::size_t step = 0; step < c.steps; ++step) {
    opt.zero_grad();
    Tape tape;
    const Tensor logp = tape.log_softmax(tape.embedding(policy.logits(), keys));
    Tensor loss = tape.scale(tape.sum(tape.mul(logp, target_matrix)), -1.0);
    if (curve && (step % 10 == 0 || step + 1 == c.steps)) curve->push_back({step, loss.item()});
    tape.backward(loss);
    opt.step();
  }
  policy.set_observed(std::set<std::size_t>(keys.begin(), keys.end()));
  return policy;
}

inline SubgoalPolicy train_goal_high_level(const OfflineDataset& d, const CriticNet& critic, const HighLevelConfig& c,
                                           std::vector<LossPoint>* curve = nullptr) {
  if (d.transitions() == 0) throw std::invalid_argument("train_goal_high_level: empty dataset");
  return train_goal_high_level(subgoal_tuples(d, critic, c), critic.num_states(), c, curve);
}

// G-ADT: p_t = enc(subgoal(s_t, g)), w_t = awr(r(s_t, p) + gamma V(s_{t+1}, p) - V(s_t, p)).
inline std::vector<double> relabel_goal_prompts(OfflineDataset& d, const GridWorldSpec& env, const CriticNet& critic,
                                                const SubgoalPolicy& high, std::size_t goal, const TrainConfig& c) {
  if (!critic.fitted() || !critic.goal_conditioned()) throw std::logic_error("goal prompts: need a fitted goal critic");
  std::vector<double> adv;
  for (auto& tr : d.trajectories)
    for (auto& x : tr.steps) {
      if (!critic.in_support(x.state)) {
        throw std::out_of_range("goal prompts: state " + std::to_string(x.state) + " outside the critic's support");
      }
      const std::size_t p = high.subgoal(x.state, goal);
      x.goal = goal;
      x.prompt = env.encode(p);
      const double r = x.state == p ? 0.0 : -1.0;
      const double boot = x.state == p ? 0.0 : critic.gamma() * critic.value(x.next_state, p);
      adv.push_back(r + boot - critic.value(x.state, p));
    }
  if (!c.use_weights) return std::vector<double>(adv.size(), 1.0);
  return awr_weights(adv, c.alpha, c.weight_clip);
}

// ---------------------------------------------------------------------------
// Idealized DT: exact empirical pi(a | history, s, R) by counting.

class IdealizedDTTable {
 public:
  struct Query {
    std::vector<double> probabilities;  // over kNumActions
    bool out_of_distribution = false;
  };

  explicit IdealizedDTTable(const OfflineDataset& dataset) {
    OfflineDataset d = dataset;
    relabel_return_to_go(d);
    for (const auto& tr : d.trajectories) {
      std::vector<std::size_t> prefix;
      for (const auto& x : tr.steps) {
        const long r = quantize(*x.return_to_go);
        ++flat_[{x.state, r}][x.action];
        ++history_[{prefix, x.state, r}][x.action];
        ++at_history_state_[{prefix, x.state}][x.action];
        ++at_state_[x.state][x.action];
        prefix.push_back(x.state);
      }
    }
  }

  // Context-free lookup of (s, R).
  Query query(std::size_t s, double rtg) const {
    auto it = flat_.find({s, quantize(rtg)});
    if (it != flat_.end()) return {normalize(it->second), false};
    return {fallback(at_state_, s), true};
  }

  // Lookup conditioned on the visited-state history; unseen keys fall back to
  // uniform over actions observed at the same history and state (or at s).
  Query query(const std::vector<std::size_t>& history, std::size_t s, double rtg) const {
    auto it = history_.find({history, s, quantize(rtg)});
    if (it != history_.end()) return {normalize(it->second), false};
    auto hs = at_history_state_.find({history, s});
    if (hs != at_history_state_.end()) return {uniform_over(hs->second), true};
    return {fallback(at_state_, s), true};
  }

 private:
  using Counts = std::map<std::size_t, std::size_t>;

  static long quantize(double r) { return std::lround(r * 1e6); }

  static std::vector<double> normalize(const Counts& c) {
    std::vector<double> p(kNumActions, 0.0);
    double n = 0.0;
    for (const auto& [a, k] : c) n += static_cast<double>(k);
    for (const auto& [a, k] : c) p[a] = static_cast<double>(k) / n;
    return p;
  }

  static std::vector<double> uniform_over(const Counts& c) {
    std::vector<double> p(kNumActions, 0.0);
    for (const auto& [a, k] : c) p[a] = 1.0 / static_cast<double>(c.size());
    return p;
  }

  static std::vector<double> fallback(const std::map<std::size_t, Counts>& at, std::size_t s) {
    auto it = at.find(s);
    if (it != at.end()) return uniform_over(it->second);
    return std::vector<double>(kNumActions, 1.0 / static_cast<double>(kNumActions));
  }

  std::map<std::pair<std::size_t, long>, Counts> flat_;
  std::map<std::tuple<std::vector<std::size_t>, std::size_t, long>, Counts> history_;
  std::map<std::pair<std::vector<std::size_t>, std::size_t>, Counts> at_history_state_;
  std::map<std::size_t, Counts> at_state_;
};

// Exact distribution over episode returns when acting with the table from
// `start`, decrementing the RTG by each reward.
inline std::map<double, double> enumerate_table_returns(const GridWorldSpec& env, const IdealizedDTTable& table,
                                                        std::size_t start, double rtg) {
  std::map<double, double> out;
  std::function<void(std::vector<std::size_t>, std::size_t, double, double, double, std::size_t)> walk =
      [&](std::vector<std::size_t> hist, std::size_t s, double r_hat, double ret, double prob, std::size_t t) {
        if (env.is_terminal(s) || t >= env.horizon) {
          out[ret] += prob;
          return;
        }
        const auto q = table.query(hist, s, r_hat);
        hist.push_back(s);
        for (std::size_t a = 0; a < kNumActions; ++a) {
          if (q.probabilities[a] <= 0.0) continue;
          const double r = env.reward(s, a);
          walk(hist, env.next_state(s, a), r_hat - r, ret + r, prob * q.probabilities[a], t + 1);
        }
      };
  walk({}, start, rtg, 0.0, 1.0, 0);
  return out;
}

}  // namespace adt
