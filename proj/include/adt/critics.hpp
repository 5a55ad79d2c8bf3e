#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "adt/dataset.hpp"
#include "adt/env.hpp"
#include "adt/nn.hpp"
#include "adt/optim.hpp"
#include "adt/rng.hpp"
#include "adt/tensor.hpp"

namespace adt {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// |tau - 1(x < 0)| * x^2
inline double expectile_loss(double x, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("expectile_loss: tau must lie in (0, 1)");
  return (x < 0.0 ? 1.0 - tau : tau) * x * x;
}

// Weighted tau-expectile of a sample by iteratively reweighted means; the
// weights |tau - 1(z < v)| only change when v crosses a sample, so this
// terminates with the exact minimizer.
inline double fit_scalar_expectile(const std::vector<double>& sample, double tau,
                                   const std::vector<double>& weights = {}) {
  if (sample.empty()) throw std::invalid_argument("fit_scalar_expectile: empty sample");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("fit_scalar_expectile: tau must lie in (0, 1)");
  if (!weights.empty() && weights.size() != sample.size()) {
    throw std::invalid_argument("fit_scalar_expectile: weights and sample differ in length");
  }
  auto w_of = [&](std::size_t i) { return weights.empty() ? 1.0 : weights[i]; };
  double v = 0.0, total = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    v += w_of(i) * sample[i];
    total += w_of(i);
  }
  v /= total;
  for (int iter = 0; iter < 1000; ++iter) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const double c = (sample[i] < v ? 1.0 - tau : tau) * w_of(i);
      num += c * sample[i];
      den += c;
    }
    const double next = num / den;
    if (next == v) break;
    v = next;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Exact in-sample optimal values on the empirical MDP.

struct EmpiricalMdp {
  struct Outcome {
    std::size_t next_state;
    bool done;
    double probability;
  };
  struct Entry {
    double reward = 0.0;  // mean observed reward
    std::vector<Outcome> outcomes;
  };
  std::map<std::pair<std::size_t, std::size_t>, Entry> support;  // (s, a) -> entry
  std::set<std::size_t> states;                                   // every state seen, including final ones

  static EmpiricalMdp from(const OfflineDataset& d) {
    EmpiricalMdp m;
    std::map<std::pair<std::size_t, std::size_t>, std::map<std::pair<std::size_t, bool>, std::size_t>> counts;
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> rewards;
    for (const auto& tr : d.trajectories) {
      for (const auto& t : tr.steps) {
        ++counts[{t.state, t.action}][{t.next_state, t.done}];
        auto& r = rewards[{t.state, t.action}];
        r.first += t.reward;
        ++r.second;
        m.states.insert(t.state);
        m.states.insert(t.next_state);
      }
    }
    for (const auto& [sa, outs] : counts) {
      Entry e;
      const auto& [rsum, n] = rewards[sa];
      e.reward = rsum / static_cast<double>(n);
      for (const auto& [key, c] : outs) {
        e.outcomes.push_back({key.first, key.second, static_cast<double>(c) / static_cast<double>(n)});
      }
      m.support.emplace(sa, std::move(e));
    }
    return m;
  }

  std::vector<std::size_t> actions_at(std::size_t s) const {
    std::vector<std::size_t> out;
    for (auto it = support.lower_bound({s, 0}); it != support.end() && it->first.first == s; ++it)
      out.push_back(it->first.second);
    return out;
  }
};

class ExactValueTable {
 public:
  double gamma = 1.0;
  std::map<std::size_t, double> v;
  std::map<std::pair<std::size_t, std::size_t>, double> q;

  bool has_state(std::size_t s) const { return v.count(s) > 0; }
  bool in_support(std::size_t s, std::size_t a) const { return q.count({s, a}) > 0; }

  double value(std::size_t s) const {
    auto it = v.find(s);
    if (it == v.end()) throw std::out_of_range("exact values: state " + std::to_string(s) + " not in the dataset");
    return it->second;
  }

  // Out-of-support actions are never evaluated.
  double action_value(std::size_t s, std::size_t a) const {
    auto it = q.find({s, a});
    if (it == q.end()) {
      throw std::out_of_range("exact values: (" + std::to_string(s) + ", " + std::to_string(a) +
                              ") is outside the dataset support");
    }
    return it->second;
  }

  double value_range() const {
    if (v.empty()) return 0.0;
    auto [lo, hi] = std::minmax_element(v.begin(), v.end(), [](auto& x, auto& y) { return x.second < y.second; });
    return hi->second - lo->second;
  }

  std::string to_text(const GridWorldSpec* env = nullptr) const {
    std::ostringstream os;
    os.precision(12);
    os << "# state value\n";
    for (const auto& [s, val] : v) os << name(s, env) << ' ' << val << '\n';
    os << "# state action q\n";
    for (const auto& [sa, val] : q) os << name(sa.first, env) << ' ' << action_name(sa.second) << ' ' << val << '\n';
    return os.str();
  }

 private:
  static std::string name(std::size_t s, const GridWorldSpec* env) {
    if (env) {
      if (auto l = env->label_of(s)) return std::string(1, *l);
    }
    return std::to_string(s);
  }
};

namespace detail {

// Kahn's algorithm over non-terminal edges; empty result means a cycle.
inline std::optional<std::vector<std::size_t>> topological_order(const EmpiricalMdp& m) {
  std::map<std::size_t, std::set<std::size_t>> succ;
  std::map<std::size_t, std::size_t> indeg;
  for (std::size_t s : m.states) indeg[s] = 0;
  for (const auto& [sa, e] : m.support)
    for (const auto& o : e.outcomes)
      if (!o.done && succ[sa.first].insert(o.next_state).second) ++indeg[o.next_state];
  std::vector<std::size_t> order, ready;
  for (const auto& [s, d] : indeg)
    if (d == 0) ready.push_back(s);
  while (!ready.empty()) {
    const std::size_t s = ready.back();
    ready.pop_back();
    order.push_back(s);
    for (std::size_t t : succ[s])
      if (--indeg[t] == 0) ready.push_back(t);
  }
  if (order.size() != m.states.size()) return std::nullopt;
  return order;
}

inline double backup(const EmpiricalMdp::Entry& e, double gamma, const std::map<std::size_t, double>& v) {
  double x = e.reward;
  for (const auto& o : e.outcomes)
    if (!o.done) x += gamma * o.probability * v.at(o.next_state);
  return x;
}

}  // namespace detail

// Optimal values of the empirical MDP, maximizing only over observed actions.
// States with no observed action (final states of timeouts, dead ends) get 0.
inline ExactValueTable exact_dp(const OfflineDataset& d, double gamma, std::optional<std::size_t> horizon = std::nullopt) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("exact_dp: gamma must lie in [0, 1]");
  const auto m = EmpiricalMdp::from(d);
  ExactValueTable t;
  t.gamma = gamma;
  for (std::size_t s : m.states) t.v[s] = 0.0;

  auto sweep = [&]() {
    double change = 0.0;
    for (std::size_t s : m.states) {
      const auto acts = m.actions_at(s);
      if (acts.empty()) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a : acts) best = std::max(best, detail::backup(m.support.at({s, a}), gamma, t.v));
      change = std::max(change, std::abs(best - t.v[s]));
      t.v[s] = best;
    }
    return change;
  };

  if (gamma == 1.0) {
    if (auto order = detail::topological_order(m)) {
      for (auto it = order->rbegin(); it != order->rend(); ++it) {
        const auto acts = m.actions_at(*it);
        if (acts.empty()) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t a : acts) best = std::max(best, detail::backup(m.support.at({*it, a}), gamma, t.v));
        t.v[*it] = best;
      }
    } else if (horizon) {
      // Finite-horizon values: H synchronous backups from zero.
      for (std::size_t h = 0; h < *horizon; ++h) {
        const auto prev = t.v;
        for (std::size_t s : m.states) {
          const auto acts = m.actions_at(s);
          if (acts.empty()) continue;
          double best = -std::numeric_limits<double>::infinity();
          for (std::size_t a : acts) best = std::max(best, detail::backup(m.support.at({s, a}), gamma, prev));
          t.v[s] = best;
        }
      }
    } else {
      throw std::invalid_argument("exact_dp: gamma = 1 on a cyclic empirical MDP needs a horizon");
    }
  } else {
    for (std::size_t it = 0; it < 1000000; ++it)
      if (sweep() < 1e-10) break;
  }
  for (const auto& [sa, e] : m.support) t.q[sa] = detail::backup(e, gamma, t.v);
  return t;
}

// R*(s): best undiscounted return observed from any occurrence of s.
inline std::map<std::size_t, double> best_observed_return(const OfflineDataset& d) {
  std::map<std::size_t, double> out;
  auto note = [&](std::size_t s, double r) {
    auto it = out.find(s);
    if (it == out.end() || r > it->second) out[s] = r;
  };
  for (const auto& tr : d.trajectories) {
    double suffix = 0.0;
    if (!tr.empty()) note(tr.steps.back().next_state, 0.0);
    for (auto it = tr.steps.rbegin(); it != tr.steps.rend(); ++it) {
      suffix += it->reward;
      note(it->state, suffix);
    }
  }
  return out;
}

// Value of never reaching the goal within the horizon under reward -1 per step.
inline double goal_value_floor(double gamma, std::size_t horizon) {
  if (gamma == 1.0) return -static_cast<double>(horizon);
  return -(1.0 - std::pow(gamma, static_cast<double>(horizon))) / (1.0 - gamma);
}

// Exact in-sample universal values V*_D(s, g) under r = -1 until s = g. The
// empirical transitions are deterministic, so this is a shortest path over
// observed edges; pairs with no observed path get the floor value.
class ExactGoalTable {
 public:
  ExactGoalTable() = default;
  ExactGoalTable(const OfflineDataset& d, std::size_t num_states, double gamma, std::size_t horizon)
      : n_(num_states), gamma_(gamma), floor_(goal_value_floor(gamma, horizon)) {
    std::vector<std::set<std::size_t>> preds(n_);
    for (const auto& tr : d.trajectories)
      for (const auto& t : tr.steps)
        if (t.next_state != t.state) preds[t.next_state].insert(t.state);
    dist_.assign(n_ * n_, kNone);
    for (std::size_t g = 0; g < n_; ++g) {
      std::vector<std::size_t> frontier{g};
      dist_[g * n_ + g] = 0;
      while (!frontier.empty()) {
        std::vector<std::size_t> next;
        for (std::size_t u : frontier)
          for (std::size_t p : preds[u])
            if (dist_[p * n_ + g] == kNone) {
              dist_[p * n_ + g] = dist_[u * n_ + g] + 1;
              next.push_back(p);
            }
        frontier.swap(next);
      }
    }
  }

  std::optional<std::size_t> distance(std::size_t s, std::size_t g) const {
    const std::size_t d = dist_.at(s * n_ + g);
    return d == kNone ? std::nullopt : std::optional<std::size_t>(d);
  }

  double value(std::size_t s, std::size_t g) const {
    const auto d = distance(s, g);
    if (!d) return floor_;
    if (gamma_ == 1.0) return -static_cast<double>(*d);
    return -(1.0 - std::pow(gamma_, static_cast<double>(*d))) / (1.0 - gamma_);
  }

  double floor() const { return floor_; }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t n_ = 0;
  double gamma_ = 1.0;
  double floor_ = 0.0;
  std::vector<std::size_t> dist_;
};

// ---------------------------------------------------------------------------
// Learned critics

enum class CriticArch { Tabular, Mlp };

inline CriticArch parse_critic_arch(const std::string& s) {
  if (s == "tabular") return CriticArch::Tabular;
  if (s == "mlp") return CriticArch::Mlp;
  throw std::invalid_argument("unknown critic architecture '" + s + "' (expected tabular|mlp)");
}
inline const char* to_string(CriticArch a) { return a == CriticArch::Tabular ? "tabular" : "mlp"; }

struct CriticConfig {
  double tau = 0.9;
  double polyak = 0.005;
  double gamma = 0.99;
  double lr = 3e-4;
  std::size_t batch_size = 256;  // 0: full batch over the exact data distribution
  std::size_t steps = 2000;
  CriticArch arch = CriticArch::Mlp;
  std::vector<std::size_t> hidden{64, 64};
  bool twin_q = false;
  std::uint64_t seed = 0;
  std::size_t horizon = 50;  // bounds goal values and the divergence check
  // Goal relabeling mixture for goal-conditioned critics.
  double goal_future = 0.5;
  double goal_final = 0.2;
  double goal_random = 0.3;
  double goal_geometric = 0.5;  // continuation probability of the future-offset draw
  std::size_t log_every = 50;

  void validate() const {
    if (!(tau >= 0.5 && tau < 1.0)) throw std::invalid_argument("critic config: tau must lie in [0.5, 1)");
    if (!(polyak > 0.0 && polyak <= 1.0)) throw std::invalid_argument("critic config: polyak rate must lie in (0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("critic config: gamma must lie in [0, 1]");
    if (!(lr > 0.0)) throw std::invalid_argument("critic config: lr must be > 0");
    if (steps == 0) throw std::invalid_argument("critic config: steps must be >= 1");
    const double mix = goal_future + goal_final + goal_random;
    if (goal_future < 0 || goal_final < 0 || goal_random < 0 || std::abs(mix - 1.0) > 1e-9) {
      throw std::invalid_argument("critic config: goal mixture weights must be non-negative and sum to 1");
    }
    if (!(goal_geometric >= 0.0 && goal_geometric < 1.0)) {
      throw std::invalid_argument("critic config: goal_geometric must lie in [0, 1)");
    }
  }
};

// Rows of inputs for a function approximator: integer keys for the tabular
// form and dense features for the MLP form.
struct CriticInputs {
  std::vector<std::size_t> keys;
  std::vector<double> features;  // row-major [rows, feature_dim]
  std::size_t rows() const { return keys.size(); }
};

// out = table[key] (tabular) or mlp(features), shape [rows, outputs].
class FunctionApprox {
 public:
  FunctionApprox() = default;
  FunctionApprox(CriticArch arch, std::size_t keys, std::size_t feature_dim, std::size_t outputs,
                 const std::vector<std::size_t>& hidden, Rng& rng)
      : arch_(arch), feature_dim_(feature_dim), outputs_(outputs) {
    if (arch == CriticArch::Tabular) {
      table_ = nn::constant_init({keys, outputs}, 0.0);
    } else {
      mlp_ = nn::Mlp(feature_dim, hidden, outputs, rng);
    }
  }

  Tensor forward(Tape& tape, const CriticInputs& in) const {
    if (arch_ == CriticArch::Tabular) return tape.embedding(table_, in.keys);
    return mlp_(tape, Tensor::constant({in.rows(), feature_dim_}, in.features));
  }

  std::vector<double> eval(const CriticInputs& in) const {
    if (in.rows() == 0) return {};
    Tape tape;
    Tensor out = forward(tape, in);
    return {out.data().begin(), out.data().end()};
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    if (arch_ == CriticArch::Tabular) out.push_back({prefix + ".table", table_});
    else mlp_.collect(prefix, out);
  }

  std::size_t outputs() const { return outputs_; }
  CriticArch arch() const { return arch_; }

 private:
  CriticArch arch_ = CriticArch::Tabular;
  std::size_t feature_dim_ = 0;
  std::size_t outputs_ = 1;
  Tensor table_;
  nn::Mlp mlp_;
};

// target <- (1 - rho) * target + rho * online
inline void polyak_update(ParameterList& target, const ParameterList& online, double rho) {
  if (target.size() != online.size()) throw std::invalid_argument("polyak_update: parameter lists differ");
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto dst = target[i].tensor.mutable_data();
    const auto src = online[i].tensor.data();
    if (dst.size() != src.size()) throw std::invalid_argument("polyak_update: shape mismatch at " + target[i].name);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = (1.0 - rho) * dst[j] + rho * src[j];
  }
}

inline void copy_parameters(ParameterList& dst, const ParameterList& src) { polyak_update(dst, src, 1.0); }

struct CriticCurvePoint {
  std::size_t step;
  double value_loss;
  double q_loss;  // 0 for goal-conditioned critics
};

// V_phi and Q_psi over states (IQL), or V_phi over (state, goal) pairs (HIQL),
// with Polyak target copies.
class CriticNet {
 public:
  CriticNet() = default;

  CriticNet(const GridWorldSpec& env, bool goal_conditioned, const CriticConfig& config)
      : goal_conditioned_(goal_conditioned),
        arch_(config.arch),
        hidden_(config.hidden),
        twin_q_(config.twin_q),
        num_states_(env.num_states()),
        gamma_(config.gamma),
        floor_(goal_value_floor(config.gamma, config.horizon)),
        env_hash_(env.hash()) {
    for (std::size_t s = 0; s < num_states_; ++s) codes_.push_back(env.encode(s));
    Rng rng = make_stream(config.seed, "init/critic");
    const std::size_t dim = codes_.empty() ? 0 : codes_[0].size();
    if (goal_conditioned_) {
      v_ = FunctionApprox(arch_, num_states_ * num_states_, 2 * dim, 1, hidden_, rng);
      v_target_ = clone(v_, num_states_ * num_states_, 2 * dim, 1);
    } else {
      v_ = FunctionApprox(arch_, num_states_, dim, 1, hidden_, rng);
      for (int i = 0; i < (twin_q_ ? 2 : 1); ++i) {
        q_.push_back(FunctionApprox(arch_, num_states_, dim, kNumActions, hidden_, rng));
        q_target_.push_back(clone(q_.back(), num_states_, dim, kNumActions));
      }
    }
  }

  bool goal_conditioned() const { return goal_conditioned_; }
  bool twin_q() const { return twin_q_; }
  bool fitted() const { return fitted_; }
  CriticArch arch() const { return arch_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  std::size_t num_states() const { return num_states_; }
  double gamma() const { return gamma_; }
  double floor() const { return floor_; }
  std::uint64_t env_hash() const { return env_hash_; }
  const std::set<std::size_t>& support() const { return support_; }
  bool in_support(std::size_t s) const { return support_.count(s) > 0; }
  const std::vector<CriticCurvePoint>& curve() const { return curve_; }

  void mark_fitted(std::set<std::size_t> support) {
    support_ = std::move(support);
    fitted_ = true;
  }

  // ----- queries -----

  double value(std::size_t s) const { return values(std::vector<std::size_t>{s})[0]; }
  double value(std::size_t s, std::size_t g) const { return goal_values({s}, {g})[0]; }

  std::vector<double> values(const std::vector<std::size_t>& states) const {
    require(!goal_conditioned_, "values(s) on a goal-conditioned critic");
    return v_.eval(state_inputs(states));
  }

  // V(g, g) is pinned to 0.
  std::vector<double> goal_values(const std::vector<std::size_t>& states, const std::vector<std::size_t>& goals,
                                  bool target = false) const {
    require(goal_conditioned_, "goal_values on a state critic");
    auto out = (target ? v_target_ : v_).eval(goal_inputs(states, goals));
    for (std::size_t i = 0; i < out.size(); ++i)
      if (states[i] == goals[i]) out[i] = 0.0;
    return out;
  }

  double action_value(std::size_t s, std::size_t a, bool target = false) const {
    return action_values({s}, {a}, target)[0];
  }

  // min over twin heads when enabled.
  std::vector<double> action_values(const std::vector<std::size_t>& states, const std::vector<std::size_t>& actions,
                                    bool target = false) const {
    require(!goal_conditioned_, "action_values on a goal-conditioned critic");
    const auto in = state_inputs(states);
    std::vector<double> out(states.size(), std::numeric_limits<double>::infinity());
    for (const auto& head : target ? q_target_ : q_) {
      const auto all = head.eval(in);
      for (std::size_t i = 0; i < states.size(); ++i) out[i] = std::min(out[i], all[i * kNumActions + actions[i]]);
    }
    return out;
  }

  // ----- parameters -----

  ParameterList online_v() const { return collect_one(v_, "v"); }
  ParameterList target_v() const { return collect_one(v_target_, "v_target"); }
  ParameterList online_q() const {
    ParameterList out;
    for (std::size_t i = 0; i < q_.size(); ++i) q_[i].collect("q" + std::to_string(i + 1), out);
    return out;
  }
  ParameterList target_q() const {
    ParameterList out;
    for (std::size_t i = 0; i < q_target_.size(); ++i) q_target_[i].collect("q" + std::to_string(i + 1) + "_target", out);
    return out;
  }

  ParameterList parameters() const {
    ParameterList out = online_v();
    auto add = [&out](ParameterList more) { out.insert(out.end(), more.begin(), more.end()); };
    if (goal_conditioned_) add(target_v());
    add(online_q());
    add(target_q());
    return out;
  }

  const FunctionApprox& v_net() const { return v_; }
  const std::vector<FunctionApprox>& q_nets() const { return q_; }

  CriticInputs state_inputs(const std::vector<std::size_t>& states) const {
    CriticInputs in;
    for (std::size_t s : states) {
      check_state(s);
      in.keys.push_back(s);
      if (arch_ == CriticArch::Mlp) in.features.insert(in.features.end(), codes_[s].begin(), codes_[s].end());
    }
    return in;
  }

  CriticInputs goal_inputs(const std::vector<std::size_t>& states, const std::vector<std::size_t>& goals) const {
    if (states.size() != goals.size()) throw std::invalid_argument("critic: states and goals differ in length");
    CriticInputs in;
    for (std::size_t i = 0; i < states.size(); ++i) {
      check_state(states[i]);
      check_state(goals[i]);
      in.keys.push_back(states[i] * num_states_ + goals[i]);
      if (arch_ == CriticArch::Mlp) {
        in.features.insert(in.features.end(), codes_[states[i]].begin(), codes_[states[i]].end());
        in.features.insert(in.features.end(), codes_[goals[i]].begin(), codes_[goals[i]].end());
      }
    }
    return in;
  }

  // Metadata needed to rebuild an identical shell before loading a checkpoint.
  std::string describe() const {
    std::ostringstream os;
    os << "critic.goal_conditioned = " << (goal_conditioned_ ? "true" : "false") << '\n'
       << "critic.arch = " << to_string(arch_) << '\n'
       << "critic.twin_q = " << (twin_q_ ? "true" : "false") << '\n'
       << "critic.gamma = " << gamma_ << '\n'
       << "critic.hidden =";
    for (std::size_t h : hidden_) os << ' ' << h;
    os << "\ncritic.support =";
    for (std::size_t s : support_) os << ' ' << s;
    os << '\n';
    return os.str();
  }

 private:
  // Fresh parameters with the source's values; copies of FunctionApprox share tensors.
  FunctionApprox clone(const FunctionApprox& src, std::size_t keys, std::size_t dim, std::size_t outputs) const {
    Rng scratch(0);
    FunctionApprox copy(src.arch(), keys, dim, outputs, hidden_, scratch);
    auto dst = collect_one(copy, "x");
    copy_parameters(dst, collect_one(src, "x"));
    return copy;
  }

  static ParameterList collect_one(const FunctionApprox& f, const std::string& prefix) {
    ParameterList out;
    f.collect(prefix, out);
    return out;
  }

  void check_state(std::size_t s) const {
    if (s >= num_states_) throw std::out_of_range("critic: state " + std::to_string(s) + " out of range");
  }

  static void require(bool ok, const char* what) {
    if (!ok) throw std::logic_error(std::string("critic: ") + what);
  }

  bool goal_conditioned_ = false;
  CriticArch arch_ = CriticArch::Tabular;
  std::vector<std::size_t> hidden_;
  bool twin_q_ = false;
  std::size_t num_states_ = 0;
  double gamma_ = 1.0;
  double floor_ = 0.0;
  std::uint64_t env_hash_ = 0;
  std::vector<std::vector<double>> codes_;
  FunctionApprox v_, v_target_;
  std::vector<FunctionApprox> q_, q_target_;
  std::set<std::size_t> support_;
  bool fitted_ = false;
  std::vector<CriticCurvePoint> curve_;

  friend CriticNet fit_iql(const OfflineDataset&, const GridWorldSpec&, const CriticConfig&);
  friend CriticNet fit_hiql(const OfflineDataset&, const GridWorldSpec&, const CriticConfig&);
};

namespace detail {

inline double bound_of(const OfflineDataset& d) { return std::max(1.0, d.max_abs_return()); }

inline void check_divergence(const std::vector<double>& v, double bound, const char* who) {
  for (double x : v) {
    if (!std::isfinite(x) || std::abs(x) > 10.0 * bound) {
      throw DivergenceError(std::string(who) + ": value estimate " + std::to_string(x) + " exceeds 10x the return bound " +
                            std::to_string(bound));
    }
  }
}

// sum_i w_i * |tau - 1(d_i < 0)| * d_i^2 with d = target - pred.
inline Tensor weighted_expectile(Tape& tape, const Tensor& pred, const std::vector<double>& target,
                                 const std::vector<double>& w, double tau) {
  const std::size_t n = target.size();
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = w[i] * (target[i] - pred[i] < 0.0 ? 1.0 - tau : tau);
  const Tensor diff = tape.sub(Tensor::constant({n}, target), pred);
  return tape.sum(tape.mul(tape.mul(diff, diff), Tensor::constant({n}, std::move(c))));
}

inline Tensor weighted_squared(Tape& tape, const Tensor& pred, const std::vector<double>& target,
                               const std::vector<double>& w) {
  const std::size_t n = target.size();
  const Tensor diff = tape.sub(Tensor::constant({n}, target), pred);
  return tape.sum(tape.mul(tape.mul(diff, diff), Tensor::constant({n}, w)));
}

struct TransitionRow {
  std::size_t s, a, next;
  double r;
  bool done;
  auto key() const { return std::tie(s, a, next, r, done); }
  bool operator<(const TransitionRow& o) const { return key() < o.key(); }
};

template <typename Row>
struct WeightedRows {
  std::vector<Row> rows;
  std::vector<double> weights;  // sums to 1
};

// Fixed full batch (batch_size 0) or a fresh uniform minibatch per step.
template <typename Row>
class RowSampler {
 public:
  RowSampler(WeightedRows<Row> all, std::size_t batch_size, Rng rng)
      : all_(std::move(all)), batch_size_(batch_size), rng_(std::move(rng)) {
    cdf_.reserve(all_.weights.size());
    double acc = 0.0;
    for (double w : all_.weights) cdf_.push_back(acc += w);
  }

  WeightedRows<Row> next() {
    if (batch_size_ == 0) return all_;
    WeightedRows<Row> b;
    for (std::size_t i = 0; i < batch_size_; ++i) {
      const double u = uniform01(rng_) * cdf_.back();
      const std::size_t j = std::min<std::size_t>(
          static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin()), cdf_.size() - 1);
      b.rows.push_back(all_.rows[j]);
      b.weights.push_back(1.0 / static_cast<double>(batch_size_));
    }
    return b;
  }

 private:
  WeightedRows<Row> all_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<double> cdf_;
};

}  // namespace detail

// IQL: L_Q = E[(r + gamma V(s') - Q(s,a))^2], L_V = E[L_tau(Qbar(s,a) - V(s))].
inline CriticNet fit_iql(const OfflineDataset& d, const GridWorldSpec& env, const CriticConfig& config) {
  config.validate();
  if (d.transitions() == 0) throw std::invalid_argument("fit_iql: empty dataset");
  validate(d, env);
  CriticNet net(env, false, config);

  std::map<detail::TransitionRow, std::size_t> counts;
  std::set<std::size_t> support;
  for (const auto& tr : d.trajectories)
    for (const auto& t : tr.steps) {
      ++counts[{t.state, t.action, t.next_state, t.reward, t.done}];
      support.insert(t.state);
    }
  detail::WeightedRows<detail::TransitionRow> all;
  const double total = static_cast<double>(d.transitions());
  for (const auto& [row, c] : counts) {
    all.rows.push_back(row);
    all.weights.push_back(static_cast<double>(c) / total);
  }
  detail::RowSampler<detail::TransitionRow> sampler(std::move(all), config.batch_size, make_stream(config.seed, "critic/batch"));

  ParameterList v_params = net.online_v();
  ParameterList q_params = net.online_q();
  ParameterList q_targets = net.target_q();
  ParameterList trainable = v_params;
  trainable.insert(trainable.end(), q_params.begin(), q_params.end());
  AdamW opt(trainable, AdamWOptions{config.lr, 0.9, 0.999, 1e-8, 0.0});
  const double bound = detail::bound_of(d);

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = sampler.next();
    const std::size_t n = batch.rows.size();
    std::vector<std::size_t> s(n), a(n), next(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = batch.rows[i].s;
      a[i] = batch.rows[i].a;
      next[i] = batch.rows[i].next;
    }
    const auto v_next = net.values(next);
    const auto q_bar = net.action_values(s, a, true);
    std::vector<double> q_target(n);
    for (std::size_t i = 0; i < n; ++i) {
      q_target[i] = batch.rows[i].r + (batch.rows[i].done ? 0.0 : config.gamma * v_next[i]);
    }

    opt.zero_grad();
    Tape tape;
    const auto in = net.state_inputs(s);
    const Tensor v_pred = tape.reshape(net.v_net().forward(tape, in), {n});
    Tensor loss_v = detail::weighted_expectile(tape, v_pred, q_bar, batch.weights, config.tau);
    Tensor loss_q = Tensor::scalar(0.0);
    for (const auto& head : net.q_nets()) {
      loss_q = tape.add(loss_q, detail::weighted_squared(tape, tape.pick(head.forward(tape, in), a), q_target, batch.weights));
    }
    const double lv = loss_v.item(), lq = loss_q.item();
    tape.backward(tape.add(loss_v, loss_q));
    opt.step();
    polyak_update(q_targets, q_params, config.polyak);

    if (step % config.log_every == 0 || step + 1 == config.steps) {
      net.curve_.push_back({step, lv, lq});
      detail::check_divergence(v_pred.data().empty() ? std::vector<double>{}
                                                     : std::vector<double>(v_pred.data().begin(), v_pred.data().end()),
                               bound, "fit_iql");
    }
  }
  net.mark_fitted(std::move(support));
  return net;
}

// ---------------------------------------------------------------------------
// Goal relabeling for goal-conditioned critics and subgoal policies.

// Mixture over goals for position t of a trajectory with states s_0..s_T.
// Future offsets j >= 1 follow a geometric law truncated at s_T.
inline std::map<std::size_t, double> goal_distribution(const std::vector<std::size_t>& states, std::size_t t,
                                                       const std::map<std::size_t, double>& random_goals,
                                                       const CriticConfig& c) {
  std::map<std::size_t, double> out;
  const std::size_t last = states.size() - 1;
  double remaining = 1.0;
  for (std::size_t j = 1; t + j < last; ++j) {
    const double p = remaining * (1.0 - c.goal_geometric);
    out[states[t + j]] += c.goal_future * p;
    remaining -= p;
  }
  out[states[last]] += c.goal_future * remaining + c.goal_final;
  for (const auto& [g, p] : random_goals) out[g] += c.goal_random * p;
  return out;
}

inline std::map<std::size_t, double> random_goal_weights(const OfflineDataset& d) {
  std::map<std::size_t, double> out;
  double n = 0.0;
  for (const auto& tr : d.trajectories)
    for (std::size_t s : tr.states()) {
      out[s] += 1.0;
      n += 1.0;
    }
  for (auto& [s, w] : out) w /= n;
  return out;
}

inline std::size_t sample_goal(const std::vector<std::size_t>& states, std::size_t t,
                               const std::vector<std::size_t>& all_states, const CriticConfig& c, Rng& rng) {
  const double u = uniform01(rng);
  const std::size_t last = states.size() - 1;
  if (u < c.goal_future) {
    std::size_t j = 1;
    while (t + j < last && uniform01(rng) < c.goal_geometric) ++j;
    return states[std::min(t + j, last)];
  }
  if (u < c.goal_future + c.goal_final) return states[last];
  return all_states[uniform_index(rng, all_states.size())];
}

// HIQL action-free loss: E[L_tau(r(s, g) + gamma * m * Vbar(s', g) - V(s, g))]
// with r = 0, m = 0 when s = g and r = -1, m = 1 otherwise. Next states with
// no outgoing data (dead ends) bootstrap the floor value for goals other than themselves.
inline CriticNet fit_hiql(const OfflineDataset& d, const GridWorldSpec& env, const CriticConfig& config) {
  config.validate();
  if (d.transitions() == 0) throw std::invalid_argument("fit_hiql: empty dataset");
  validate(d, env);
  CriticNet net(env, true, config);

  struct Row {
    std::size_t s, next, g;
    bool operator<(const Row& o) const { return std::tie(s, next, g) < std::tie(o.s, o.next, o.g); }
  };
  std::set<std::size_t> support, has_outgoing;
  for (const auto& tr : d.trajectories)
    for (const auto& t : tr.steps) {
      support.insert(t.state);
      has_outgoing.insert(t.state);
    }

  detail::WeightedRows<Row> all;
  if (config.batch_size == 0) {
    const auto random_goals = random_goal_weights(d);
    std::map<Row, double> weights;
    const double total = static_cast<double>(d.transitions());
    for (const auto& tr : d.trajectories) {
      const auto states = tr.states();
      for (std::size_t t = 0; t < tr.size(); ++t)
        for (const auto& [g, p] : goal_distribution(states, t, random_goals, config))
          weights[{states[t], states[t + 1], g}] += p / total;
    }
    for (const auto& [row, w] : weights) {
      all.rows.push_back(row);
      all.weights.push_back(w);
    }
  }
  std::vector<std::size_t> all_states;
  for (const auto& tr : d.trajectories)
    for (std::size_t s : tr.states()) all_states.push_back(s);
  std::vector<std::pair<std::size_t, std::size_t>> positions;  // (trajectory, t)
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t t = 0; t < d.trajectories[i].size(); ++t) positions.emplace_back(i, t);

  Rng rng = make_stream(config.seed, "critic/batch");
  ParameterList v_params = net.online_v();
  ParameterList v_targets = net.target_v();
  AdamW opt(v_params, AdamWOptions{config.lr, 0.9, 0.999, 1e-8, 0.0});
  const double bound = std::max(detail::bound_of(d), std::abs(net.floor()));

  for (std::size_t step = 0; step < config.steps; ++step) {
    detail::WeightedRows<Row> batch;
    if (config.batch_size == 0) {
      batch = all;
    } else {
      for (std::size_t i = 0; i < config.batch_size; ++i) {
        const auto [ti, t] = positions[uniform_index(rng, positions.size())];
        const auto states = d.trajectories[ti].states();
        batch.rows.push_back({states[t], states[t + 1], sample_goal(states, t, all_states, config, rng)});
        batch.weights.push_back(1.0 / static_cast<double>(config.batch_size));
      }
    }
    const std::size_t n = batch.rows.size();
    std::vector<std::size_t> s(n), next(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = batch.rows[i].s;
      next[i] = batch.rows[i].next;
      g[i] = batch.rows[i].g;
    }
    const auto v_bar = net.goal_values(next, g, true);
    std::vector<double> target(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (s[i] == g[i]) {
        target[i] = 0.0;
        continue;
      }
      const bool dead_end = !has_outgoing.count(next[i]) && next[i] != g[i];
      target[i] = -1.0 + config.gamma * (dead_end ? net.floor() : v_bar[i]);
    }
    opt.zero_grad();
    Tape tape;
    const Tensor v_pred = tape.reshape(net.v_net().forward(tape, net.goal_inputs(s, g)), {n});
    Tensor loss = detail::weighted_expectile(tape, v_pred, target, batch.weights, config.tau);
    const double lv = loss.item();
    tape.backward(loss);
    opt.step();
    polyak_update(v_targets, v_params, config.polyak);
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      net.curve_.push_back({step, lv, 0.0});
      detail::check_divergence(std::vector<double>(v_pred.data().begin(), v_pred.data().end()), bound, "fit_hiql");
    }
  }
  net.mark_fitted(std::move(support));
  return net;
}

}  // namespace adt
