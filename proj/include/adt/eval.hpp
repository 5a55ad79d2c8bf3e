#pragma once

// Rollouts of trained policies in a gridworld, per-episode reports and their
// CSV/JSON writers.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "adt/config.hpp"
#include "adt/critics.hpp"
#include "adt/env.hpp"
#include "adt/policies.hpp"
#include "adt/rng.hpp"
#include "adt/transformer.hpp"

namespace adt {

struct Episode {
  double ret = 0.0;
  bool success = false;
  double normalized = 0.0;
  std::vector<std::size_t> path;               // s_0 .. s_T
  std::vector<std::size_t> actions;
  std::vector<std::vector<double>> prompts;   // fed to the low level at each step
  std::size_t ood_prompts = 0;
  std::size_t length() const { return actions.size(); }
};

struct Estimate {
  double mean = 0.0;
  double half_width = 0.0;  // 95% normal approximation
  std::size_t n = 0;
  double lower() const { return mean - half_width; }
  double upper() const { return mean + half_width; }
};

inline Estimate estimate(const std::vector<double>& xs) {
  Estimate e;
  e.n = xs.size();
  if (xs.empty()) return e;
  for (double x : xs) e.mean += x;
  e.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return e;
  double ss = 0.0;
  for (double x : xs) ss += (x - e.mean) * (x - e.mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  e.half_width = 1.96 * sd / std::sqrt(static_cast<double>(xs.size()));
  return e;
}

struct EvalReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<Episode> episodes;
  double wall_clock_seconds = 0.0;

  double success_rate() const {
    if (episodes.empty()) return 0.0;
    double k = 0.0;
    for (const auto& e : episodes) k += e.success ? 1.0 : 0.0;
    return k / static_cast<double>(episodes.size());
  }
  Estimate returns() const {
    std::vector<double> r;
    for (const auto& e : episodes) r.push_back(e.ret);
    return estimate(r);
  }
  double mean_normalized() const {
    double s = 0.0;
    for (const auto& e : episodes) s += e.normalized;
    return episodes.empty() ? 0.0 : s / static_cast<double>(episodes.size());
  }
  std::size_t ood_prompts() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.ood_prompts;
    return n;
  }
};

struct RolloutOptions {
  std::size_t episodes = 20;
  std::uint64_t seed = 0;
  bool sample = false;                  // categorical sampling instead of argmax
  std::optional<std::size_t> start;     // fixed start state; otherwise the env's start distribution
  std::size_t subgoal_every = 1;        // G-ADT: re-query the high level every k steps
};

namespace detail {

struct StepContext {
  std::size_t t = 0;
  double rtg = 0.0;  // DT only
};

// Decides the prompt for the current state (and whether it is out of distribution).
using PromptSource = std::function<std::vector<double>(std::size_t state, const StepContext&, bool* ood)>;
using SuccessTest = std::function<bool(std::size_t state)>;

inline std::size_t choose(const std::vector<double>& p, bool sample, Rng& rng) {
  if (!sample) return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  double u = uniform01(rng), acc = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    acc += p[a];
    if (u < acc) return a;
  }
  return p.size() - 1;
}

inline void check_model(const GridWorldSpec& env, const CausalTransformer& model, std::size_t prompt_dim) {
  const auto& c = model.config();
  if (c.state_dim != env.encoding_dim()) {
    throw std::invalid_argument("rollout: policy expects state dimension " + std::to_string(c.state_dim) +
                                " but environment '" + env.name + "' encodes " + std::to_string(env.encoding_dim()));
  }
  if (c.prompt_dim != prompt_dim) {
    throw std::invalid_argument("rollout: policy expects prompt dimension " + std::to_string(c.prompt_dim) +
                                ", prompt source gives " + std::to_string(prompt_dim));
  }
  if (c.action_vocab != env.num_actions()) throw std::invalid_argument("rollout: action vocabulary mismatch");
}

// Each episode draws from its own stream, so episode i does not depend on how
// many episodes ran before it.
inline EvalReport run_episodes(const GridWorldSpec& env, const CausalTransformer& model, bool use_prompt,
                               const RolloutOptions& opt, const std::string& variant, const PromptSource& prompt_of,
                               const SuccessTest& success, double initial_rtg = 0.0) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.variant = variant;
  report.seed = opt.seed;
  const std::size_t K = model.config().context_length;
  for (std::size_t ep = 0; ep < opt.episodes; ++ep) {
    Rng rng = make_stream(opt.seed, "eval", ep);
    Episode e;
    std::size_t s = opt.start ? *opt.start : env.sample_start(rng);
    e.path.push_back(s);
    StepContext ctx;
    ctx.rtg = initial_rtg;
    PolicyWindow window;
    while (!env.is_terminal(s) && !success(s) && ctx.t < env.horizon) {
      bool ood = false;
      const auto prompt = prompt_of(s, ctx, &ood);
      e.ood_prompts += ood ? 1 : 0;
      e.prompts.push_back(prompt);
      window.push_back({maybe_zero(prompt, use_prompt), env.encode(s), std::nullopt, ctx.t, 1.0});
      if (window.size() > K) window.erase(window.begin());
      const std::size_t a = choose(action_probabilities(model, window), opt.sample, rng);
      window.back().action = a;
      const double r = env.reward(s, a);
      e.ret += r;
      ctx.rtg -= r;
      s = env.next_state(s, a);
      e.actions.push_back(a);
      e.path.push_back(s);
      ++ctx.t;
    }
    e.success = success(s);
    e.normalized = env.normalized_score(e.ret);
    report.episodes.push_back(std::move(e));
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace detail

// V-ADT: the prompt is V(s) of the current state, recomputed every step.
inline EvalReport rollout_vadt(const GridWorldSpec& env, const CriticNet& critic, const CausalTransformer& model,
                               bool use_prompt, const RolloutOptions& opt) {
  if (!critic.fitted() || critic.goal_conditioned()) throw std::logic_error("rollout_vadt: need a fitted state critic");
  if (critic.env_hash() != env.hash()) throw std::invalid_argument("rollout_vadt: critic was fitted on another environment");
  detail::check_model(env, model, 1);
  return detail::run_episodes(
      env, model, use_prompt, opt, "vadt",
      [&](std::size_t s, const detail::StepContext&, bool*) { return std::vector<double>{critic.value(s)}; },
      [&](std::size_t s) { return env.is_goal(s); });
}

// G-ADT: the prompt is the encoded subgoal for the fixed goal.
inline EvalReport rollout_gadt(const GridWorldSpec& env, std::size_t goal, const SubgoalPolicy& high,
                               const CausalTransformer& model, bool use_prompt, const RolloutOptions& opt) {
  if (goal >= env.num_states()) throw std::out_of_range("rollout_gadt: goal state out of range");
  if (high.num_states() != env.num_states()) throw std::invalid_argument("rollout_gadt: subgoal policy size mismatch");
  if (opt.subgoal_every == 0) throw std::invalid_argument("rollout_gadt: subgoal_every must be >= 1");
  detail::check_model(env, model, env.encoding_dim());
  std::size_t current = goal;
  return detail::run_episodes(
      env, model, use_prompt, opt, "gadt",
      [&](std::size_t s, const detail::StepContext& ctx, bool*) {
        if (ctx.t % opt.subgoal_every == 0 || s == current) current = high.subgoal(s, goal);
        return env.encode(current);
      },
      [goal](std::size_t s) { return s == goal; });
}

// DT: the prompt starts at the hand-picked return and is decremented by each
// reward. With a table, prompts at unseen (s, R) are counted as OOD.
inline EvalReport rollout_dt(const GridWorldSpec& env, const CausalTransformer& model, double initial_rtg,
                             const RolloutOptions& opt, const IdealizedDTTable* seen = nullptr) {
  detail::check_model(env, model, 1);
  return detail::run_episodes(
      env, model, true, opt, "dt",
      [&](std::size_t s, const detail::StepContext& ctx, bool* ood) {
        if (seen) *ood = seen->query(s, ctx.rtg).out_of_distribution;
        return std::vector<double>{ctx.rtg};
      },
      [&](std::size_t s) { return env.is_goal(s); }, initial_rtg);
}

// The idealized tabular DT acting with history-conditioned queries.
inline EvalReport rollout_table(const GridWorldSpec& env, const IdealizedDTTable& table, double initial_rtg,
                                const RolloutOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.variant = "dt-table";
  report.seed = opt.seed;
  for (std::size_t ep = 0; ep < opt.episodes; ++ep) {
    Rng rng = make_stream(opt.seed, "eval", ep);
    Episode e;
    std::size_t s = opt.start ? *opt.start : env.sample_start(rng);
    e.path.push_back(s);
    std::vector<std::size_t> history;
    double rtg = initial_rtg;
    for (std::size_t t = 0; !env.is_terminal(s) && t < env.horizon; ++t) {
      const auto q = table.query(history, s, rtg);
      e.ood_prompts += q.out_of_distribution ? 1 : 0;
      e.prompts.push_back({rtg});
      const std::size_t a = detail::choose(q.probabilities, opt.sample, rng);
      history.push_back(s);
      const double r = env.reward(s, a);
      e.ret += r;
      rtg -= r;
      s = env.next_state(s, a);
      e.actions.push_back(a);
      e.path.push_back(s);
    }
    e.success = env.is_goal(s);
    e.normalized = env.normalized_score(e.ret);
    report.episodes.push_back(std::move(e));
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Writers. Metric files carry no timing so reruns compare byte for byte.

inline std::string join_states(const std::vector<std::size_t>& v, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

inline void write_episodes_csv(std::ostream& os, const EvalReport& r) {
  os << "variant,seed,episode,return,normalized_score,success,length,ood_prompts,path\n";
  for (std::size_t i = 0; i < r.episodes.size(); ++i) {
    const auto& e = r.episodes[i];
    os << r.variant << ',' << r.seed << ',' << i << ',' << format_number(e.ret) << ',' << format_number(e.normalized)
       << ',' << (e.success ? 1 : 0) << ',' << e.length() << ',' << e.ood_prompts << ',' << join_states(e.path) << '\n';
  }
}

inline void write_prompt_trace_csv(std::ostream& os, const EvalReport& r) {
  os << "episode,step,state,action,prompt\n";
  for (std::size_t i = 0; i < r.episodes.size(); ++i) {
    const auto& e = r.episodes[i];
    for (std::size_t t = 0; t < e.prompts.size(); ++t) {
      os << i << ',' << t << ',' << e.path[t] << ',' << e.actions[t] << ',';
      for (std::size_t j = 0; j < e.prompts[t].size(); ++j) os << (j ? " " : "") << format_number(e.prompts[t][j]);
      os << '\n';
    }
  }
}

inline nlohmann::json summary_json(const EvalReport& r, bool with_timing) {
  const auto ret = r.returns();
  nlohmann::json j = {{"variant", r.variant},
                      {"seed", r.seed},
                      {"episodes", r.episodes.size()},
                      {"success_rate", r.success_rate()},
                      {"mean_return", ret.mean},
                      {"return_ci95", ret.half_width},
                      {"mean_normalized_score", r.mean_normalized()},
                      {"ood_prompts", r.ood_prompts()}};
  if (with_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

struct CurveRow {
  std::size_t step;
  std::uint64_t seed;
  std::string metric;
  double value;
};

// Long format: one observation per row.
inline void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "step,seed,metric,value\n";
  for (const auto& r : rows) os << r.step << ',' << r.seed << ',' << r.metric << ',' << format_number(r.value) << '\n';
}

inline std::vector<CurveRow> loss_rows(const std::vector<LossPoint>& curve, std::uint64_t seed, const std::string& metric) {
  std::vector<CurveRow> out;
  for (const auto& p : curve) out.push_back({p.step, seed, metric, p.loss});
  return out;
}

}  // namespace adt
