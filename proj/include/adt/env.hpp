#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adt/config.hpp"
#include "adt/rng.hpp"

namespace adt {

enum class Action : std::size_t { Up = 0, Down = 1, Left = 2, Right = 3, Stay = 4 };
inline constexpr std::size_t kNumActions = 5;

inline const char* action_name(std::size_t a) {
  static constexpr const char* names[] = {"up", "down", "left", "right", "stay"};
  return a < kNumActions ? names[a] : "?";
}

inline std::size_t parse_action(const std::string& s) {
  for (std::size_t a = 0; a < kNumActions; ++a)
    if (s == action_name(a)) return a;
  throw ConfigError("unknown action '" + s + "' (expected up|down|left|right|stay)");
}

enum class StateEncoding {
  OneHot,       // one-hot over open cells
  Coordinates,  // normalized (x, y) plus one-hot room id
};

struct ScriptedTrajectory {
  std::size_t start;
  std::vector<std::size_t> actions;
};

// Finite deterministic gridworld. States are the open cells, numbered in
// row-major order; moving into a wall or off the grid leaves the agent in place.
//
// Map rows use '#' for walls, '.' for plain open cells and any other
// character as a labelled open cell that other keys can refer to.
class GridWorldSpec {
 public:
  std::string name;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::string> rows;
  double gamma = 0.99;
  std::size_t horizon = 50;
  double step_reward = 0.0;
  StateEncoding encoding = StateEncoding::OneHot;
  std::vector<std::pair<std::size_t, double>> start;  // (state, probability)
  std::set<std::size_t> goals;
  std::set<std::size_t> terminals;
  std::vector<double> entry_reward;  // reward collected when entering a state
  std::vector<std::size_t> room;     // room id per state
  std::size_t rooms = 1;
  double score_min = 0.0;
  double score_max = 1.0;
  std::vector<ScriptedTrajectory> scripts;
  std::size_t demo_min_length = 3;
  std::size_t demo_max_length = 6;
  std::map<char, std::size_t> labels;

  static GridWorldSpec from_config(const KeyValueConfig& c) {
    GridWorldSpec g;
    g.name = c.get("name", "gridworld");
    g.rows = c.get_all("row");
    if (g.rows.empty()) throw ConfigError("environment: no 'row' entries");
    g.height = g.rows.size();
    g.width = g.rows[0].size();
    for (const auto& r : g.rows) {
      if (r.size() != g.width || r.empty()) throw ConfigError("environment: map rows must be non-empty and equal width");
    }
    g.cell_state_.assign(g.width * g.height, kNoState);
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const char ch = g.rows[y][x];
        if (ch == '#') continue;
        const std::size_t s = g.state_cell_.size();
        g.cell_state_[y * g.width + x] = s;
        g.state_cell_.push_back(y * g.width + x);
        if (ch != '.') {
          if (!g.labels.emplace(ch, s).second) throw ConfigError(std::string("environment: duplicate label '") + ch + "'");
        }
      }
    }
    if (g.state_cell_.empty()) throw ConfigError("environment: map has no open cells");
    const std::size_t n = g.num_states();

    g.gamma = c.get_double("gamma", 0.99);
    if (!(g.gamma >= 0.0 && g.gamma <= 1.0)) throw ConfigError("environment: gamma must lie in [0, 1]");
    g.horizon = c.get_size("horizon", 50);
    if (g.horizon == 0) throw ConfigError("environment: horizon must be >= 1");
    g.step_reward = c.get_double("step_reward", 0.0);
    const std::string enc = c.get("encoding", "onehot");
    if (enc == "onehot") g.encoding = StateEncoding::OneHot;
    else if (enc == "coords") g.encoding = StateEncoding::Coordinates;
    else throw ConfigError("environment: encoding must be onehot|coords");

    g.entry_reward.assign(n, 0.0);
    for (const auto& [label, v] : c.with_prefix("reward.")) {
      g.entry_reward[g.state_of_label(label)] = KeyValueConfig::to_double("reward." + label, v);
    }
    for (const auto& w : split_words(c.get("terminal", ""))) g.terminals.insert(g.state_of_label(w));
    for (const auto& w : split_words(c.get("goal", ""))) {
      g.goals.insert(g.state_of_label(w));
      g.terminals.insert(g.state_of_label(w));
    }

    const std::string start_spec = c.get("start", "any");
    if (start_spec == "any") {
      std::vector<std::size_t> cand;
      for (std::size_t s = 0; s < n; ++s)
        if (!g.terminals.count(s)) cand.push_back(s);
      for (std::size_t s : cand) g.start.emplace_back(s, 1.0 / static_cast<double>(cand.size()));
    } else {
      const auto words = split_words(start_spec);
      for (const auto& w : words) {
        const auto colon = w.find(':');
        const std::size_t s = g.state_of_label(w.substr(0, colon));
        const double p = colon == std::string::npos ? 1.0 / static_cast<double>(words.size())
                                                    : KeyValueConfig::to_double("start", w.substr(colon + 1));
        g.start.emplace_back(s, p);
      }
    }
    double total = 0.0;
    for (const auto& [s, p] : g.start) {
      if (p < 0.0) throw ConfigError("environment: negative start probability");
      total += p;
    }
    if (g.start.empty() || std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("environment: start probabilities must sum to 1 (got " + std::to_string(total) + ")");
    }

    g.room.assign(n, 0);
    const auto room_rows = c.get_all("rooms");
    if (!room_rows.empty()) {
      if (room_rows.size() != g.height) throw ConfigError("environment: 'rooms' rows must match map height");
      std::size_t max_room = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const auto [x, y] = g.coords(s);
        const char ch = room_rows[y].size() == g.width ? room_rows[y][x] : '?';
        if (ch < '0' || ch > '9') throw ConfigError("environment: room map needs a digit at every open cell");
        g.room[s] = static_cast<std::size_t>(ch - '0');
        max_room = std::max(max_room, g.room[s]);
      }
      g.rooms = max_room + 1;
    }

    g.score_min = c.get_double("score_min", 0.0);
    g.score_max = c.get_double("score_max", 1.0);
    if (!(g.score_max > g.score_min)) throw ConfigError("environment: score_max must exceed score_min");

    for (const auto& line : c.get_all("script")) {
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw ConfigError("environment: script must read '<start>: actions...'");
      ScriptedTrajectory st{g.state_of_label(trim(line.substr(0, colon))), {}};
      for (const auto& w : split_words(line.substr(colon + 1))) st.actions.push_back(parse_action(w));
      g.scripts.push_back(std::move(st));
    }
    g.demo_min_length = c.get_size("demo_min_length", 3);
    g.demo_max_length = c.get_size("demo_max_length", 6);
    g.source_ = c;
    return g;
  }

  static GridWorldSpec parse(const std::string& text) { return from_config(KeyValueConfig::parse(text)); }

  std::size_t num_states() const { return state_cell_.size(); }
  std::size_t num_actions() const { return kNumActions; }

  std::pair<std::size_t, std::size_t> coords(std::size_t s) const {
    check_state(s);
    return {state_cell_[s] % width, state_cell_[s] / width};
  }

  std::optional<std::size_t> state_at(std::size_t x, std::size_t y) const {
    if (x >= width || y >= height) return std::nullopt;
    const std::size_t s = cell_state_[y * width + x];
    return s == kNoState ? std::nullopt : std::optional<std::size_t>(s);
  }

  std::size_t state_of_label(const std::string& label) const {
    if (label.size() == 1) {
      auto it = labels.find(label[0]);
      if (it != labels.end()) return it->second;
    }
    // "x,y" coordinates are accepted as well
    const auto comma = label.find(',');
    if (comma != std::string::npos) {
      const auto x = KeyValueConfig::to_size("cell", label.substr(0, comma));
      const auto y = KeyValueConfig::to_size("cell", label.substr(comma + 1));
      if (auto s = state_at(x, y)) return *s;
      throw ConfigError("environment: cell " + label + " is a wall or off the grid");
    }
    throw ConfigError("environment: unknown cell label '" + label + "'");
  }

  std::optional<char> label_of(std::size_t s) const {
    for (const auto& [ch, st] : labels)
      if (st == s) return ch;
    return std::nullopt;
  }

  std::size_t next_state(std::size_t s, std::size_t a) const {
    check_state(s);
    if (a >= kNumActions) throw std::out_of_range("action " + std::to_string(a) + " out of range");
    auto [x, y] = coords(s);
    long nx = static_cast<long>(x), ny = static_cast<long>(y);
    switch (static_cast<Action>(a)) {
      case Action::Up: --ny; break;
      case Action::Down: ++ny; break;
      case Action::Left: --nx; break;
      case Action::Right: ++nx; break;
      case Action::Stay: break;
    }
    if (nx < 0 || ny < 0) return s;
    if (auto t = state_at(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny))) return *t;
    return s;
  }

  double reward(std::size_t s, std::size_t a) const { return step_reward + entry_reward[next_state(s, a)]; }
  bool is_terminal(std::size_t s) const { return terminals.count(s) > 0; }
  bool is_goal(std::size_t s) const { return goals.count(s) > 0; }

  // Sparse goal-conditioned reward: 0 once at the goal, -1 otherwise.
  static double goal_reward(std::size_t s, std::size_t g) { return s == g ? 0.0 : -1.0; }

  std::size_t encoding_dim() const {
    return encoding == StateEncoding::OneHot ? num_states() : 2 + rooms;
  }

  std::vector<double> encode(std::size_t s) const {
    check_state(s);
    std::vector<double> v(encoding_dim(), 0.0);
    if (encoding == StateEncoding::OneHot) {
      v[s] = 1.0;
    } else {
      const auto [x, y] = coords(s);
      v[0] = width > 1 ? static_cast<double>(x) / static_cast<double>(width - 1) : 0.0;
      v[1] = height > 1 ? static_cast<double>(y) / static_cast<double>(height - 1) : 0.0;
      v[2 + room[s]] = 1.0;
    }
    return v;
  }

  std::size_t sample_start(Rng& rng) const {
    double u = uniform01(rng), acc = 0.0;
    for (const auto& [s, p] : start) {
      acc += p;
      if (u < acc) return s;
    }
    return start.back().first;
  }

  double normalized_score(double ret) const { return (ret - score_min) / (score_max - score_min); }

  // True shortest-path distances (in moves) from every state to `target`;
  // unreachable states get SIZE_MAX.
  std::vector<std::size_t> distances_to(std::size_t target) const {
    check_state(target);
    const std::size_t n = num_states();
    std::vector<std::vector<std::size_t>> preds(n);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t a = 0; a < kNumActions; ++a) {
        const std::size_t t = next_state(s, a);
        if (t != s) preds[t].push_back(s);
      }
    std::vector<std::size_t> dist(n, std::numeric_limits<std::size_t>::max());
    std::deque<std::size_t> q{target};
    dist[target] = 0;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop_front();
      for (std::size_t p : preds[u]) {
        if (dist[p] != std::numeric_limits<std::size_t>::max()) continue;
        dist[p] = dist[u] + 1;
        q.push_back(p);
      }
    }
    return dist;
  }

  // Stable identity of the environment definition (FNV-1a over the resolved config).
  std::uint64_t hash() const { return fnv1a(source_.resolved() + "|" + join_rows()); }

  std::string to_config() const {
    std::ostringstream os;
    for (const auto& [k, v] : source_.entries()) os << k << " = " << v << '\n';
    return os.str();
  }

  // ASCII rendering; `path` cells are drawn as '*'.
  std::string render(const std::vector<std::size_t>& path = {}) const {
    std::vector<std::string> canvas = rows;
    for (std::size_t s : path) {
      const auto [x, y] = coords(s);
      canvas[y][x] = '*';
    }
    std::string out;
    for (const auto& r : canvas) out += r + '\n';
    return out;
  }

 private:
  static constexpr std::size_t kNoState = std::numeric_limits<std::size_t>::max();

  void check_state(std::size_t s) const {
    if (s >= state_cell_.size()) throw std::out_of_range("state " + std::to_string(s) + " out of range");
  }

  std::string join_rows() const {
    std::string s;
    for (const auto& r : rows) s += r + "/";
    return s;
  }

  std::vector<std::size_t> cell_state_;
  std::vector<std::size_t> state_cell_;
  KeyValueConfig source_;
};

namespace envs {

// a -> b -> c (return 0), d -> b -> e (return 10), a -> f (return 1).
// Cells:   f d #
//          a b e
//          # c h
// 'h' is open but never visited by the data, making seven cells in total.
inline constexpr const char* kStitchConfig = R"(name = stitch
row = fd#
row = abe
row = #ch
gamma = 1
horizon = 2
step_reward = 0
reward.e = 10
reward.f = 1
terminal = c e f
goal = e
start = a
score_min = 0
score_max = 10
script = a: right down
script = d: down right
script = a: up
)";

inline constexpr const char* kOpen5Config = R"(name = open5
row = .....
row = .....
row = .....
row = .....
row = ....G
gamma = 0.99
horizon = 40
step_reward = -1
goal = G
start = any
score_min = -40
score_max = 0
)";

inline constexpr const char* kCorridor3Config = R"(name = corridor3
row = abg
gamma = 1
horizon = 2
step_reward = -1
goal = g
start = a
score_min = -2
score_max = 0
script = a: right right
)";

inline constexpr const char* kCorridor6Config = R"(name = corridor6
row = a....g
gamma = 0.99
horizon = 5
step_reward = -1
goal = g
start = a
score_min = -5
score_max = 0
script = a: right right right right right
)";

// 8x8 four rooms joined by four one-cell doorways; goal in the bottom-right room.
inline constexpr const char* kFourRoomsConfig = R"(name = four-rooms
row = ....#...
row = ........
row = ....#...
row = ....#...
row = #.####.#
row = ....#...
row = ........
row = ....#..G
rooms = 0000#111
rooms = 00004111
rooms = 0000#111
rooms = 0000#111
rooms = #4####4#
rooms = 2222#333
rooms = 22224333
rooms = 2222#333
encoding = coords
gamma = 0.99
horizon = 60
step_reward = -1
goal = G
start = any
score_min = -60
score_max = 0
demo_min_length = 3
demo_max_length = 6
)";

inline std::vector<std::string> builtin_names() { return {"stitch", "open5", "corridor3", "corridor6", "four-rooms"}; }

inline GridWorldSpec builtin(const std::string& name) {
  if (name == "stitch") return GridWorldSpec::parse(kStitchConfig);
  if (name == "open5") return GridWorldSpec::parse(kOpen5Config);
  if (name == "corridor3") return GridWorldSpec::parse(kCorridor3Config);
  if (name == "corridor6") return GridWorldSpec::parse(kCorridor6Config);
  if (name == "four-rooms") return GridWorldSpec::parse(kFourRoomsConfig);
  throw ConfigError("unknown built-in environment '" + name + "'");
}

// A built-in name or a path to a key-value environment file.
inline GridWorldSpec load(const std::string& name_or_path) {
  for (const auto& n : builtin_names())
    if (n == name_or_path) return builtin(n);
  return GridWorldSpec::from_config(KeyValueConfig::load(name_or_path));
}

}  // namespace envs
}  // namespace adt
