#pragma once

// Key-value (de)serialization of the training and critic configs. Keys are
// grouped by prefix: model.*, train.*, critic.*, high.*.

#include <set>
#include <string>
#include <vector>

#include "adt/config.hpp"
#include "adt/critics.hpp"
#include "adt/policies.hpp"
#include "adt/transformer.hpp"

namespace adt {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(KeyValueConfig::to_size(key, item));
  }
  return out;
}

inline std::string format_bool(bool b) { return b ? "true" : "false"; }

inline void write_settings(KeyValueConfig& c, const ModelConfig& m) {
  c.set("model.layers", std::to_string(m.layers));
  c.set("model.hidden_dim", std::to_string(m.hidden_dim));
  c.set("model.heads", std::to_string(m.heads));
  c.set("model.context_length", std::to_string(m.context_length));
  c.set("model.embedding_dropout", format_number(m.embedding_dropout));
  c.set("model.attention_dropout", format_number(m.attention_dropout));
  c.set("model.residual_dropout", format_number(m.residual_dropout));
  c.set("model.tokenization", to_string(m.tokenization));
  c.set("model.prompt_scale", format_number(m.prompt_scale));
  c.set("model.zero_init_head", format_bool(m.zero_init_head));
}

// action_vocab, state_dim, prompt_dim and max_timestep follow from the
// environment and variant, so they are not read here.
inline void read_settings(const KeyValueConfig& c, ModelConfig& m) {
  m.layers = c.get_size("model.layers", m.layers);
  m.hidden_dim = c.get_size("model.hidden_dim", m.hidden_dim);
  m.heads = c.get_size("model.heads", m.heads);
  m.context_length = c.get_size("model.context_length", m.context_length);
  m.embedding_dropout = c.get_double("model.embedding_dropout", m.embedding_dropout);
  m.attention_dropout = c.get_double("model.attention_dropout", m.attention_dropout);
  m.residual_dropout = c.get_double("model.residual_dropout", m.residual_dropout);
  if (c.has("model.tokenization")) m.tokenization = parse_tokenization(c.get("model.tokenization"));
  m.prompt_scale = c.get_double("model.prompt_scale", m.prompt_scale);
  m.zero_init_head = c.get_bool("model.zero_init_head", m.zero_init_head);
}

inline void write_settings(KeyValueConfig& c, const TrainConfig& t) {
  c.set("train.alpha", format_number(t.alpha));
  c.set("train.weight_clip", format_number(t.weight_clip));
  c.set("train.steps", std::to_string(t.steps));
  c.set("train.warmup_steps", std::to_string(t.warmup_steps));
  c.set("train.lr", format_number(t.lr));
  c.set("train.weight_decay", format_number(t.weight_decay));
  c.set("train.grad_clip", format_number(t.grad_clip));
  c.set("train.batch_size", std::to_string(t.batch_size));
  c.set("train.use_weights", format_bool(t.use_weights));
  c.set("train.use_prompt", format_bool(t.use_prompt));
  c.set("train.log_every", std::to_string(t.log_every));
}

inline void read_settings(const KeyValueConfig& c, TrainConfig& t) {
  t.alpha = c.get_double("train.alpha", t.alpha);
  t.weight_clip = c.get_double("train.weight_clip", t.weight_clip);
  t.steps = c.get_size("train.steps", t.steps);
  t.warmup_steps = c.get_size("train.warmup_steps", t.warmup_steps);
  t.lr = c.get_double("train.lr", t.lr);
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.grad_clip = c.get_double("train.grad_clip", t.grad_clip);
  t.batch_size = c.get_size("train.batch_size", t.batch_size);
  t.use_weights = c.get_bool("train.use_weights", t.use_weights);
  t.use_prompt = c.get_bool("train.use_prompt", t.use_prompt);
  t.log_every = std::max<std::size_t>(1, c.get_size("train.log_every", t.log_every));
}

inline void write_settings(KeyValueConfig& c, const CriticConfig& k) {
  c.set("critic.tau", format_number(k.tau));
  c.set("critic.polyak", format_number(k.polyak));
  c.set("critic.gamma", format_number(k.gamma));
  c.set("critic.lr", format_number(k.lr));
  c.set("critic.batch_size", std::to_string(k.batch_size));
  c.set("critic.steps", std::to_string(k.steps));
  c.set("critic.arch", to_string(k.arch));
  c.set("critic.hidden", join_sizes(k.hidden));
  c.set("critic.twin_q", format_bool(k.twin_q));
  c.set("critic.seed", std::to_string(k.seed));
  c.set("critic.horizon", std::to_string(k.horizon));
  c.set("critic.goal_future", format_number(k.goal_future));
  c.set("critic.goal_final", format_number(k.goal_final));
  c.set("critic.goal_random", format_number(k.goal_random));
  c.set("critic.goal_geometric", format_number(k.goal_geometric));
  c.set("critic.log_every", std::to_string(k.log_every));
}

inline void read_settings(const KeyValueConfig& c, CriticConfig& k) {
  k.tau = c.get_double("critic.tau", k.tau);
  k.polyak = c.get_double("critic.polyak", k.polyak);
  k.gamma = c.get_double("critic.gamma", k.gamma);
  k.lr = c.get_double("critic.lr", k.lr);
  k.batch_size = c.get_size("critic.batch_size", k.batch_size);
  k.steps = c.get_size("critic.steps", k.steps);
  if (c.has("critic.arch")) k.arch = parse_critic_arch(c.get("critic.arch"));
  if (c.has("critic.hidden")) k.hidden = parse_sizes("critic.hidden", c.get("critic.hidden"));
  k.twin_q = c.get_bool("critic.twin_q", k.twin_q);
  k.seed = c.get_size("critic.seed", k.seed);
  k.horizon = c.get_size("critic.horizon", k.horizon);
  k.goal_future = c.get_double("critic.goal_future", k.goal_future);
  k.goal_final = c.get_double("critic.goal_final", k.goal_final);
  k.goal_random = c.get_double("critic.goal_random", k.goal_random);
  k.goal_geometric = c.get_double("critic.goal_geometric", k.goal_geometric);
  k.log_every = std::max<std::size_t>(1, c.get_size("critic.log_every", k.log_every));
}

inline void write_settings(KeyValueConfig& c, const HighLevelConfig& h) {
  c.set("high.way_step", std::to_string(h.way_step));
  c.set("high.alpha", format_number(h.alpha));
  c.set("high.weight_clip", format_number(h.weight_clip));
  c.set("high.steps", std::to_string(h.steps));
  c.set("high.lr", format_number(h.lr));
}

inline void read_settings(const KeyValueConfig& c, HighLevelConfig& h) {
  h.way_step = c.get_size("high.way_step", h.way_step);
  h.alpha = c.get_double("high.alpha", h.alpha);
  h.weight_clip = c.get_double("high.weight_clip", h.weight_clip);
  h.steps = c.get_size("high.steps", h.steps);
  h.lr = c.get_double("high.lr", h.lr);
}

// Every key must be in `known`; the error names the first offender.
inline void check_keys(const KeyValueConfig& c, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [k, v] : c.entries()) {
    if (!known.count(k)) throw ConfigError(where + ": unknown config key '" + k + "'");
  }
}

inline std::set<std::string> keys_of(const KeyValueConfig& c) {
  std::set<std::string> out;
  for (const auto& [k, v] : c.entries()) out.insert(k);
  return out;
}

}  // namespace adt
