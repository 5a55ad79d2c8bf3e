#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adt/nn.hpp"
#include "adt/optim.hpp"
#include "adt/rng.hpp"
#include "adt/tensor.hpp"

namespace adt {

enum class Tokenization {
  ConcatPromptState,  // (prompt ++ state, action): 2 tokens per timestep
  SeparateTokens,     // (prompt, state, action): 3 tokens per timestep
};

inline const char* to_string(Tokenization t) {
  return t == Tokenization::ConcatPromptState ? "concat" : "separate";
}

inline Tokenization parse_tokenization(const std::string& s) {
  if (s == "concat" || s == "concat-prompt-state") return Tokenization::ConcatPromptState;
  if (s == "separate" || s == "separate-tokens") return Tokenization::SeparateTokens;
  throw std::invalid_argument("unknown tokenization '" + s + "' (expected concat|separate)");
}

struct ModelConfig {
  std::size_t layers = 3;
  std::size_t hidden_dim = 128;
  std::size_t heads = 1;
  std::size_t context_length = 20;
  double embedding_dropout = 0.1;
  double attention_dropout = 0.1;
  double residual_dropout = 0.1;
  std::size_t action_vocab = 5;
  std::size_t state_dim = 1;
  std::size_t prompt_dim = 1;
  Tokenization tokenization = Tokenization::ConcatPromptState;
  double prompt_scale = 1.0;
  std::size_t max_timestep = 256;
  bool zero_init_head = false;

  void validate() const {
    if (heads == 0 || hidden_dim % heads != 0) {
      throw std::invalid_argument("model config: hidden_dim " + std::to_string(hidden_dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    if (context_length < 1) throw std::invalid_argument("model config: context_length must be >= 1");
    if (action_vocab < 1 || state_dim < 1 || prompt_dim < 1) {
      throw std::invalid_argument("model config: action_vocab, state_dim and prompt_dim must be >= 1");
    }
    if (layers < 1) throw std::invalid_argument("model config: layers must be >= 1");
  }

  std::size_t tokens_per_step() const { return tokenization == Tokenization::ConcatPromptState ? 2 : 3; }
};

// One timestep of a trajectory window as seen by the low-level policy.
struct PolicyStep {
  std::vector<double> prompt;
  std::vector<double> state;
  std::optional<std::size_t> action;  // absent for the step whose action is being chosen
  std::size_t timestep = 0;
  double weight = 1.0;
};

using PolicyWindow = std::vector<PolicyStep>;

enum class TokenKind { PromptState, Prompt, State, Action };

struct Token {
  TokenKind kind;
  std::vector<double> input;  // embedding input (empty for action tokens)
  std::size_t action = 0;     // vocabulary id for action tokens; action_vocab marks "unknown"
  std::size_t timestep = 0;
};

// Flattened token sequences for a batch of windows. Within a sequence the
// layout per timestep is [prompt++state, action] or [prompt, state, action].
struct TokenizedBatch {
  Tokenization mode = Tokenization::ConcatPromptState;
  std::vector<Token> tokens;
  std::vector<std::size_t> sequence_offsets;  // size = #sequences + 1
  std::vector<std::size_t> predict_rows;      // token row whose output predicts each step's action
  std::vector<std::size_t> step_sequence;     // owning sequence of each step
  std::vector<std::optional<std::size_t>> targets;
  std::vector<double> weights;

  std::size_t sequences() const { return sequence_offsets.empty() ? 0 : sequence_offsets.size() - 1; }
  std::size_t steps() const { return predict_rows.size(); }
  std::size_t sequence_length(std::size_t s) const { return sequence_offsets[s + 1] - sequence_offsets[s]; }

  // Row-major n x n mask for sequence s; true marks a blocked (future) key.
  std::vector<bool> attention_mask(std::size_t s) const { return causal_mask(sequence_length(s)); }

  static std::vector<bool> causal_mask(std::size_t n) {
    std::vector<bool> m(n * n, false);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = true;
    return m;
  }
};

// Appends one window to `batch`. Prompts are multiplied by config.prompt_scale.
inline void tokenize_into(TokenizedBatch& batch, const PolicyWindow& window, const ModelConfig& config) {
  if (window.empty()) throw std::invalid_argument("tokenize: empty window");
  if (window.size() > config.context_length) {
    throw std::invalid_argument("tokenize: window of " + std::to_string(window.size()) +
                                " steps exceeds context length " + std::to_string(config.context_length));
  }
  if (batch.sequence_offsets.empty()) batch.sequence_offsets.push_back(0);
  batch.mode = config.tokenization;
  const std::size_t seq = batch.sequences();
  for (const PolicyStep& step : window) {
    if (step.prompt.empty()) throw std::invalid_argument("tokenize: missing prompt at timestep " + std::to_string(step.timestep));
    if (step.prompt.size() != config.prompt_dim || step.state.size() != config.state_dim) {
      throw std::invalid_argument("tokenize: prompt/state dims " + std::to_string(step.prompt.size()) + "/" +
                                  std::to_string(step.state.size()) + " do not match config " +
                                  std::to_string(config.prompt_dim) + "/" + std::to_string(config.state_dim));
    }
    if (step.weight < 0.0) throw std::invalid_argument("tokenize: negative loss weight");
    if (step.action && *step.action >= config.action_vocab) {
      throw std::invalid_argument("tokenize: action " + std::to_string(*step.action) + " out of vocabulary");
    }
    std::vector<double> prompt = step.prompt;
    for (double& p : prompt) p *= config.prompt_scale;
    const std::size_t t = std::min(step.timestep, config.max_timestep - 1);
    if (config.tokenization == Tokenization::ConcatPromptState) {
      std::vector<double> in = prompt;
      in.insert(in.end(), step.state.begin(), step.state.end());
      batch.predict_rows.push_back(batch.tokens.size());
      batch.tokens.push_back({TokenKind::PromptState, std::move(in), 0, t});
    } else {
      batch.tokens.push_back({TokenKind::Prompt, std::move(prompt), 0, t});
      batch.predict_rows.push_back(batch.tokens.size());
      batch.tokens.push_back({TokenKind::State, step.state, 0, t});
    }
    batch.tokens.push_back({TokenKind::Action, {}, step.action.value_or(config.action_vocab), t});
    batch.step_sequence.push_back(seq);
    batch.targets.push_back(step.action);
    batch.weights.push_back(step.weight);
  }
  batch.sequence_offsets.push_back(batch.tokens.size());
}

inline TokenizedBatch tokenize(const PolicyWindow& window, const ModelConfig& config) {
  TokenizedBatch b;
  tokenize_into(b, window, config);
  return b;
}

inline TokenizedBatch tokenize(const std::vector<PolicyWindow>& windows, const ModelConfig& config) {
  TokenizedBatch b;
  b.mode = config.tokenization;
  b.sequence_offsets.push_back(0);
  for (const auto& w : windows) tokenize_into(b, w, config);
  return b;
}

// GPT-style pre-LayerNorm causal transformer with a categorical action head.
class CausalTransformer {
 public:
  CausalTransformer() = default;

  CausalTransformer(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng = make_stream(seed, "init");
    const std::size_t d = config_.hidden_dim;
    const double std = 0.02;
    if (config_.tokenization == Tokenization::ConcatPromptState) {
      embed_prompt_state_ = nn::Linear(config_.prompt_dim + config_.state_dim, d, std, rng);
    } else {
      embed_prompt_ = nn::Linear(config_.prompt_dim, d, std, rng);
      embed_state_ = nn::Linear(config_.state_dim, d, std, rng);
    }
    embed_action_ = nn::normal_init({config_.action_vocab + 1, d}, std, rng);
    embed_position_ = nn::normal_init({config_.max_timestep, d}, std, rng);
    embed_norm_ = nn::LayerNorm(d);
    const double proj_std = std / std::sqrt(2.0 * static_cast<double>(config_.layers));
    for (std::size_t l = 0; l < config_.layers; ++l) {
      Block b;
      b.ln1 = nn::LayerNorm(d);
      b.qkv = nn::Linear(d, 3 * d, std, rng);
      b.proj = nn::Linear(d, d, proj_std, rng);
      b.ln2 = nn::LayerNorm(d);
      b.fc = nn::Linear(d, 4 * d, std, rng);
      b.fc_out = nn::Linear(4 * d, d, proj_std, rng);
      blocks_.push_back(std::move(b));
    }
    final_norm_ = nn::LayerNorm(d);
    head_ = nn::Linear(d, config_.action_vocab, config_.zero_init_head ? 0.0 : std, rng);
  }

  const ModelConfig& config() const { return config_; }

  // Logits [batch.steps(), action_vocab]; row i is the action distribution for step i.
  Tensor logits(Tape& tape, const TokenizedBatch& batch) const {
    if (batch.tokens.empty()) throw std::invalid_argument("predict: empty batch");
    const std::size_t d = config_.hidden_dim;
    const std::size_t n = batch.tokens.size();

    // Embed each token kind as one matrix, then gather rows back into sequence order.
    std::vector<Tensor> parts;
    std::vector<std::size_t> order(n);
    std::size_t base = 0;
    auto embed_kind = [&](TokenKind kind, const nn::Linear* layer, std::size_t width) {
      std::vector<double> rows;
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (batch.tokens[i].kind != kind) continue;
        rows.insert(rows.end(), batch.tokens[i].input.begin(), batch.tokens[i].input.end());
        order[i] = base + count++;
      }
      if (count == 0) return;
      parts.push_back((*layer)(tape, Tensor::constant({count, width}, std::move(rows))));
      base += count;
    };
    if (config_.tokenization == Tokenization::ConcatPromptState) {
      embed_kind(TokenKind::PromptState, &embed_prompt_state_, config_.prompt_dim + config_.state_dim);
    } else {
      embed_kind(TokenKind::Prompt, &embed_prompt_, config_.prompt_dim);
      embed_kind(TokenKind::State, &embed_state_, config_.state_dim);
    }
    std::vector<std::size_t> action_ids;
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.tokens[i].kind != TokenKind::Action) continue;
      order[i] = base + action_ids.size();
      action_ids.push_back(batch.tokens[i].action);
    }
    if (!action_ids.empty()) parts.push_back(tape.embedding(embed_action_, action_ids));

    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = batch.tokens[i].timestep;

    Tensor x = tape.embedding(parts.size() == 1 ? parts[0] : tape.concat(parts, 0), order);
    x = tape.add(x, tape.embedding(embed_position_, positions));
    x = embed_norm_(tape, x);
    x = tape.dropout(x, config_.embedding_dropout);

    for (const Block& b : blocks_) {
      x = tape.add(x, tape.dropout(attention(tape, b, b.ln1(tape, x), batch), config_.residual_dropout));
      Tensor h = b.fc_out(tape, tape.gelu(b.fc(tape, b.ln2(tape, x))));
      x = tape.add(x, tape.dropout(h, config_.residual_dropout));
    }
    x = final_norm_(tape, x);
    (void)d;
    return head_(tape, tape.embedding(x, batch.predict_rows));
  }

  ParameterList parameters() const {
    ParameterList out;
    if (config_.tokenization == Tokenization::ConcatPromptState) {
      embed_prompt_state_.collect("embed.prompt_state", out);
    } else {
      embed_prompt_.collect("embed.prompt", out);
      embed_state_.collect("embed.state", out);
    }
    out.push_back({"embed.action", embed_action_});
    out.push_back({"embed.position", embed_position_});
    embed_norm_.collect("embed.norm", out);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string p = "block" + std::to_string(l);
      blocks_[l].ln1.collect(p + ".ln1", out);
      blocks_[l].qkv.collect(p + ".qkv", out);
      blocks_[l].proj.collect(p + ".proj", out);
      blocks_[l].ln2.collect(p + ".ln2", out);
      blocks_[l].fc.collect(p + ".fc", out);
      blocks_[l].fc_out.collect(p + ".fc_out", out);
    }
    final_norm_.collect("final.norm", out);
    head_.collect("head", out);
    return out;
  }

 private:
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj, fc, fc_out;
  };

  Tensor attention(Tape& tape, const Block& b, const Tensor& x, const TokenizedBatch& batch) const {
    const std::size_t d = config_.hidden_dim;
    const std::size_t dh = d / config_.heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor qkv = b.qkv(tape, x);
    std::vector<Tensor> outputs;
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
      const std::size_t lo = batch.sequence_offsets[s], hi = batch.sequence_offsets[s + 1];
      const Tensor rows = tape.slice(qkv, 0, lo, hi);
      const std::vector<bool> mask = batch.attention_mask(s);
      std::vector<Tensor> heads;
      for (std::size_t h = 0; h < config_.heads; ++h) {
        const Tensor q = tape.slice(rows, 1, h * dh, (h + 1) * dh);
        const Tensor k = tape.slice(rows, 1, d + h * dh, d + (h + 1) * dh);
        const Tensor v = tape.slice(rows, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        Tensor scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_scale);
        scores = tape.masked_fill(scores, mask, kMaskedScore);
        Tensor att = tape.dropout(tape.softmax(scores), config_.attention_dropout);
        heads.push_back(tape.matmul(att, v));
      }
      outputs.push_back(heads.size() == 1 ? heads[0] : tape.concat(heads, 1));
    }
    const Tensor merged = outputs.size() == 1 ? outputs[0] : tape.concat(outputs, 0);
    return b.proj(tape, merged);
  }

  // exp(kMaskedScore - max) underflows to exactly 0, so blocked keys contribute nothing.
  static constexpr double kMaskedScore = -1e9;

  ModelConfig config_;
  nn::Linear embed_prompt_state_, embed_prompt_, embed_state_;
  Tensor embed_action_, embed_position_;
  nn::LayerNorm embed_norm_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
};

// sum_t w_t * (-log softmax(logits_t)[target_t]) / batch_size. Steps without a
// target contribute nothing.
inline Tensor weighted_nll_loss(Tape& tape, const Tensor& logits, const std::vector<std::optional<std::size_t>>& targets,
                                const std::vector<double>& weights, std::size_t batch_size) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size() || targets.size() != weights.size()) {
    throw ShapeError("weighted_nll_loss: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets and " + std::to_string(weights.size()) + " weights");
  }
  if (batch_size == 0) throw std::invalid_argument("weighted_nll_loss: batch_size must be >= 1");
  std::vector<std::size_t> rows, ids;
  std::vector<double> w;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] < 0.0 || !std::isfinite(weights[i])) {
      throw std::invalid_argument("weighted_nll_loss: weight " + std::to_string(weights[i]) + " at step " +
                                  std::to_string(i) + " must be finite and >= 0");
    }
    if (!targets[i]) continue;
    rows.push_back(i);
    ids.push_back(*targets[i]);
    w.push_back(-weights[i] / static_cast<double>(batch_size));
  }
  if (rows.empty()) return tape.scale(tape.sum(logits), 0.0);
  const Tensor logp = tape.pick(tape.embedding(tape.log_softmax(logits), rows), ids);
  const std::size_t count = w.size();
  return tape.sum(tape.mul(logp, Tensor::constant({count}, std::move(w))));
}

inline Tensor weighted_nll_loss(Tape& tape, const Tensor& logits, const TokenizedBatch& batch) {
  return weighted_nll_loss(tape, logits, batch.targets, batch.weights, std::max<std::size_t>(1, batch.sequences()));
}

inline std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - mx));
  for (double& v : p) v /= z;
  return p;
}

}  // namespace adt
