#include <gtest/gtest.h>

#include <cstring>

#include "adt/transformer.hpp"
#include "adt/gradcheck.hpp"

namespace adt {
namespace {

ModelConfig small_config(Tokenization mode = Tokenization::ConcatPromptState) {
  ModelConfig c;
  c.layers = 2;
  c.hidden_dim = 16;
  c.heads = 2;
  c.context_length = 6;
  c.embedding_dropout = c.attention_dropout = c.residual_dropout = 0.0;
  c.action_vocab = 4;
  c.state_dim = 3;
  c.prompt_dim = 1;
  c.tokenization = mode;
  c.max_timestep = 32;
  return c;
}

PolicyWindow random_window(std::size_t len, const ModelConfig& c, Rng& rng) {
  PolicyWindow w;
  for (std::size_t t = 0; t < len; ++t) {
    PolicyStep s;
    s.prompt = {10.0 * uniform01(rng)};
    for (std::size_t i = 0; i < c.state_dim; ++i) s.state.push_back(uniform01(rng));
    s.action = uniform_index(rng, c.action_vocab);
    s.timestep = t + 2;
    s.weight = 0.5 + uniform01(rng);
    w.push_back(std::move(s));
  }
  return w;
}

TEST(Tokenize, TokensPerTimestep) {
  Rng rng = make_stream(1, "tok");
  const auto concat = small_config(Tokenization::ConcatPromptState);
  const auto separate = small_config(Tokenization::SeparateTokens);
  const auto w = random_window(4, concat, rng);
  EXPECT_EQ(tokenize(w, concat).tokens.size(), 8u);
  EXPECT_EQ(tokenize(w, separate).tokens.size(), 12u);
}

TEST(Tokenize, PromptScaleIsAppliedBeforeEmbedding) {
  auto c = small_config();
  c.prompt_scale = 0.001;
  PolicyWindow w{{{10.0}, {0, 1, 0}, 2, 0, 1.0}};
  const auto b = tokenize(w, c);
  EXPECT_DOUBLE_EQ(b.tokens[0].input[0], 0.01);
}

TEST(Tokenize, BothModesCarryTheSamePromptAndState) {
  Rng rng = make_stream(2, "tok");
  const auto w = random_window(3, small_config(), rng);
  const auto a = tokenize(w, small_config(Tokenization::ConcatPromptState));
  const auto b = tokenize(w, small_config(Tokenization::SeparateTokens));
  ASSERT_EQ(a.steps(), b.steps());
  for (std::size_t t = 0; t < a.steps(); ++t) {
    const auto& joined = a.tokens[a.predict_rows[t]].input;
    std::vector<double> split = b.tokens[b.predict_rows[t] - 1].input;
    const auto& state = b.tokens[b.predict_rows[t]].input;
    EXPECT_EQ(b.tokens[b.predict_rows[t] - 1].kind, TokenKind::Prompt);
    EXPECT_EQ(b.tokens[b.predict_rows[t]].kind, TokenKind::State);
    split.insert(split.end(), state.begin(), state.end());
    EXPECT_EQ(joined, split);
    EXPECT_EQ(a.targets[t], b.targets[t]);
  }
}

TEST(Tokenize, RejectsLongWindowsAndMissingPrompts) {
  Rng rng = make_stream(3, "tok");
  const auto c = small_config();
  EXPECT_THROW(tokenize(random_window(7, c, rng), c), std::invalid_argument);
  auto w = random_window(2, c, rng);
  w[1].prompt.clear();
  EXPECT_THROW(tokenize(w, c), std::invalid_argument);
}

TEST(Tokenize, MaskIsStrictlyCausal) {
  const auto m = TokenizedBatch::causal_mask(5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m[i * 5 + j], j > i);
}

TEST(Transformer, SingleTimestepLogitsShape) {
  const auto c = small_config();
  CausalTransformer model(c, 4);
  Rng rng = make_stream(4, "x");
  auto w = random_window(1, c, rng);
  w[0].action.reset();
  Tape tape;
  Tensor logits = model.logits(tape, tokenize(w, c));
  EXPECT_EQ(logits.shape(), (Shape{1, c.action_vocab}));
}

TEST(Transformer, ZeroInitializedHeadIsUniform) {
  auto c = small_config();
  c.zero_init_head = true;
  CausalTransformer model(c, 5);
  Rng rng = make_stream(5, "x");
  Tape tape;
  Tensor logits = model.logits(tape, tokenize(random_window(3, c, rng), c));
  for (std::size_t r = 0; r < 3; ++r) {
    const auto p = softmax_row(logits.data().subspan(r * c.action_vocab, c.action_vocab));
    for (double v : p) EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

// Perturbing anything at timestep t+1 or later must leave logits for <= t bitwise unchanged.
TEST(Transformer, CausalityUnderFuturePerturbation) {
  for (auto mode : {Tokenization::ConcatPromptState, Tokenization::SeparateTokens}) {
    const auto c = small_config(mode);
    CausalTransformer model(c, 6);
    Rng rng = make_stream(6, "causal");
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t len = 2 + uniform_index(rng, 5);
      auto w = random_window(len, c, rng);
      const std::size_t t = uniform_index(rng, len - 1);
      auto base = [&] {
        Tape tape;
        return model.logits(tape, tokenize(w, c));
      }();
      auto p = w;
      for (std::size_t u = t + 1; u < len; ++u) {
        p[u].prompt[0] += 3.0 * uniform01(rng) - 1.5;
        p[u].state[uniform_index(rng, c.state_dim)] += 1.0;
        p[u].action = uniform_index(rng, c.action_vocab);
      }
      // The action at t itself is the target, never an input to its own prediction.
      p[t].action = (*p[t].action + 1) % c.action_vocab;
      Tape tape;
      Tensor other = model.logits(tape, tokenize(p, c));
      for (std::size_t i = 0; i <= t * c.action_vocab + c.action_vocab - 1; ++i) {
        ASSERT_EQ(std::memcmp(&base.data()[i], &other.data()[i], sizeof(double)), 0) << "trial " << trial;
      }
    }
  }
}

TEST(Transformer, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const auto c = small_config(seed % 2 ? Tokenization::SeparateTokens : Tokenization::ConcatPromptState);
    CausalTransformer model(c, seed);
    Rng rng = make_stream(seed, "fd");
    const std::vector<PolicyWindow> ws{random_window(3, c, rng), random_window(2, c, rng)};
    const auto batch = tokenize(ws, c);
    auto f = [&](Tape& tape) { return weighted_nll_loss(tape, model.logits(tape, batch), batch); };
    const auto r = gradcheck(f, model.parameters());
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(WeightedNll, ZeroWeightsGiveZeroLossAndGradients) {
  const auto c = small_config();
  CausalTransformer model(c, 7);
  Rng rng = make_stream(7, "nll");
  auto w = random_window(3, c, rng);
  for (auto& s : w) s.weight = 0.0;
  const auto batch = tokenize(w, c);
  Tape tape;
  Tensor loss = weighted_nll_loss(tape, model.logits(tape, batch), batch);
  tape.backward(loss);
  EXPECT_EQ(loss.item(), 0.0);
  for (auto& p : model.parameters()) {
    for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
  }
}

TEST(WeightedNll, UnitWeightsEqualSummedCrossEntropy) {
  Tensor logits = Tensor::constant({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  Tape tape;
  const double loss = weighted_nll_loss(tape, logits, {2, 0}, {1.0, 1.0}, 1).item();
  const auto p0 = softmax_row(logits.data().subspan(0, 3));
  const auto p1 = softmax_row(logits.data().subspan(3, 3));
  EXPECT_NEAR(loss, -std::log(p0[2]) - std::log(p1[0]), 1e-12);
  Tape tape2;
  EXPECT_NEAR(weighted_nll_loss(tape2, logits, {2, 0}, {1.0, 1.0}, 2).item(), loss / 2.0, 1e-12);
}

TEST(WeightedNll, IsLinearInWeights) {
  Tensor logits = Tensor::constant({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  Tape a, b;
  const double single = weighted_nll_loss(a, logits, {1, 2}, {1.0, 0.0}, 1).item();
  EXPECT_NEAR(weighted_nll_loss(b, logits, {1, 2}, {2.0, 0.0}, 1).item(), 2.0 * single, 1e-12);
}

TEST(WeightedNll, RejectsNegativeWeights) {
  Tensor logits = Tensor::constant({1, 2}, {0.0, 0.0});
  Tape tape;
  EXPECT_THROW(weighted_nll_loss(tape, logits, {0}, {-1.0}, 1), std::invalid_argument);
}

TEST(WeightedNll, RaisingOneWeightRaisesItsGradientContribution) {
  const auto c = small_config();
  CausalTransformer model(c, 8);
  Rng rng = make_stream(8, "mono");
  auto w = random_window(3, c, rng);
  auto contribution = [&](double weight) {
    auto ww = w;
    for (auto& s : ww) s.weight = 0.0;
    ww[1].weight = weight;
    auto params = model.parameters();
    zero_grad(params);
    const auto batch = tokenize(ww, c);
    Tape tape;
    tape.backward(weighted_nll_loss(tape, model.logits(tape, batch), batch));
    return grad_norm(params);
  };
  const double lo = contribution(0.5), hi = contribution(1.5);
  EXPECT_GT(hi, lo);
  EXPECT_NEAR(hi / lo, 3.0, 1e-9);
}

TEST(ModelConfigTest, Validation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.context_length = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace adt
