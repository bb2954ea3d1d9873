#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <thread>

#include "naive_lm.hpp"
#include "steerkit/error.hpp"
#include "steerkit/evalkit.hpp"
#include "steerkit/tiny_lm.hpp"
#include "test_util.hpp"

using namespace steerkit;
using testutil::small_config;

namespace {

void expect_near_vec(const std::vector<double>& got, const naive::Vec& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], static_cast<double>(want[i]), tol) << "at " << i;
}

}  // namespace

TEST(Tokenizer, ByteValues) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("A"), std::vector<TokenId>{65});
  EXPECT_EQ(tokenize("Hi"), (std::vector<TokenId>{72, 105}));
  EXPECT_EQ(tokenize("\xC3\xA9"), (std::vector<TokenId>{0xC3, 0xA9}));
  const std::vector<TokenId> t = {72, 105, 0xC3, 0xA9};
  EXPECT_EQ(detokenize(t), "Hi\xC3\xA9");
}

TEST(ModelConfig, RejectsViolatedInvariants) {
  ModelConfig c;
  c.d_model = 12;
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig{};
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig{};
  c.vocab_size = 128;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig{};
  c.max_seq_len = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_THROW(init_weights(ModelConfig{.n_layers = 2, .d_model = 12, .n_heads = 5}), InvalidArgument);
}

TEST(InitWeights, DeterministicPerSeed) {
  const auto a = init_weights(small_config(7));
  const auto b = init_weights(small_config(7));
  const auto c = init_weights(small_config(8));
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  EXPECT_NE(a.embed, c.embed);
  EXPECT_EQ(compute_fingerprint(a), compute_fingerprint(b));
  EXPECT_NE(compute_fingerprint(a), compute_fingerprint(c));
}

TEST(InitWeights, ScaleIsOneOverSqrtDModel) {
  const auto w = init_weights(small_config());
  const double bound = 1.0 / std::sqrt(16.0);
  double max_abs = 0;
  w.for_each_buffer([&](const std::vector<float>& buf) {
    if (&buf == &w.final_norm) return;
    for (float v : buf) {
      if (v != 1.0f) max_abs = std::max(max_abs, static_cast<double>(std::abs(v)));
    }
  });
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.9 * bound);
  for (float g : w.final_norm) EXPECT_EQ(g, 1.0f);
}

TEST(Weights, SaveLoadRoundTrip) {
  testutil::TempDir dir;
  const auto w = init_weights(small_config());
  save_weights(w, dir.path() / "m.tlmw");
  const auto back = load_weights(dir.path() / "m.tlmw", 64);
  EXPECT_EQ(back.checksum(), w.checksum());
  EXPECT_EQ(TinyLm(back).fingerprint(), TinyLm(w).fingerprint());
  std::ofstream(dir.path() / "bad.tlmw", std::ios::binary) << "NOPE";
  EXPECT_THROW(load_weights(dir.path() / "bad.tlmw"), Error);
}

TEST(Forward, MatchesNaiveOracle) {
  Rng rng(11);
  const auto w = init_weights(small_config());
  const TinyLm model(w);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tokens = testutil::random_tokens(rng, 1 + static_cast<int>(rng.below(20)));
    const auto ref = naive::forward(w, tokens);
    for (int layer = 0; layer < 3; ++layer) {
      const ForwardResult got = model.forward_full(tokens, {layer, Granularity::kAttnMlp});
      expect_near_vec(got.tap.attn_out, ref.taps[layer].attn, 1e-9);
      expect_near_vec(got.tap.mlp_out, ref.taps[layer].mlp, 1e-9);
      expect_near_vec(got.tap.whole_out, ref.taps[layer].whole, 1e-9);
      for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
        const auto row = got.logits.row(t);
        for (int v = 0; v < kVocabSize; ++v) ASSERT_NEAR(row[v], static_cast<double>(ref.logits[t][v]), 1e-9);
      }
    }
  }
}

TEST(Forward, InjectedMatchesNaiveOracle) {
  Rng rng(12);
  const auto w = init_weights(small_config());
  const TinyLm model(w);
  const auto tokens = testutil::random_tokens(rng, 9);
  InjectionPayload p;
  p.layer = 1;
  p.s_attn = testutil::random_vector(rng, 16);
  p.s_mlp = testutil::random_vector(rng, 16);
  p.s_whole = testutil::random_vector(rng, 16);
  p.alpha = 0.7;
  p.beta = 1.3;
  p.gamma = 0.4;
  const Logits got = model.forward_injected(tokens, p);
  const auto ref = naive::forward(w, tokens, &p);
  for (int t = 0; t < 9; ++t) {
    for (int v = 0; v < kVocabSize; ++v) ASSERT_NEAR(got.row(t)[v], static_cast<double>(ref.logits[t][v]), 1e-9);
  }
}

TEST(Forward, DeterministicAndCausal) {
  Rng rng(13);
  const TinyLm model(init_weights(small_config()));
  auto tokens = testutil::random_tokens(rng, 12);
  const auto a = model.forward_full(tokens, {1, Granularity::kWhole});
  const auto b = model.forward_full(tokens, {1, Granularity::kWhole});
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.tap.whole_out, b.tap.whole_out);

  auto longer = tokens;
  longer.push_back(42);
  const auto c = model.forward_full(longer, {1, Granularity::kWhole});
  for (int t = 0; t < 12; ++t) {
    for (int v = 0; v < kVocabSize; ++v) ASSERT_EQ(a.logits.row(t)[v], c.logits.row(t)[v]);
  }
  // Perturbing position j leaves every earlier position untouched.
  for (int j = 0; j < 12; ++j) {
    auto perturbed = tokens;
    perturbed[j] = (perturbed[j] + 1) % kVocabSize;
    const auto d = model.forward_full(perturbed, {0, Granularity::kWhole});
    for (int t = 0; t < j; ++t) {
      for (int v = 0; v < kVocabSize; ++v) ASSERT_EQ(a.logits.row(t)[v], d.logits.row(t)[v]);
    }
  }
}

TEST(Forward, RejectsBadLengths) {
  const TinyLm model(init_weights(small_config()));
  EXPECT_THROW(model.forward_full(std::vector<TokenId>{}, {0, Granularity::kWhole}), SequenceLengthError);
  EXPECT_THROW(model.forward_full(std::vector<TokenId>(65, 1), {0, Granularity::kWhole}), SequenceLengthError);
  EXPECT_NO_THROW(model.forward_full(std::vector<TokenId>(64, 1), {0, Granularity::kWhole}));
  EXPECT_THROW(model.forward_full(std::vector<TokenId>{1}, {3, Granularity::kWhole}), InvalidArgument);
}

TEST(Forward, AttentionRowsSumToOne) {
  Rng rng(14);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 10);
  for (int layer = 0; layer < 3; ++layer) {
    RunOptions opt;
    opt.attention_layer = layer;
    const RunResult r = model.run(tokens, opt);
    ASSERT_EQ(r.attention.size(), 10u * 2u);
    for (const auto& row : r.attention) {
      double s = 0;
      for (double p : row) {
        EXPECT_GE(p, 0.0);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Injection, ZeroScalesAreIdentity) {
  Rng rng(15);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 8);
  InjectionPayload p;
  p.layer = 1;
  p.s_attn = testutil::random_vector(rng, 16);
  p.s_mlp = testutil::random_vector(rng, 16);
  p.s_whole = testutil::random_vector(rng, 16);
  EXPECT_TRUE(p.is_identity());
  EXPECT_EQ(model.forward_injected(tokens, p), model.forward_full(tokens, {1, Granularity::kWhole}).logits);
  GenerateOptions g;
  g.max_new = 10;
  EXPECT_EQ(model.generate(tokens, &p, g), model.generate(tokens, nullptr, g));
}

TEST(Injection, TapReadBackIsAdditive) {
  Rng rng(16);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 7);
  for (int layer = 0; layer < 3; ++layer) {
    const ActivationTap base = model.forward_full(tokens, {layer, Granularity::kAttn}).tap;
    InjectionPayload p;
    p.layer = layer;
    p.s_attn = testutil::random_vector(rng, 16);
    p.alpha = 1.0;
    RunOptions opt;
    opt.payload = &p;
    opt.tap_layer = layer;
    const ActivationTap got = *model.run(tokens, opt).tap;
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(got.attn_out[i], base.attn_out[i] + (*p.s_attn)[i], 1e-6);

    InjectionPayload q;
    q.layer = layer;
    q.s_whole = testutil::random_vector(rng, 16);
    q.gamma = 0.3;
    opt.payload = &q;
    const ActivationTap whole = *model.run(tokens, opt).tap;
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(whole.whole_out[i], base.whole_out[i] + 0.3 * (*q.s_whole)[i], 1e-6);
  }
}

TEST(Injection, LayersBeforeTheSiteAreUntouched) {
  Rng rng(17);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 6);
  InjectionPayload p;
  p.layer = 2;
  p.s_attn = testutil::random_vector(rng, 16);
  p.alpha = 2.0;
  RunOptions opt;
  opt.payload = &p;
  opt.tap_layers = {0, 1, 2};
  RunOptions plain;
  plain.tap_layers = {0, 1, 2};
  const auto steered = model.run(tokens, opt).layer_taps;
  const auto base = model.run(tokens, plain).layer_taps;
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(steered[l].attn_out, base[l].attn_out);
    EXPECT_EQ(steered[l].mlp_out, base[l].mlp_out);
    EXPECT_EQ(steered[l].whole_out, base[l].whole_out);
  }
  EXPECT_NE(steered[2].attn_out, base[2].attn_out);
}

TEST(Injection, ValidatesPayload) {
  const TinyLm model(init_weights(small_config()));
  const std::vector<TokenId> tokens = {1, 2, 3};
  InjectionPayload p;
  p.layer = 0;
  EXPECT_THROW(model.forward_injected(tokens, p), InvalidArgument);  // no vectors
  p.s_attn = std::vector<float>(15, 0.0f);
  EXPECT_THROW(model.forward_injected(tokens, p), DimensionMismatch);
  p.s_attn = std::vector<float>(16, 0.0f);
  p.alpha = -1;
  EXPECT_THROW(model.forward_injected(tokens, p), InvalidArgument);
  p.alpha = std::nan("");
  EXPECT_THROW(model.forward_injected(tokens, p), InvalidArgument);
  p.alpha = 1;
  p.layer = 3;
  EXPECT_THROW(model.forward_injected(tokens, p), InvalidArgument);
}

TEST(Run, MultiLayerTapsMatchSingleTaps) {
  Rng rng(18);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 9);
  RunOptions opt;
  opt.tap_layers = {2, 0};
  opt.logits = RunOptions::LogitsMode::kNone;
  const auto taps = model.run(tokens, opt).layer_taps;
  ASSERT_EQ(taps.size(), 2u);
  EXPECT_EQ(taps[0].whole_out, model.forward_full(tokens, {2, Granularity::kWhole}).tap.whole_out);
  EXPECT_EQ(taps[1].mlp_out, model.forward_full(tokens, {0, Granularity::kWhole}).tap.mlp_out);
}

TEST(Run, LastLogitsMatchFullLogits) {
  Rng rng(19);
  const TinyLm model(init_weights(small_config()));
  const auto tokens = testutil::random_tokens(rng, 9);
  RunOptions opt;
  opt.logits = RunOptions::LogitsMode::kLast;
  const auto last = model.run(tokens, opt).logits;
  const auto full = model.forward_full(tokens, {0, Granularity::kWhole}).logits;
  ASSERT_EQ(last.seq_len, 1);
  for (int v = 0; v < kVocabSize; ++v) EXPECT_EQ(last.row(0)[v], full.row(8)[v]);
}

TEST(Generate, GreedyMatchesForwardArgmax) {
  Rng rng(20);
  const TinyLm model(init_weights(small_config()));
  const auto prompt = testutil::random_tokens(rng, 5);
  GenerateOptions g;
  g.max_new = 8;
  g.stop_at_eos = false;
  const auto out = model.generate(prompt, nullptr, g);
  ASSERT_EQ(out.size(), 8u);
  auto seq = prompt;
  for (TokenId t : out) {
    const auto logits = model.forward_full(seq, {0, Granularity::kWhole}).logits;
    EXPECT_EQ(t, argmax(logits.row(logits.seq_len - 1)));
    seq.push_back(t);
  }
  EXPECT_EQ(model.generate(prompt, nullptr, g), out);
}

TEST(Generate, EdgeCases) {
  const TinyLm model(init_weights(small_config()));
  GenerateOptions g;
  g.max_new = 0;
  EXPECT_TRUE(model.generate(std::vector<TokenId>{1, 2}, nullptr, g).empty());
  g.max_new = 1000;
  g.stop_at_eos = false;
  EXPECT_EQ(model.generate(std::vector<TokenId>(60, 3), nullptr, g).size(), 4u);  // context of 64
  EXPECT_THROW(model.generate(std::vector<TokenId>{}, nullptr, g), SequenceLengthError);
  EXPECT_THROW(model.generate(std::vector<TokenId>(65, 3), nullptr, g), SequenceLengthError);
}

TEST(Generate, StopsAtEndOfText) {
  // Probe model whose target is end-of-text: steering hard towards it ends
  // generation immediately.
  const auto probe = make_probe_model(small_config(), kEndOfText, 3);
  const TinyLm model(probe.weights);
  InjectionPayload p;
  p.layer = 0;
  p.s_whole = probe.direction;
  p.gamma = 50;
  GenerateOptions g;
  g.max_new = 5;
  EXPECT_TRUE(model.generate(std::vector<TokenId>{65}, &p, g).empty());
  g.stop_at_eos = false;
  EXPECT_EQ(model.generate(std::vector<TokenId>{65}, &p, g), std::vector<TokenId>(5, kEndOfText));
}

TEST(Argmax, LowestIndexWinsTies) {
  EXPECT_EQ(argmax(std::vector<double>{1, 3, 3, 2}), 1);
  EXPECT_EQ(argmax(std::vector<double>{5, 5}), 0);
}

TEST(MeanLogprob, MatchesOracleLogSoftmax) {
  Rng rng(21);
  const auto w = init_weights(small_config());
  const TinyLm model(w);
  const auto prompt = testutil::random_tokens(rng, 4);
  const auto cont = testutil::random_tokens(rng, 3);
  auto all = prompt;
  all.insert(all.end(), cont.begin(), cont.end());
  const auto ref = naive::forward(w, all);
  long double sum = 0;
  for (int i = 0; i < 3; ++i) {
    const auto& row = ref.logits[prompt.size() - 1 + i];
    long double mx = row[0], z = 0;
    for (auto v : row) mx = std::max(mx, v);
    for (auto v : row) z += std::exp(v - mx);
    sum += row[cont[i]] - mx - std::log(z);
  }
  EXPECT_NEAR(model.mean_logprob(prompt, cont, nullptr), static_cast<double>(sum / 3), 1e-9);
  EXPECT_THROW(model.mean_logprob(prompt, std::vector<TokenId>{}, nullptr), InvalidArgument);
}

TEST(Concurrency, ParallelCallsAgree) {
  const TinyLm model(init_weights(small_config()));
  const std::vector<TokenId> prompt = {10, 20, 30};
  GenerateOptions g;
  g.max_new = 12;
  g.stop_at_eos = false;
  const auto want = model.generate(prompt, nullptr, g);
  std::vector<std::vector<TokenId>> got(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&, i] { got[i] = model.generate(prompt, nullptr, g); });
  for (auto& t : threads) t.join();
  for (const auto& g2 : got) EXPECT_EQ(g2, want);
}
