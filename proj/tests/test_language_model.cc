#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "rnntlab/language_model.h"
#include "test_util.h"

using namespace rnntlab;
using namespace rnntlab::testing;

namespace {

void zero(Tensor& t) {
  for (double& v : t.data()) v = 0.0;
}

LmParams uniform_lm(std::size_t vocab_size) {
  LmParams lm = LmParams::init(vocab_size, 4, 1, 3);
  zero(lm.w_out);
  zero(lm.b_out);
  return lm;
}

// Output k gets logit `bias[k]` regardless of history.
LmParams biased_lm(const std::vector<double>& bias) {
  LmParams lm = uniform_lm(bias.size());
  for (std::size_t k = 0; k < bias.size(); ++k) lm.b_out[k] = bias[k];
  return lm;
}

TrainConfig lm_config(std::size_t epochs) {
  TrainConfig c;
  c.lm_hidden = 16;
  c.lm_layers = 1;
  c.epochs = epochs;
  c.batch = 1;
  c.lr = 1e-2;
  c.seed = 5;
  return c;
}

const Vocabulary& toy_vocab() {
  static const Vocabulary v({"<blank>", "<unk>", "_a", "_b", "_c", "d"});
  return v;
}

bool same_params(const LmParams& a, const LmParams& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto x = ta[i].second->data(), y = tb[i].second->data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("uniform model scores") {
  const LmParams lm = uniform_lm(6);
  REQUIRE(lm.pieces == 5);
  for (std::size_t k = 0; k <= 4; ++k) {
    TokenSeq s(k, 2);
    CHECK(lm_score(lm, s) == doctest::Approx(static_cast<double>(k + 1) * std::log(1.0 / 6.0)).epsilon(1e-12));
  }
  CHECK(lm_score(lm, {}) == doctest::Approx(std::log(1.0 / 6.0)).epsilon(1e-12));
  CHECK(lm_perplexity(lm, {{2, 3}, {4}}) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK_THROWS_AS(lm_score(lm, {kBlankId}), Error);
  CHECK_THROWS_AS(lm_score(lm, {6}), Error);
}

TEST_CASE("incremental state agrees with the graph") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const LmParams lm = LmParams::init(7, 5, 1 + seed % 2, seed);
    Rng rng(seed);
    const TokenSeq y = random_labels(rng, seed % 5, 7);
    LmState st = lm_start(lm);
    double total = 0.0;
    for (TokenId t : y) {
      const auto lp = lm_next_log_probs(lm, st);
      REQUIRE(lp.size() == lm.outputs());
      double mass = 0.0;
      for (double v : lp) mass += std::exp(v);
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
      total += lp[t];
      st = lm_advance(lm, st, t);
    }
    total += lm_next_log_probs(lm, st)[kLmEnd];
    const double s = lm_score(lm, y);
    CHECK(s == doctest::Approx(total).epsilon(1e-10));
    CHECK(s <= 0.0);
  }
}

TEST_CASE("training overfits a single sentence") {
  const LmParams lm = train_lm({"a b c"}, lm_config(150), toy_vocab());
  const TokenSeq y = encode("a b c", toy_vocab());
  CHECK(lm_perplexity(lm, {y}) < 1.2);
}

TEST_CASE("zero epochs returns the initialization and training is deterministic") {
  const TrainConfig c0 = lm_config(0);
  const LmParams init = train_lm({"a b"}, c0, toy_vocab());
  CHECK(same_params(init, LmParams::init(toy_vocab().size(), c0.lm_hidden, c0.lm_layers, c0.seed)));
  const std::vector<std::string> texts{"a b", "c d a", "b"};
  CHECK(same_params(train_lm(texts, lm_config(3), toy_vocab()), train_lm(texts, lm_config(3), toy_vocab())));
  CHECK_THROWS_AS(train_lm({}, lm_config(1), toy_vocab()), Error);
}

TEST_CASE("rescoring examples") {
  // Pieces 1..3; scores below depend only on length through the end token.
  const LmParams lm = biased_lm({0.0, 0.0, 0.0, 0.0});
  const NBest nb{{{2}, -5.0, {0}}, {{3}, -6.0, {0}}};
  CHECK(rescore(nb, lm, 0.0).tokens == TokenSeq{2});

  // Make piece 3 far more likely than piece 2.
  const LmParams skew = biased_lm({0.0, -50.0, -50.0, 0.0});
  const double a = lm_score(skew, {2}), b = lm_score(skew, {3});
  REQUIRE(a < b);
  // Combined: -5 + 0.5 a versus -6 + 0.5 b.
  CHECK((nb[1].score + 0.5 * b > nb[0].score + 0.5 * a) == (rescore(nb, skew, 0.5).tokens == TokenSeq{3}));
  CHECK(rescore(nb, skew, 1e6).tokens == TokenSeq{3});

  CHECK_THROWS_AS(rescore({}, lm, 0.5), Error);
  CHECK_THROWS_AS(rescore(nb, lm, -0.1), Error);
}

TEST_CASE("rescoring properties on random lists") {
  Rng rng(17);
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const LmParams lm = LmParams::init(6, 4, 1, seed);
    NBest nb;
    for (std::size_t i = 0; i < 1 + seed % 5; ++i) {
      Hypothesis h;
      h.tokens = random_labels(rng, 1 + i, 6);
      h.score = -1.0 - static_cast<double>(i) - rng.uniform();
      nb.push_back(h);
    }
    CHECK(rescore(nb, lm, 0.0).tokens == nb.front().tokens);

    NBest shifted = nb;
    for (auto& h : shifted) h.score += 7.5;
    double prev_lm = -INFINITY;
    for (double lambda : {0.0, 0.3, 1.0, 3.0, 10.0}) {
      const Hypothesis w = rescore(nb, lm, lambda);
      CHECK(rescore(shifted, lm, lambda).tokens == w.tokens);
      // The winner's LM score is nondecreasing in lambda.
      const double s = lm_score(lm, w.tokens);
      CHECK(s >= prev_lm - 1e-12);
      prev_lm = s;
    }
    double best = -INFINITY;
    for (const auto& h : nb) best = std::max(best, lm_score(lm, h.tokens));
    CHECK(lm_score(lm, rescore(nb, lm, 1e9).tokens) == best);
  }
}

TEST_CASE("lambda selection") {
  const Vocabulary& v = toy_vocab();
  const LmParams skew = biased_lm({0.0, -50.0, -50.0, 0.0, -50.0, -50.0});
  // Reference "b": the transducer prefers "a", the LM prefers "b".
  const std::vector<NBest> nbests{{{{2}, -1.0, {0}}, {{3}, -1.5, {0}}}};
  const auto s = select_lambda(nbests, {"b"}, skew, v, default_lambda_grid());
  REQUIRE(s.grid.size() == 11);
  CHECK(s.grid.front().first == 0.0);
  CHECK(s.grid.front().second == 100.0);
  CHECK(s.best_lambda > 0.0);
  // Ties resolve to the smallest lambda.
  CHECK(s.best_lambda == 0.1);
  const auto tie = select_lambda(nbests, {"a"}, biased_lm(std::vector<double>(6, 0.0)), v, {0.5, 0.0, 1.0});
  CHECK(tie.best_lambda == 0.0);
  CHECK_THROWS_AS(select_lambda(nbests, {}, skew, v, default_lambda_grid()), Error);
  CHECK_THROWS_AS(select_lambda(nbests, {"a"}, skew, v, {}), Error);
  CHECK_THROWS_AS(select_lambda(nbests, {"a"}, skew, v, {-1.0}), Error);
}

TEST_CASE("checkpoint roundtrip") {
  const LmParams lm = LmParams::init(9, 6, 2, 4);
  const auto path = std::filesystem::temp_directory_path() / "rnntlab_test_lm.ckpt";
  lm.save(path);
  const LmParams back = LmParams::load(path);
  CHECK(back.pieces == lm.pieces);
  CHECK(same_params(back, lm));
  const TokenSeq y{1, 4, 8};
  CHECK(lm_score(back, y) == lm_score(lm, y));
  std::filesystem::remove(path);
}
