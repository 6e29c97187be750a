#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "rnntlab/decoder.h"
#include "rnntlab/transducer_loss.h"
#include "test_util.h"

using namespace rnntlab;
using namespace rnntlab::testing;

namespace {

void zero(Tensor& t) {
  for (double& v : t.data()) v = 0.0;
}

// Emits label 1 from the start state and prefers blank once a label has been
// seen. Encoder output does not reach the joint network.
ModelParams forced_model() {
  ModelParams m = ModelParams::init(tiny_arch(0, 1, 3), 1);
  for (auto& e : m.tensors())
    if (e.part != Part::kEncoder) zero(*e.tensor);
  auto& layer = m.prediction.layers[0];
  const std::size_t c = layer.cells();
  m.prediction.embedding.at(1, 0) = 1.0;
  layer.w_in.at(2 * c + 0, 0) = 1.0;
  layer.w_in.at(2 * c + 1, 0) = -1.0;
  for (std::size_t j = 2 * c; j < 3 * c; ++j) layer.ln_gain[j] = 1.0;
  layer.w_proj.at(0, 0) = 1.0;
  m.joint.w_pred.at(0, 0) = 10.0;
  m.joint.bias[1] = 1.0;
  m.joint.w_out.at(0, 0) = 5.0;
  m.joint.w_out.at(1, 1) = 3.0;
  return m;
}

ModelParams blank_model() {
  ModelParams m = ModelParams::init(tiny_arch(0, 1, 3), 2);
  zero(m.joint.w_out);
  for (std::size_t k = 0; k < m.joint.bias.size(); ++k) {
    m.joint.bias[k] = 1.0;
    m.joint.w_out.at(0, k) = 10.0;
  }
  return m;
}

ModelParams peaked_model(std::uint64_t seed, std::size_t vocab, double scale) {
  ModelParams m = ModelParams::init(tiny_arch(0, 1, vocab), seed);
  for (double& v : m.joint.w_out.data()) v *= scale;
  return m;
}

void check_hypothesis(const Hypothesis& h, std::size_t T) {
  REQUIRE(h.emit_frames.size() == h.tokens.size());
  for (std::size_t i = 0; i < h.emit_frames.size(); ++i) {
    CHECK(h.emit_frames[i] < T);
    if (i) CHECK(h.emit_frames[i - 1] <= h.emit_frames[i]);
  }
  for (TokenId y : h.tokens) CHECK(y != kBlankId);
}

}  // namespace

TEST_CASE("forced model: greedy emits one label at frame 0") {
  const ModelParams m = forced_model();
  Rng rng(3);
  const FrameMatrix f = random_features(rng, 2, 2);
  const Hypothesis g = greedy_decode(m, f);
  CHECK(g.tokens == TokenSeq{1});
  CHECK(g.emit_frames == std::vector<std::size_t>{0});
  // Path: label at (0,0), blank at (0,1), blank at (1,1).
  const LogitLattice lat = rnnt_forward(m, f, g.tokens);
  auto lp = [&](std::size_t t, std::size_t u, std::size_t k) {
    std::vector<double> row(lat.at(t, u).begin(), lat.at(t, u).end());
    log_softmax_inplace(row);
    return row[k];
  };
  CHECK(g.score == doctest::Approx(lp(0, 0, 1) + lp(0, 1, 0) + lp(1, 1, 0)).epsilon(1e-12));

  const NBest b = beam_decode(m, f, 1);
  REQUIRE(b.size() == 1);
  CHECK(b[0].tokens == g.tokens);
  CHECK(b[0].emit_frames == g.emit_frames);
}

TEST_CASE("blank-dominant model decodes to nothing") {
  const ModelParams m = blank_model();
  Rng rng(4);
  const FrameMatrix f = random_features(rng, 3, 2);
  const Hypothesis g = greedy_decode(m, f);
  CHECK(g.tokens.empty());
  CHECK(g.emit_frames.empty());
  CHECK(exhaustive_decode(m, f, 2).tokens.empty());
  CHECK(beam_decode(m, f, 5).front().tokens.empty());
}

TEST_CASE("saturating beam equals the exhaustive decoder") {
  std::size_t nonempty = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    const std::size_t T = 1 + seed % 3, vocab = 2 + seed % 2, umax = 1 + seed % 2;
    const ModelParams m = peaked_model(seed, vocab, 4.0);
    const FrameMatrix f = random_features(rng, T, 2);
    const Hypothesis ex = exhaustive_decode(m, f, umax);
    const NBest nb = beam_decode(m, f, 64, umax);
    REQUIRE_FALSE(nb.empty());
    CHECK(nb.front().tokens == ex.tokens);
    CHECK(nb.front().score == doctest::Approx(ex.score).epsilon(1e-10));
    nonempty += !ex.tokens.empty();
  }
  CHECK(nonempty > 5);
}

TEST_CASE("exhaustive scores match the transducer loss") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    Rng rng(100 + seed);
    const ModelParams m = peaked_model(seed, 4, 2.0);
    const std::size_t T = 1 + seed % 4;
    const FrameMatrix f = random_features(rng, T, 2);
    const TokenSeq y = random_labels(rng, seed % 4, 4);
    const double loss = rnnt_loss_grad(rnnt_forward(m, f, y), y).loss;
    CHECK(std::abs(sequence_log_prob(m, f, y) + loss) < 1e-8);
  }
}

TEST_CASE("exhaustive guard") {
  const ModelParams m = peaked_model(1, 3, 1.0);
  Rng rng(1);
  CHECK_THROWS_AS(exhaustive_decode(m, random_features(rng, 10, 2), 3), Error);
  CHECK_NOTHROW(exhaustive_decode(m, random_features(rng, 9, 2), 3));
}

TEST_CASE("beam output contract on random models") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng(200 + seed);
    const ModelParams m = peaked_model(seed, 4, 3.0);
    const std::size_t T = 2 + seed % 5;
    const FrameMatrix f = random_features(rng, T, 2);
    const NBest nb = beam_decode(m, f, 4);
    REQUIRE_FALSE(nb.empty());
    CHECK(nb.size() <= 4);
    std::set<TokenSeq> seen;
    for (std::size_t i = 0; i < nb.size(); ++i) {
      check_hypothesis(nb[i], T);
      CHECK(nb[i].tokens.size() <= max_labels(T));
      CHECK(seen.insert(nb[i].tokens).second);
      if (i) CHECK(ranks_before(nb[i - 1], nb[i]));
      // Scores re-derive from the exact marginal; frames from the best alignment.
      CHECK(nb[i].score == doctest::Approx(sequence_log_prob(m, f, nb[i].tokens)).epsilon(1e-10));
      CHECK(nb[i].emit_frames == best_alignment(m, f, nb[i].tokens));
    }
    const Hypothesis g = greedy_decode(m, f);
    check_hypothesis(g, T);
    CHECK(g.score <= sequence_log_prob(m, f, g.tokens) + 1e-12);
  }
}

TEST_CASE("ranks_before orders by score then tokens") {
  const Hypothesis a{{1, 2}, -1.0, {0, 0}}, b{{1, 3}, -1.0, {0, 0}}, c{{1}, -0.5, {0}};
  CHECK(ranks_before(c, a));
  CHECK(ranks_before(a, b));
  CHECK_FALSE(ranks_before(b, a));
  CHECK_FALSE(ranks_before(a, a));
}

TEST_CASE("N-best CSV rows") {
  const Vocabulary v({"<blank>", "<unk>", "_he", "llo", "_yo"});
  std::ostringstream out;
  write_nbest_header(out);
  write_nbest_rows(out, "u1", NBest{{{2, 3}, -1.25, {0, 2}}, {{4}, -2.5, {1}}}, v);
  CHECK(out.str() ==
        "utt_id,rank,score,emit_frames,text\n"
        "u1,1,-1.250000,0;2,hello\n"
        "u1,2,-2.500000,1,yo\n");
}
