#include "rnntlab/language_model.h"

#include <algorithm>
#include <cmath>

#include "rnntlab/evaluation.h"
#include "rnntlab/rng.h"

namespace rnntlab {

LmParams LmParams::init(std::size_t vocab_size, std::size_t hidden, std::size_t layers, std::uint64_t seed) {
  if (vocab_size < 2) throw Error("LmParams: vocabulary needs at least <blank> and one piece");
  if (hidden == 0 || layers == 0) throw Error("LmParams: hidden and layers must be >= 1");
  LmParams lm;
  lm.pieces = vocab_size - 1;
  lm.embedding = glorot(lm.pieces + 2, hidden, seed, "lm.embedding");
  for (std::size_t l = 0; l < layers; ++l)
    lm.layers.push_back(init_lstm_layer(hidden, hidden, hidden, seed, "lm." + std::to_string(l)));
  lm.w_out = glorot(lm.pieces + 1, hidden, seed, "lm.w_out");
  lm.b_out = Tensor::matrix(1, lm.pieces + 1);
  return lm;
}

std::vector<std::pair<std::string, Tensor*>> LmParams::tensors() {
  std::vector<std::pair<std::string, Tensor*>> out{{"lm.embedding", &embedding}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "lm." + std::to_string(l) + ".";
    auto& L = layers[l];
    out.insert(out.end(), {{p + "w_in", &L.w_in}, {p + "w_rec", &L.w_rec}, {p + "ln_gain", &L.ln_gain},
                           {p + "ln_bias", &L.ln_bias}, {p + "w_proj", &L.w_proj}});
  }
  out.emplace_back("lm.w_out", &w_out);
  out.emplace_back("lm.b_out", &b_out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> LmParams::tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [n, t] : const_cast<LmParams*>(this)->tensors()) out.emplace_back(n, t);
  return out;
}

void LmParams::save(const std::filesystem::path& path) const {
  Checkpoint ck;
  ck.tag = kLanguageModelTag;
  ck.header = {static_cast<std::uint32_t>(pieces), static_cast<std::uint32_t>(hidden()),
               static_cast<std::uint32_t>(layers.size())};
  for (const auto& [name, t] : tensors()) ck.sections.emplace_back(name, *t);
  ck.save(path);
}

LmParams LmParams::load(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.tag != kLanguageModelTag) throw Error(path.string() + ": not a language-model checkpoint");
  if (ck.header.size() != 3) throw Error(path.string() + ": bad language-model header");
  LmParams lm = init(ck.header[0] + 1, ck.header[1], ck.header[2], 0);
  for (auto& [name, t] : lm.tensors()) {
    const Tensor& src = ck.section(name);
    if (src.shape() != t->shape()) throw Error(path.string() + ": shape mismatch for " + name);
    *t = src;
  }
  return lm;
}

namespace {

void check_seq(const LmParams& lm, const TokenSeq& seq) {
  for (TokenId y : seq)
    if (y == kBlankId || y > lm.pieces) throw Error("language model: token id " + std::to_string(y) + " out of range");
}

std::vector<std::size_t> targets_of(const TokenSeq& seq) {
  std::vector<std::size_t> t(seq.begin(), seq.end());
  t.push_back(kLmEnd);
  return t;
}

}  // namespace

Var lm_forward_graph(Graph& g, const LmParams& lm, const TokenSeq& seq, bool trainable) {
  check_seq(lm, seq);
  const Binder bind(g, trainable ? kAllParts : 0);
  std::vector<std::size_t> ids{0};
  ids.insert(ids.end(), seq.begin(), seq.end());
  Var h = gather_rows(bind(lm.embedding, Part::kPrediction), ids);
  for (const auto& layer : lm.layers) h = lstm_p_forward(bind, layer, Part::kPrediction, h);
  return add_row(linear(h, bind(lm.w_out, Part::kPrediction)), bind(lm.b_out, Part::kPrediction));
}

double lm_score(const LmParams& lm, const TokenSeq& seq) {
  Graph g;
  const Var logits = lm_forward_graph(g, lm, seq, false);
  const auto v = logits.value();
  const std::size_t k = lm.outputs();
  const auto targets = targets_of(seq);
  double total = 0.0;
  for (std::size_t u = 0; u < targets.size(); ++u) {
    std::vector<double> row(v.begin() + u * k, v.begin() + (u + 1) * k);
    log_softmax_inplace(row);
    total += row[targets[u]];
  }
  return total;
}

namespace {

LmState feed(const LmParams& lm, LmState st, std::size_t row) {
  const std::size_t h = lm.hidden();
  std::vector<double> x(lm.embedding.data().begin() + row * h, lm.embedding.data().begin() + (row + 1) * h);
  for (std::size_t l = 0; l < lm.layers.size(); ++l) x = lstm_step(lm.layers[l], x, st.layers[l]);
  st.output = std::move(x);
  return st;
}

}  // namespace

LmState lm_start(const LmParams& lm) {
  LmState st;
  for (const auto& l : lm.layers) st.layers.push_back(zero_state(l));
  return feed(lm, std::move(st), 0);
}

LmState lm_advance(const LmParams& lm, const LmState& state, TokenId token) {
  check_seq(lm, TokenSeq{token});
  return feed(lm, state, token);
}

std::vector<double> lm_next_log_probs(const LmParams& lm, const LmState& state) {
  const std::size_t k = lm.outputs(), h = lm.hidden();
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    double s = lm.b_out[i];
    for (std::size_t j = 0; j < h; ++j) s += lm.w_out.at(i, j) * state.output[j];
    out[i] = s;
  }
  log_softmax_inplace(out);
  return out;
}

LmParams train_lm(const std::vector<std::string>& texts, const TrainConfig& cfg, const Vocabulary& vocab) {
  cfg.check();
  if (texts.empty()) throw Error("train_lm: empty text corpus");
  LmParams lm = LmParams::init(vocab.size(), cfg.lm_hidden, cfg.lm_layers, cfg.seed);
  std::vector<TokenSeq> seqs;
  for (const auto& t : texts) seqs.push_back(encode(t, vocab));

  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return seqs[a].size() < seqs[b].size(); });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += cfg.batch)
    batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + cfg.batch));

  auto named = lm.tensors();
  std::vector<Tensor*> params;
  for (auto& [n, t] : named) params.push_back(t);
  Adam opt;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    LmParams last_good = lm;
    EpochOptions o{&batches, cfg.lr_at(epoch), cfg.clip, derive_seed(cfg.seed, "lm" + std::to_string(epoch))};
    try {
      run_epoch(params, opt, o, [&](std::size_t i) {
        Graph g;
        const Var logits = lm_forward_graph(g, lm, seqs[i], true);
        const auto targets = targets_of(seqs[i]);
        const Var loss = scale(softmax_cross_entropy(logits, targets), static_cast<double>(targets.size()));
        const double value = loss.scalar();
        if (std::isfinite(value)) g.backward(loss);
        return value;
      });
    } catch (const NonFiniteLossError& e) {
      throw LmDivergenceError(std::string("train_lm diverged: ") + e.what(), std::move(last_good));
    }
  }
  return lm;
}

double lm_perplexity(const LmParams& lm, const std::vector<TokenSeq>& seqs) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : seqs) {
    total += lm_score(lm, s);
    tokens += s.size() + 1;
  }
  if (tokens == 0) throw Error("lm_perplexity: no tokens");
  return std::exp(-total / static_cast<double>(tokens));
}

namespace {

std::size_t pick(const NBest& nbest, const std::vector<double>& lm_scores, double lambda) {
  std::size_t best = 0;
  double best_score = kNegInf;
  for (std::size_t i = 0; i < nbest.size(); ++i) {
    const double s = lambda == 0.0 ? nbest[i].score : nbest[i].score + lambda * lm_scores[i];
    if (i == 0 || s > best_score || (s == best_score && nbest[i].tokens < nbest[best].tokens)) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

std::vector<double> lm_scores_of(const NBest& nbest, const LmParams& lm) {
  std::vector<double> out;
  for (const auto& h : nbest) out.push_back(lm_score(lm, h.tokens));
  return out;
}

}  // namespace

Hypothesis rescore(const NBest& nbest, const LmParams& lm, double lambda) {
  if (nbest.empty()) throw Error("rescore: empty N-best list");
  if (!(lambda >= 0.0)) throw Error("rescore: lambda must be >= 0");
  return nbest[pick(nbest, lm_scores_of(nbest, lm), lambda)];
}

LambdaSearch select_lambda(const std::vector<NBest>& nbests, const std::vector<std::string>& refs,
                           const LmParams& lm, const Vocabulary& vocab, const std::vector<double>& grid) {
  if (nbests.size() != refs.size()) throw Error("select_lambda: N-best and reference counts differ");
  if (grid.empty()) throw Error("select_lambda: empty lambda grid");
  std::vector<std::vector<double>> scores;
  for (const auto& nb : nbests) {
    if (nb.empty()) throw Error("select_lambda: empty N-best list");
    scores.push_back(lm_scores_of(nb, lm));
  }
  LambdaSearch out;
  double best_wer = 0.0;
  for (double lambda : grid) {
    if (!(lambda >= 0.0)) throw Error("select_lambda: lambda must be >= 0");
    std::vector<std::string> hyps;
    for (std::size_t i = 0; i < nbests.size(); ++i)
      hyps.push_back(decode(nbests[i][pick(nbests[i], scores[i], lambda)].tokens, vocab));
    const double w = wer(refs, hyps).wer;
    out.grid.emplace_back(lambda, w);
    if (out.grid.size() == 1 || w < best_wer || (w == best_wer && lambda < out.best_lambda)) {
      best_wer = w;
      out.best_lambda = lambda;
    }
  }
  return out;
}

std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

}  // namespace rnntlab
