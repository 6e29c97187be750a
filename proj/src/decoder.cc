#include "rnntlab/decoder.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

namespace rnntlab {

JointScorer::JointScorer(const ModelParams& params, const FrameMatrix& stacked)
    : params_(&params), frames_(stacked.frames) {
  const auto enc = encode_features(params.encoder, stacked);
  enc_terms_ = joint_encoder_terms(params.joint, enc, frames_);
}

std::vector<double> JointScorer::log_probs(std::size_t t, std::span<const double> pred_term) const {
  const std::size_t h = params_->arch.joint_width();
  return joint_log_probs(params_->joint, std::span<const double>(enc_terms_).subspan(t * h, h), pred_term);
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

namespace {

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

/// Prediction-network outputs per label prefix, computed on demand.
class PrefixCache {
 public:
  explicit PrefixCache(const ModelParams& params) : params_(&params) {}

  const std::vector<double>& pred_term(const TokenSeq& prefix) {
    auto it = nodes_.find(prefix);
    if (it != nodes_.end()) return it->second.term;
    Node node;
    if (prefix.empty()) {
      node.state = prediction_start(params_->prediction);
    } else {
      TokenSeq parent(prefix.begin(), prefix.end() - 1);
      pred_term(parent);
      node.state = prediction_advance(params_->prediction, nodes_.at(parent).state, prefix.back());
    }
    node.term = joint_prediction_term(params_->joint, node.state.output);
    return nodes_.emplace(prefix, std::move(node)).first->second.term;
  }

 private:
  struct Node {
    PredictionState state;
    std::vector<double> term;
  };
  const ModelParams* params_;
  std::map<TokenSeq, Node> nodes_;
};

/// Log-probability rows for every lattice node of `labels`, (t * (U+1) + u).
std::vector<std::vector<double>> node_log_probs(const JointScorer& scorer, PrefixCache& cache,
                                                const TokenSeq& labels) {
  const std::size_t T = scorer.frames(), U = labels.size();
  std::vector<std::vector<double>> rows(T * (U + 1));
  TokenSeq prefix;
  for (std::size_t u = 0; u <= U; ++u) {
    const auto& pt = cache.pred_term(prefix);
    for (std::size_t t = 0; t < T; ++t) rows[t * (U + 1) + u] = scorer.log_probs(t, pt);
    if (u < U) prefix.push_back(labels[u]);
  }
  return rows;
}

void check_labels(const JointScorer& scorer, const TokenSeq& labels) {
  for (TokenId y : labels)
    if (y == kBlankId || y >= scorer.classes()) throw Error("decoder: label id " + std::to_string(y) + " out of range");
}

double marginal(const JointScorer& scorer, PrefixCache& cache, const TokenSeq& labels) {
  check_labels(scorer, labels);
  const std::size_t T = scorer.frames(), U = labels.size();
  if (T == 0) return U == 0 ? 0.0 : kNegInf;
  const auto lp = node_log_probs(scorer, cache, labels);
  std::vector<double> alpha(T * (U + 1), kNegInf);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const std::size_t i = t * (U + 1) + u;
      if (t == 0 && u == 0) {
        alpha[i] = 0.0;
        continue;
      }
      double from_blank = kNegInf, from_label = kNegInf;
      if (t > 0) from_blank = alpha[i - (U + 1)] + lp[i - (U + 1)][kBlankId];
      if (u > 0) from_label = alpha[i - 1] + lp[i - 1][labels[u - 1]];
      alpha[i] = logsumexp(from_blank, from_label);
    }
  const std::size_t last = (T - 1) * (U + 1) + U;
  return alpha[last] + lp[last][kBlankId];
}

std::vector<std::size_t> viterbi_frames(const JointScorer& scorer, PrefixCache& cache, const TokenSeq& labels) {
  check_labels(scorer, labels);
  const std::size_t T = scorer.frames(), U = labels.size();
  if (U == 0) return {};
  if (T == 0) throw Error("best_alignment: no frames for a non-empty label sequence");
  const auto lp = node_log_probs(scorer, cache, labels);
  std::vector<double> delta(T * (U + 1), kNegInf);
  std::vector<char> via_label(T * (U + 1), 0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const std::size_t i = t * (U + 1) + u;
      if (t == 0 && u == 0) {
        delta[i] = 0.0;
        continue;
      }
      double from_blank = kNegInf, from_label = kNegInf;
      if (t > 0) from_blank = delta[i - (U + 1)] + lp[i - (U + 1)][kBlankId];
      if (u > 0) from_label = delta[i - 1] + lp[i - 1][labels[u - 1]];
      via_label[i] = from_label >= from_blank;
      delta[i] = std::max(from_blank, from_label);
    }
  std::vector<std::size_t> frames(U);
  std::size_t t = T - 1, u = U;
  while (u > 0) {
    if (via_label[t * (U + 1) + u]) {
      frames[--u] = t;
    } else {
      --t;
    }
  }
  return frames;
}

}  // namespace

Hypothesis greedy_decode(const ModelParams& params, const FrameMatrix& stacked) {
  const JointScorer scorer(params, stacked);
  const std::size_t cap = max_labels(scorer.frames());
  Hypothesis hyp;
  PredictionState state = prediction_start(params.prediction);
  std::vector<double> pt = joint_prediction_term(params.joint, state.output);
  std::size_t t = 0;
  while (t < scorer.frames()) {
    const auto lp = scorer.log_probs(t, pt);
    const std::size_t k = argmax(lp);
    if (k == kBlankId || hyp.tokens.size() >= cap) {
      hyp.score += lp[kBlankId];
      ++t;
      continue;
    }
    hyp.score += lp[k];
    hyp.tokens.push_back(k);
    hyp.emit_frames.push_back(t);
    state = prediction_advance(params.prediction, state, k);
    pt = joint_prediction_term(params.joint, state.output);
  }
  return hyp;
}

double sequence_log_prob(const ModelParams& params, const FrameMatrix& stacked, const TokenSeq& labels) {
  const JointScorer scorer(params, stacked);
  PrefixCache cache(params);
  return marginal(scorer, cache, labels);
}

std::vector<std::size_t> best_alignment(const ModelParams& params, const FrameMatrix& stacked,
                                        const TokenSeq& labels) {
  const JointScorer scorer(params, stacked);
  PrefixCache cache(params);
  return viterbi_frames(scorer, cache, labels);
}

namespace {

using Scored = std::pair<TokenSeq, double>;

bool scored_before(const Scored& a, const Scored& b) {
  if (a.second != b.second) return a.second > b.second;
  return a.first < b.first;
}

void keep_best(std::vector<Scored>& v, std::size_t beam) {
  std::sort(v.begin(), v.end(), scored_before);
  if (v.size() > beam) v.resize(beam);
}

}  // namespace

NBest beam_decode(const ModelParams& params, const FrameMatrix& stacked, std::size_t beam, std::size_t max_len) {
  if (beam == 0) throw Error("beam_decode: beam must be >= 1");
  const JointScorer scorer(params, stacked);
  const std::size_t T = scorer.frames();
  const std::size_t cap = max_len == 0 ? max_labels(T) : max_len;
  const std::size_t classes = scorer.classes();
  PrefixCache cache(params);

  // Prefix -> log-probability of having emitted it and moved into frame t.
  std::vector<Scored> entering{{TokenSeq{}, 0.0}};
  for (std::size_t t = 0; t < T; ++t) {
    std::map<std::size_t, std::map<TokenSeq, double>> levels;
    for (const auto& [y, a] : entering) levels[y.size()][y] = a;
    std::vector<Scored> leaving;
    while (!levels.empty()) {
      auto node = levels.extract(levels.begin());
      const std::size_t len = node.key();
      std::vector<Scored> level(node.mapped().begin(), node.mapped().end());
      keep_best(level, beam);
      for (const auto& [y, alpha] : level) {
        const auto lp = scorer.log_probs(t, cache.pred_term(y));
        leaving.emplace_back(y, alpha + lp[kBlankId]);
        if (len >= cap) continue;
        auto& next = levels[len + 1];
        for (TokenId k = 1; k < classes; ++k) {
          TokenSeq child = y;
          child.push_back(k);
          const double s = alpha + lp[k];
          auto [it, fresh] = next.emplace(std::move(child), s);
          if (!fresh) it->second = logsumexp(it->second, s);
        }
      }
    }
    keep_best(leaving, beam);
    entering = std::move(leaving);
  }

  NBest out;
  for (const auto& [y, approx] : entering) {
    Hypothesis h;
    h.tokens = y;
    h.score = marginal(scorer, cache, y);
    out.push_back(std::move(h));
  }
  std::sort(out.begin(), out.end(), ranks_before);
  for (auto& h : out) h.emit_frames = viterbi_frames(scorer, cache, h.tokens);
  return out;
}

Hypothesis exhaustive_decode(const ModelParams& params, const FrameMatrix& stacked, std::size_t max_len) {
  if (stacked.frames + max_len > kExhaustiveMaxSteps) {
    throw Error("exhaustive_decode: T + U_max = " + std::to_string(stacked.frames + max_len) + " exceeds " +
                std::to_string(kExhaustiveMaxSteps));
  }
  const JointScorer scorer(params, stacked);
  PrefixCache cache(params);
  const std::size_t labels = scorer.classes() - 1;
  Hypothesis best;
  best.score = kNegInf;
  bool have = false;
  for (std::size_t len = 0; len <= max_len; ++len) {
    TokenSeq y(len, 1);
    while (true) {
      Hypothesis h;
      h.tokens = y;
      h.score = marginal(scorer, cache, y);
      if (!have || ranks_before(h, best)) {
        best = std::move(h);
        have = true;
      }
      std::size_t k = len;
      while (k > 0 && y[k - 1] == labels) y[--k] = 1;
      if (k == 0) break;
      ++y[k - 1];
    }
  }
  best.emit_frames = viterbi_frames(scorer, cache, best.tokens);
  return best;
}

void write_nbest_header(std::ostream& out) { out << "utt_id,rank,score,emit_frames,text\n"; }

void write_nbest_rows(std::ostream& out, const std::string& utt_id, const NBest& nbest, const Vocabulary& vocab) {
  char buf[64];
  for (std::size_t r = 0; r < nbest.size(); ++r) {
    const auto& h = nbest[r];
    std::snprintf(buf, sizeof buf, "%.6f", h.score);
    std::string frames;
    for (std::size_t i = 0; i < h.emit_frames.size(); ++i) {
      if (i) frames += ';';
      frames += std::to_string(h.emit_frames[i]);
    }
    out << utt_id << ',' << (r + 1) << ',' << buf << ',' << frames << ',' << decode(h.tokens, vocab) << '\n';
  }
}

}  // namespace rnntlab
