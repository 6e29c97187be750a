#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rnntlab/decoder.h"
#include "rnntlab/network.h"
#include "rnntlab/trainer.h"

namespace rnntlab {

/// Word-piece LSTM language model. Inputs: row 0 of the embedding is the
/// sentence start, rows 1..V are pieces, row V+1 is the sentence end.
/// Outputs: index 0 is the sentence end, 1..V are pieces.
struct LmParams {
  std::size_t pieces = 0;  // V, non-blank vocabulary entries
  Tensor embedding;        // (V + 2) x H
  std::vector<LstmLayerParams> layers;
  Tensor w_out;            // (V + 1) x H
  Tensor b_out;            // 1 x (V + 1)

  static LmParams init(std::size_t vocab_size, std::size_t hidden, std::size_t layers, std::uint64_t seed);

  std::size_t hidden() const { return embedding.cols(); }
  std::size_t outputs() const { return pieces + 1; }
  std::vector<std::pair<std::string, Tensor*>> tensors();
  std::vector<std::pair<std::string, const Tensor*>> tensors() const;

  void save(const std::filesystem::path& path) const;
  static LmParams load(const std::filesystem::path& path);
};

inline constexpr std::size_t kLmEnd = 0;

/// (U + 1) x (V + 1) next-piece logits for the start symbol followed by seq.
Var lm_forward_graph(Graph& g, const LmParams& lm, const TokenSeq& seq, bool trainable);

/// log P(seq, end) under the model.
double lm_score(const LmParams& lm, const TokenSeq& seq);

struct LmState {
  std::vector<LstmState> layers;
  std::vector<double> output;
};

LmState lm_start(const LmParams& lm);
LmState lm_advance(const LmParams& lm, const LmState& state, TokenId token);
/// Log-probabilities over the V + 1 outputs after the consumed prefix.
std::vector<double> lm_next_log_probs(const LmParams& lm, const LmState& state);

class LmDivergenceError : public Error {
 public:
  LmDivergenceError(const std::string& what, LmParams last_good) : Error(what), last_good_(std::move(last_good)) {}
  const LmParams& last_good() const { return last_good_; }

 private:
  LmParams last_good_;
};

/// Next-piece cross entropy over the encoded transcripts. Uses lr, epochs,
/// batch, clip, seed, lm_hidden and lm_layers from `cfg`.
LmParams train_lm(const std::vector<std::string>& texts, const TrainConfig& cfg, const Vocabulary& vocab);

/// Mean per-token perplexity, the end token included.
double lm_perplexity(const LmParams& lm, const std::vector<TokenSeq>& seqs);

/// argmax_n score(n) + lambda * lm_score(n); ties go to the smaller tokens.
Hypothesis rescore(const NBest& nbest, const LmParams& lm, double lambda);

struct LambdaSearch {
  double best_lambda = 0.0;
  std::vector<std::pair<double, double>> grid;  // (lambda, WER)
};

/// Evaluates each lambda on dev N-best lists; ties go to the smaller lambda.
LambdaSearch select_lambda(const std::vector<NBest>& nbests, const std::vector<std::string>& refs,
                           const LmParams& lm, const Vocabulary& vocab, const std::vector<double>& grid);

/// 0, 0.1, ..., 1.0
std::vector<double> default_lambda_grid();

}  // namespace rnntlab
