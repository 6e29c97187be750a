#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "rnntlab/network.h"
#include "rnntlab/tokenizer.h"

namespace rnntlab {

struct Hypothesis {
  TokenSeq tokens;
  double score = 0.0;                    // log-probability
  std::vector<std::size_t> emit_frames;  // encoder frame per token

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

/// Descending score, then ascending token sequence.
using NBest = std::vector<Hypothesis>;

inline constexpr std::size_t kDefaultBeam = 5;

/// Most labels a decoder will emit for T encoder frames.
inline std::size_t max_labels(std::size_t frames) { return 2 * frames; }

/// Precomputed decoding inputs for one utterance: encoder side of the joint
/// network for every frame.
class JointScorer {
 public:
  JointScorer(const ModelParams& params, const FrameMatrix& stacked);

  std::size_t frames() const { return frames_; }
  std::size_t classes() const { return params_->arch.vocab_size; }
  const ModelParams& params() const { return *params_; }
  /// Log-probabilities at frame t given the prediction output.
  std::vector<double> log_probs(std::size_t t, std::span<const double> pred_term) const;

 private:
  const ModelParams* params_;
  std::size_t frames_;
  std::vector<double> enc_terms_;
};

/// Argmax walk over the lattice. Score is the log-probability of the path.
Hypothesis greedy_decode(const ModelParams& params, const FrameMatrix& stacked);

/// Frame-synchronous prefix search. Prefix scores merge every alignment of
/// the same labels, pruned to `beam` per prefix length within a frame and to
/// `beam` overall between frames. Survivors are rescored with their exact
/// marginal; emit_frames follow the most probable alignment. `max_len` 0
/// means max_labels(T).
NBest beam_decode(const ModelParams& params, const FrameMatrix& stacked,
                  std::size_t beam = kDefaultBeam, std::size_t max_len = 0);

/// Exact log P(labels | features), summed over all alignments.
double sequence_log_prob(const ModelParams& params, const FrameMatrix& stacked, const TokenSeq& labels);

/// Frame of every label on the most probable alignment.
std::vector<std::size_t> best_alignment(const ModelParams& params, const FrameMatrix& stacked,
                                        const TokenSeq& labels);

inline constexpr std::size_t kExhaustiveMaxSteps = 12;

/// Scores every label sequence with at most `max_len` labels by its exact
/// marginal and returns the best one. Requires T + max_len <= 12.
Hypothesis exhaustive_decode(const ModelParams& params, const FrameMatrix& stacked, std::size_t max_len);

/// Orders by descending score, ties by ascending tokens.
bool ranks_before(const Hypothesis& a, const Hypothesis& b);

void write_nbest_header(std::ostream& out);
void write_nbest_rows(std::ostream& out, const std::string& utt_id, const NBest& nbest,
                      const Vocabulary& vocab);

}  // namespace rnntlab
