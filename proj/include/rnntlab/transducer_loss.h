#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rnntlab/alignment.h"
#include "rnntlab/network.h"
#include "rnntlab/tokenizer.h"

namespace rnntlab {

struct LossResult {
  double loss = 0.0;          // negative log-likelihood, nats
  std::vector<double> grad;   // d loss / d logits, same layout as the input
};

/// Log-space forward/backward tables over the (T, U+1) lattice.
struct TransducerDp {
  std::size_t frames = 0;
  std::size_t labels = 0;
  std::vector<double> alpha;  // (t * (U+1) + u)
  std::vector<double> beta;
  double forward_loglik = 0.0;
  double backward_loglik = 0.0;
  // Posterior probability that a path visits node (t, u).
  std::vector<double> occupancy;
};

TransducerDp rnnt_alpha_beta(const LogitLattice& lat, const TokenSeq& labels);

LossResult rnnt_loss_grad(const LogitLattice& lat, const TokenSeq& labels);

struct BruteForceResult {
  double loss = 0.0;
  std::uint64_t paths = 0;
};

inline constexpr std::size_t kBruteForceMaxSteps = 16;

/// Enumerates every lattice path that emits `labels` and ends with the final
/// blank at frame T-1. Requires T + U <= 16.
BruteForceResult rnnt_loss_bruteforce(const LogitLattice& lat, const TokenSeq& labels);

/// Read-only T x C logits.
struct LogitSeqView {
  std::span<const double> values;
  std::size_t frames = 0;
  std::size_t classes = 0;
};

/// Frames CTC needs for `labels`: one per label plus one per repeated pair.
std::size_t ctc_min_frames(const TokenSeq& labels);

/// CTC over the blank-expanded label sequence; blank is class 0.
LossResult ctc_loss_grad(LogitSeqView logits, const TokenSeq& labels);

/// Mean per-frame cross entropy against `targets`.
LossResult ce_frame_loss(LogitSeqView logits, const FrameLabels& targets);

/// Bytes for one materialized T x (U+1) x (V+1) lattice tensor.
std::uint64_t lattice_memory_bytes(std::uint64_t frames, std::uint64_t labels,
                                   std::uint64_t vocab, std::uint64_t bytes_per);

}  // namespace rnntlab
