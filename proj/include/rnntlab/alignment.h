#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rnntlab/tokenizer.h"

namespace rnntlab {

/// Word with frame span [start, end) at the 10 ms feature rate.
struct WordTiming {
  std::string word;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator==(const WordTiming&, const WordTiming&) = default;
};

struct FrameSegment {
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const FrameSegment&, const FrameSegment&) = default;
};

/// Per-frame CE targets. Ids below vocab.size() are word pieces; the id
/// vocab.size() is the silence class used only for encoder pretraining.
struct FrameLabels {
  std::vector<std::size_t> labels;
  std::size_t silence_id = 0;

  std::size_t frames() const { return labels.size(); }
};

/// Splits [w.start, w.end) into `pieces` contiguous segments with boundaries
/// floor(S + k(E-S)/K); the last boundary is E.
std::vector<FrameSegment> even_split(const WordTiming& w, std::size_t pieces);

std::size_t silence_class(const Vocabulary& vocab);

FrameLabels frame_labels(std::span<const WordTiming> words, const Vocabulary& vocab,
                         std::size_t frames);

/// Resamples labels to the stacked encoder rate by reading the centre input
/// frame of every window.
FrameLabels downsample_labels(const FrameLabels& labels, std::size_t stack_factor);

/// "word:S:E word:S:E ..." (no utterance id).
std::string format_timings(std::span<const WordTiming> words);
std::vector<WordTiming> parse_timings(std::string_view text);

}  // namespace rnntlab
