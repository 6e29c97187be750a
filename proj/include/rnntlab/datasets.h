#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rnntlab/alignment.h"
#include "rnntlab/network.h"

namespace rnntlab {

struct Utterance {
  std::string id;
  FrameMatrix features;  // 10 ms frames
  std::string transcript;
  std::vector<WordTiming> timings;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

using Corpus = std::vector<Utterance>;

/// Seeded synthetic speech. Words are spelled from a small unit alphabet; a
/// word sounds like its units' prototype vectors held for a few frames each.
struct SynthSpec {
  std::size_t units = 12;
  std::size_t words = 50;
  std::size_t min_word_units = 2;
  std::size_t max_word_units = 4;
  std::size_t feature_dim = 8;
  std::size_t min_unit_frames = 3;
  std::size_t max_unit_frames = 5;
  std::size_t min_sentence_words = 2;
  std::size_t max_sentence_words = 4;
  std::size_t min_gap_frames = 1;
  std::size_t max_gap_frames = 3;
  std::size_t edge_frames = 3;
  // Next-word candidates per word in the bigram table.
  std::size_t successors = 4;
  double prototype_scale = 1.0;
  double noise = 0.3;
  double speaker_variance = 0.3;
  // 0 draws a fresh speaker per utterance; otherwise a fixed pool.
  std::size_t speakers = 0;
  std::uint64_t acoustic_seed = 1;
  std::uint64_t text_seed = 1;
  std::string domain = "base";

  void check() const;
};

/// Word list, spellings and acoustic prototypes. Depends on the acoustic
/// seed and shape knobs only.
struct Lexicon {
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> spelling;
  Tensor prototypes;  // units x D; silence is the zero vector
};

Lexicon make_lexicon(const SynthSpec& spec);

/// Sentence sampler: first-word distribution plus a sparse bigram table.
struct SentenceModel {
  std::vector<std::vector<std::size_t>> next;       // row 0 = sentence start
  std::vector<std::vector<double>> next_weight;
};

SentenceModel make_sentence_model(const SynthSpec& spec, std::size_t vocabulary_words);

Corpus synth_corpus(const SynthSpec& spec, std::size_t n_utts, std::uint64_t seed);

std::vector<std::string> transcripts(const Corpus& corpus);

// ---------------------------------------------------------------------------
// Files. A corpus directory holds index.tsv, transcripts.txt, timings.txt and
// feats/<utt_id>.rntf.

void write_features(const std::filesystem::path& path, const FrameMatrix& feat);
FrameMatrix read_features(const std::filesystem::path& path);

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

/// Rounds every feature through 32-bit storage.
FrameMatrix round_to_f32(const FrameMatrix& feat);

}  // namespace rnntlab
