#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "rnntlab/alignment.h"
#include "rnntlab/decoder.h"

namespace rnntlab {

struct WerBreakdown {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_words = 0;
  double wer = 0.0;  // percent

  std::size_t errors() const { return substitutions + deletions + insertions; }
};

/// Minimal word edit script between one reference and one hypothesis.
WerBreakdown word_errors(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

/// Aggregated word error rate over a set of utterances.
WerBreakdown wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

struct DelayStats {
  std::vector<long> gaps;  // input frames, hypothesis minus reference
  double mean_gap = 0.0;
  std::map<long, std::size_t> histogram;
  std::size_t measured_utterances = 0;
  std::size_t skipped_utterances = 0;

  void add(const DelayStats& other);
};

/// Gap per word between the emission of its first piece (scaled to input
/// frames) and its reference start. Utterances whose hypothesis has a
/// different word count are skipped and counted.
DelayStats emission_delay(const std::vector<WordTiming>& ref_words, const Hypothesis& hyp,
                          const Vocabulary& vocab, std::size_t stack_factor);

/// Bucketed counts; bucket b holds gaps in [b * width, (b + 1) * width).
std::map<long, std::size_t> delay_histogram(const std::vector<long>& gaps, long width = 1);

double latency_ms(double mean_gap, double lookahead_frames, double frame_ms);

struct ReportRow {
  std::string model;
  std::string test_set;
  WerBreakdown wer;
  double mean_gap_frames = 0.0;
  double latency_ms = 0.0;
};

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);
void write_histogram_csv(std::ostream& out, const std::map<long, std::size_t>& histogram);

}  // namespace rnntlab
