#include "rnntlab/evaluation.h"

#include <cstdio>
#include <ostream>

namespace rnntlab {

WerBreakdown word_errors(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  struct Cell {
    std::size_t cost, sub, del, ins;
  };
  std::vector<Cell> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = {i, 0, i, 0};
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = {j, 0, 0, j};
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const bool same = ref[i - 1] == hyp[j - 1];
      Cell best = at(i - 1, j - 1);
      best.cost += same ? 0 : 1;
      best.sub += same ? 0 : 1;
      const Cell& up = at(i - 1, j);
      if (up.cost + 1 < best.cost) best = {up.cost + 1, up.sub, up.del + 1, up.ins};
      const Cell& left = at(i, j - 1);
      if (left.cost + 1 < best.cost) best = {left.cost + 1, left.sub, left.del, left.ins + 1};
      at(i, j) = best;
    }
  const Cell& c = at(n, m);
  WerBreakdown w{c.sub, c.del, c.ins, n, 0.0};
  w.wer = n == 0 ? (c.cost == 0 ? 0.0 : 100.0) : 100.0 * static_cast<double>(c.cost) / static_cast<double>(n);
  return w;
}

WerBreakdown wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) throw Error("wer: reference and hypothesis counts differ");
  WerBreakdown total;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto w = word_errors(split_words(normalize_text(refs[i])), split_words(normalize_text(hyps[i])));
    total.substitutions += w.substitutions;
    total.deletions += w.deletions;
    total.insertions += w.insertions;
    total.ref_words += w.ref_words;
  }
  if (total.ref_words == 0) throw Error("wer: empty reference set");
  total.wer = 100.0 * static_cast<double>(total.errors()) / static_cast<double>(total.ref_words);
  return total;
}

void DelayStats::add(const DelayStats& other) {
  gaps.insert(gaps.end(), other.gaps.begin(), other.gaps.end());
  for (const auto& [b, c] : other.histogram) histogram[b] += c;
  measured_utterances += other.measured_utterances;
  skipped_utterances += other.skipped_utterances;
  double sum = 0.0;
  for (long g : gaps) sum += static_cast<double>(g);
  mean_gap = gaps.empty() ? 0.0 : sum / static_cast<double>(gaps.size());
}

DelayStats emission_delay(const std::vector<WordTiming>& ref_words, const Hypothesis& hyp,
                          const Vocabulary& vocab, std::size_t stack_factor) {
  if (hyp.emit_frames.size() != hyp.tokens.size()) throw Error("emission_delay: emit_frames length mismatch");
  std::vector<std::size_t> word_frames;
  for (std::size_t i = 0; i < hyp.tokens.size(); ++i) {
    const TokenId id = hyp.tokens[i];
    const bool starts = id == kUnkId || vocab.piece(id).front() == kWordMarker;
    if (starts || word_frames.empty()) word_frames.push_back(hyp.emit_frames[i]);
  }
  DelayStats s;
  if (word_frames.size() != ref_words.size()) {
    s.skipped_utterances = 1;
    return s;
  }
  s.measured_utterances = 1;
  double sum = 0.0;
  for (std::size_t w = 0; w < word_frames.size(); ++w) {
    const long gap = static_cast<long>(word_frames[w] * stack_factor) - static_cast<long>(ref_words[w].start);
    s.gaps.push_back(gap);
    sum += static_cast<double>(gap);
  }
  s.mean_gap = s.gaps.empty() ? 0.0 : sum / static_cast<double>(s.gaps.size());
  s.histogram = delay_histogram(s.gaps);
  return s;
}

std::map<long, std::size_t> delay_histogram(const std::vector<long>& gaps, long width) {
  if (width <= 0) throw Error("delay_histogram: width must be positive");
  std::map<long, std::size_t> h;
  for (long g : gaps) {
    long b = g / width;
    if (g % width != 0 && g < 0) --b;
    ++h[b * width];
  }
  return h;
}

double latency_ms(double mean_gap, double lookahead_frames, double frame_ms) {
  if (!(frame_ms > 0.0)) throw Error("latency_ms: frame_ms must be positive");
  return (mean_gap + lookahead_frames) * frame_ms;
}

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "model,test_set,wer,sub,del,ins,mean_gap_frames,latency_ms\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%zu,%zu,%zu,%.4f,%.4f", r.wer.wer, r.wer.substitutions, r.wer.deletions,
                  r.wer.insertions, r.mean_gap_frames, r.latency_ms);
    out << r.model << ',' << r.test_set << ',' << buf << '\n';
  }
}

void write_histogram_csv(std::ostream& out, const std::map<long, std::size_t>& histogram) {
  out << "bucket_frames,count\n";
  for (const auto& [b, c] : histogram) out << b << ',' << c << '\n';
}

}  // namespace rnntlab
