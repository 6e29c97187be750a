#include "rnntlab/alignment.h"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "rnntlab/numerics.h"

namespace rnntlab {

std::vector<FrameSegment> even_split(const WordTiming& w, std::size_t pieces) {
  if (pieces == 0) throw Error("even_split: need at least one piece");
  if (w.end <= w.start) throw Error("even_split: empty word span for '" + w.word + "'");
  const std::size_t len = w.end - w.start;
  if (len < pieces) throw Error("even_split: more pieces than frames for '" + w.word + "'");
  std::vector<FrameSegment> out;
  out.reserve(pieces);
  std::size_t prev = w.start;
  for (std::size_t k = 1; k <= pieces; ++k) {
    // Integer floor of S + k(E-S)/K, exact for all inputs.
    const std::size_t next = k == pieces ? w.end : w.start + (k * len) / pieces;
    out.push_back({prev, next});
    prev = next;
  }
  return out;
}

std::size_t silence_class(const Vocabulary& vocab) { return vocab.size(); }

FrameLabels frame_labels(std::span<const WordTiming> words, const Vocabulary& vocab,
                         std::size_t frames) {
  FrameLabels fl;
  fl.silence_id = silence_class(vocab);
  fl.labels.assign(frames, fl.silence_id);

  std::vector<const WordTiming*> sorted;
  for (const auto& w : words) {
    if (w.end > frames) {
      throw Error("frame_labels: word '" + w.word + "' ends past frame " + std::to_string(frames));
    }
    sorted.push_back(&w);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const WordTiming* a, const WordTiming* b) { return a->start < b->start; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->start < sorted[i - 1]->end) {
      throw Error("frame_labels: overlapping words '" + sorted[i - 1]->word + "' [" +
                  std::to_string(sorted[i - 1]->start) + "," + std::to_string(sorted[i - 1]->end) +
                  ") and '" + sorted[i]->word + "' [" + std::to_string(sorted[i]->start) + "," +
                  std::to_string(sorted[i]->end) + ")");
    }
  }

  for (const auto* w : sorted) {
    const TokenSeq pieces = encode(w->word, vocab);
    if (pieces.empty()) continue;
    const auto segments = even_split(*w, pieces.size());
    for (std::size_t k = 0; k < segments.size(); ++k) {
      for (std::size_t t = segments[k].begin; t < segments[k].end; ++t) fl.labels[t] = pieces[k];
    }
  }
  return fl;
}

FrameLabels downsample_labels(const FrameLabels& labels, std::size_t stack_factor) {
  if (stack_factor == 0) throw Error("downsample_labels: stack factor must be positive");
  FrameLabels out;
  out.silence_id = labels.silence_id;
  const std::size_t n = labels.frames();
  const std::size_t stacked = (n + stack_factor - 1) / stack_factor;
  out.labels.reserve(stacked);
  for (std::size_t t = 0; t < stacked; ++t) {
    const std::size_t centre = std::min(t * stack_factor + stack_factor / 2, n - 1);
    out.labels.push_back(labels.labels[centre]);
  }
  return out;
}

std::string format_timings(std::span<const WordTiming> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i].word + ":" + std::to_string(words[i].start) + ":" +
           std::to_string(words[i].end);
  }
  return out;
}

std::vector<WordTiming> parse_timings(std::string_view text) {
  std::vector<WordTiming> out;
  std::istringstream in{std::string(text)};
  std::string item;
  while (in >> item) {
    const auto c2 = item.rfind(':');
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : item.rfind(':', c2 - 1);
    if (c1 == std::string::npos) throw Error("timing entry '" + item + "' is not word:S:E");
    WordTiming w;
    w.word = item.substr(0, c1);
    auto parse = [&](std::size_t b, std::size_t e, std::size_t& dst) {
      const auto r = std::from_chars(item.data() + b, item.data() + e, dst);
      if (r.ec != std::errc() || r.ptr != item.data() + e) {
        throw Error("timing entry '" + item + "' has a bad frame index");
      }
    };
    parse(c1 + 1, c2, w.start);
    parse(c2 + 1, item.size(), w.end);
    if (w.word.empty() || w.end <= w.start) throw Error("timing entry '" + item + "' is invalid");
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace rnntlab
