#include "rnntlab/tokenizer.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "rnntlab/numerics.h"

namespace rnntlab {

namespace {

// Byte length of the UTF-8 sequence starting with `lead`.
std::size_t utf8_len(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t n = std::min(utf8_len(static_cast<unsigned char>(word[i])), word.size() - i);
    out.emplace_back(word.substr(i, n));
    i += n;
  }
  return out;
}

std::string marked(std::string_view s) {
  std::string out(1, kWordMarker);
  out += s;
  return out;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> pieces) {
  if (pieces.empty()) pieces = {std::string(kBlankPiece), std::string(kUnkPiece)};
  if (pieces.size() < 2 || pieces[0] != kBlankPiece || pieces[1] != kUnkPiece) {
    throw Error("vocabulary must start with <blank>, <unk>");
  }
  pieces_ = std::move(pieces);
  for (TokenId i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw Error("vocabulary: empty piece at id " + std::to_string(i));
    if (!index_.emplace(pieces_[i], i).second) {
      throw Error("vocabulary: duplicate piece '" + pieces_[i] + "'");
    }
  }
}

const std::string& Vocabulary::piece(TokenId id) const {
  if (id >= pieces_.size()) throw Error("token id " + std::to_string(id) + " out of range");
  return pieces_[id];
}

bool Vocabulary::contains(std::string_view piece) const {
  return index_.find(std::string(piece)) != index_.end();
}

TokenId Vocabulary::id(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) throw Error("piece '" + std::string(piece) + "' not in vocabulary");
  return it->second;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& p : pieces_) {
    out += p;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> pieces;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pieces.push_back(line);
  }
  if (pieces.size() < 2) throw Error("vocab file: missing <blank>/<unk> header lines");
  return Vocabulary(std::move(pieces));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << serialize();
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

namespace {

struct CoverageSets {
  std::set<std::string> observed;     // positional single-char pieces seen
  std::set<std::string> counterpart;  // the other form of each seen char
};

CoverageSets coverage(const std::map<std::string, std::size_t>& word_counts) {
  CoverageSets c;
  std::set<std::string> chars;
  for (const auto& [word, count] : word_counts) {
    const auto cs = utf8_chars(word);
    for (std::size_t i = 0; i < cs.size(); ++i) {
      chars.insert(cs[i]);
      c.observed.insert(i == 0 ? marked(cs[i]) : cs[i]);
    }
  }
  for (const auto& ch : chars) {
    for (auto form : {marked(ch), ch}) {
      if (!c.observed.count(form)) c.counterpart.insert(form);
    }
  }
  return c;
}

std::map<std::string, std::size_t> count_words(std::span<const std::string> corpus) {
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize_text(line))) ++counts[w];
  }
  return counts;
}

}  // namespace

std::size_t vocab_coverage_floor(std::span<const std::string> corpus) {
  return 2 + coverage(count_words(corpus)).observed.size();
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  if (corpus.empty()) throw Error("build_vocab: empty corpus");
  const auto word_counts = count_words(corpus);
  const auto cov = coverage(word_counts);
  const std::size_t floor = 2 + cov.observed.size();
  if (target_size < floor) {
    throw Error("build_vocab: target size " + std::to_string(target_size) +
                " below coverage floor " + std::to_string(floor));
  }

  std::vector<std::string> pieces{std::string(kBlankPiece), std::string(kUnkPiece)};
  std::set<std::string> have;
  for (const auto& p : cov.observed) {
    pieces.push_back(p);
    have.insert(p);
  }
  for (const auto& p : cov.counterpart) {
    if (pieces.size() >= target_size) break;
    pieces.push_back(p);
    have.insert(p);
  }

  // Words as symbol sequences, weighted by frequency.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [word, count] : word_counts) {
    auto cs = utf8_chars(word);
    cs[0] = marked(cs[0]);
    words.emplace_back(std::move(cs), count);
  }

  while (pieces.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& [symbols, count] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        pair_counts[{symbols[i], symbols[i + 1]}] += count;
      }
    }
    if (pair_counts.empty()) break;
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    std::string best_merged;
    for (const auto& [pair, count] : pair_counts) {
      std::string merged = pair.first + pair.second;
      if (count > best_count || (count == best_count && merged < best_merged)) {
        best = &pair;
        best_count = count;
        best_merged = std::move(merged);
      }
    }
    const auto [left, right] = *best;
    for (auto& [symbols, count] : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          next.push_back(best_merged);
          ++i;
        } else {
          next.push_back(symbols[i]);
        }
      }
      symbols = std::move(next);
    }
    if (have.insert(best_merged).second) pieces.push_back(best_merged);
  }
  return Vocabulary(std::move(pieces));
}

TokenSeq encode(std::string_view text, const Vocabulary& vocab) {
  TokenSeq out;
  for (const auto& word : split_words(normalize_text(text))) {
    std::size_t pos = 0;
    bool pending_unk = false;
    while (pos < word.size()) {
      if (word.compare(pos, kUnkPiece.size(), kUnkPiece) == 0) {
        out.push_back(kUnkId);
        pending_unk = false;
        pos += kUnkPiece.size();
        continue;
      }
      std::size_t best_len = 0;
      TokenId best_id = 0;
      for (std::size_t end = word.size(); end > pos; --end) {
        const std::string_view span(word.data() + pos, end - pos);
        const std::string cand = pos == 0 ? marked(span) : std::string(span);
        if (vocab.contains(cand)) {
          best_len = end - pos;
          best_id = vocab.id(cand);
          break;
        }
      }
      if (best_len == 0) {
        if (!pending_unk) out.push_back(kUnkId);
        pending_unk = true;
        pos += utf8_len(static_cast<unsigned char>(word[pos]));
        continue;
      }
      pending_unk = false;
      out.push_back(best_id);
      pos += best_len;
    }
  }
  return out;
}

std::string decode(std::span<const TokenId> seq, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : seq) {
    if (id == kBlankId) throw Error("decode: blank id inside a label sequence");
    const std::string& p = vocab.piece(id);
    if (id == kUnkId) {
      out += ' ';
      out += p;
    } else if (!p.empty() && p[0] == kWordMarker) {
      out += ' ';
      out.append(p, 1, std::string::npos);
    } else {
      out += p;
    }
  }
  const auto first = out.find_first_not_of(' ');
  return first == std::string::npos ? std::string{} : out.substr(first);
}

SchemeCounts scheme_token_counts(std::string_view text, const Vocabulary& vocab) {
  SchemeCounts c;
  c.marker_count = encode(text, vocab).size();
  c.delimiter_count = c.marker_count + split_words(normalize_text(text)).size() + 1;
  return c;
}

}  // namespace rnntlab
