#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rnntlab/error.h"

namespace rnntlab {

using TokenId = std::size_t;

inline constexpr TokenId kBlankId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr std::string_view kBlankPiece = "<blank>";
inline constexpr std::string_view kUnkPiece = "<unk>";
inline constexpr char kWordMarker = '_';

/// Label sequence over a vocabulary; never contains the blank id.
using TokenSeq = std::vector<TokenId>;

/// Word-piece inventory. Id 0 is <blank>, id 1 is <unk>; word-initial pieces
/// carry a leading '_'.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> pieces);

  std::size_t size() const { return pieces_.size(); }
  /// Number of non-blank outputs (the lattice has labels() + 1 classes).
  std::size_t labels() const { return pieces_.size() - 1; }
  const std::string& piece(TokenId id) const;
  const std::vector<std::string>& pieces() const { return pieces_; }
  bool contains(std::string_view piece) const;
  TokenId id(std::string_view piece) const;  // throws when absent

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.pieces_ == b.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Lowercases ASCII and collapses runs of whitespace into single spaces.
std::string normalize_text(std::string_view text);
std::vector<std::string> split_words(std::string_view text);

/// Smallest target size build_vocab accepts for this corpus.
std::size_t vocab_coverage_floor(std::span<const std::string> corpus);

/// Byte-pair style merges over marker-prefixed words. Single-character pieces
/// observed in the corpus are always present; their missing marker/non-marker
/// counterparts are added next, then merges fill the rest. Ties in pair
/// frequency break on the lexicographically smaller merged string.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size);

/// Greedy longest-match segmentation, first piece of every word marked.
TokenSeq encode(std::string_view text, const Vocabulary& vocab);
std::string decode(std::span<const TokenId> seq, const Vocabulary& vocab);

struct SchemeCounts {
  std::size_t marker_count = 0;
  std::size_t delimiter_count = 0;
};

/// Token counts under the word-marker scheme and under a scheme that emits a
/// separate space token between and around words.
SchemeCounts scheme_token_counts(std::string_view text, const Vocabulary& vocab);

}  // namespace rnntlab
