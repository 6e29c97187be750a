#include <set>

#include "doctest.h"
#include "rnntlab/rng.h"
#include "rnntlab/tokenizer.h"

using namespace rnntlab;

namespace {

Vocabulary cortana_vocab() {
  return Vocabulary({"<blank>", "<unk>", "_hey", "_cor", "tana", "_i", "_love", "_garden", "ing",
                     "_h", "e", "y"});
}

std::vector<std::string> random_corpus(Rng& rng, std::size_t n) {
  const std::string letters = "abcdeghiklmnorstu";
  std::vector<std::string> words;
  for (int i = 0; i < 40; ++i) {
    std::string w;
    const auto len = rng.uniform_int(1, 7);
    for (int k = 0; k < len; ++k) w += letters[static_cast<std::size_t>(rng.uniform_int(0, letters.size() - 1))];
    words.push_back(w);
  }
  std::vector<std::string> corpus;
  for (std::size_t i = 0; i < n; ++i) {
    std::string line;
    const auto len = rng.uniform_int(1, 8);
    for (int k = 0; k < len; ++k) {
      if (k) line += ' ';
      line += words[static_cast<std::size_t>(rng.uniform_int(0, words.size() - 1))];
    }
    corpus.push_back(line);
  }
  return corpus;
}

}  // namespace

TEST_CASE("the word-marker example sentence splits into 7 pieces") {
  const auto vocab = cortana_vocab();
  const auto seq = encode("hey cortana i love gardening", vocab);
  std::vector<std::string> pieces;
  for (auto id : seq) pieces.push_back(vocab.piece(id));
  CHECK(pieces == std::vector<std::string>{"_hey", "_cor", "tana", "_i", "_love", "_garden", "ing"});
  const auto counts = scheme_token_counts("hey cortana i love gardening", vocab);
  CHECK(counts.marker_count == 7);
  CHECK(counts.delimiter_count == 13);
}

TEST_CASE("encode/decode edge cases") {
  const auto vocab = cortana_vocab();
  CHECK(encode("", vocab).empty());
  CHECK(decode(TokenSeq{}, vocab).empty());
  const TokenSeq s{vocab.id("_hey"), vocab.id("_cor"), vocab.id("tana")};
  CHECK(decode(s, vocab) == "hey cortana");
  CHECK(scheme_token_counts("", vocab).marker_count == 0);
  CHECK(scheme_token_counts("", vocab).delimiter_count == 1);
  CHECK_THROWS_AS(decode(TokenSeq{99}, vocab), Error);
  CHECK_THROWS_AS(decode(TokenSeq{kBlankId}, vocab), Error);
  // Normalization: case and repeated whitespace.
  CHECK(encode("  HEY   Cortana ", vocab) == encode("hey cortana", vocab));
  // Unsegmentable spans collapse to a single <unk>.
  CHECK(encode("hey zzz", vocab) == TokenSeq{vocab.id("_hey"), kUnkId});
}

TEST_CASE("build_vocab on a single-character corpus") {
  const std::vector<std::string> corpus{"a a a"};
  const auto vocab = build_vocab(corpus, 3);
  CHECK(vocab.pieces() == std::vector<std::string>{"<blank>", "<unk>", "_a"});
  CHECK(vocab_coverage_floor(corpus) == 3);
  CHECK_THROWS_WITH_AS(build_vocab(corpus, 2), doctest::Contains("floor 3"), Error);
  CHECK_THROWS_AS(build_vocab(std::vector<std::string>{}, 10), Error);
}

TEST_CASE("build_vocab covers every character in both positions once the budget allows") {
  const std::vector<std::string> corpus{"ab ba", "abc"};
  const auto vocab = build_vocab(corpus, 40);
  for (const char* p : {"_a", "a", "_b", "b", "_c", "c"}) CHECK(vocab.contains(p));
  CHECK(vocab.size() <= 40);
}

TEST_CASE("gardening corpus: merges learn sub-words and roundtrip holds") {
  std::vector<std::string> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back("i love gardening and gardens");
  const auto vocab = build_vocab(corpus, 40);
  CHECK(vocab.size() <= 40);
  for (const auto& t : corpus) CHECK(decode(encode(t, vocab), vocab) == t);
  CHECK(encode("gardening", vocab).size() < std::string("gardening").size());
}

TEST_CASE("build_vocab is deterministic") {
  Rng rng(3);
  const auto corpus = random_corpus(rng, 200);
  CHECK(build_vocab(corpus, 60).serialize() == build_vocab(corpus, 60).serialize());
}

TEST_CASE("vocab file roundtrip") {
  const auto vocab = cortana_vocab();
  CHECK(Vocabulary::parse(vocab.serialize()) == vocab);
  CHECK_THROWS_AS(Vocabulary::parse("a\nb\n"), Error);
  CHECK_THROWS_AS(Vocabulary::parse("<blank>\n<unk>\nx\nx\n"), Error);
}

TEST_CASE("roundtrip and count properties over random corpora") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const auto corpus = random_corpus(rng, 200);
    for (std::size_t target : {std::size_t{36}, std::size_t{60}, std::size_t{120}}) {
      const auto vocab = build_vocab(corpus, target);
      for (const auto& line : corpus) {
        const std::string t = normalize_text(line);
        const auto seq = encode(t, vocab);
        CHECK(decode(seq, vocab) == t);
        const auto words = split_words(t).size();
        const auto c = scheme_token_counts(t, vocab);
        CHECK(c.delimiter_count == c.marker_count + words + 1);
        CHECK(c.marker_count >= words);
        std::size_t chars = 0;
        for (char ch : t) chars += ch != ' ';
        CHECK(c.marker_count <= chars);
      }
    }
  }
}

TEST_CASE("random token sequences keep their word count through decode/encode") {
  Rng rng(21);
  const auto corpus = random_corpus(rng, 100);
  const auto vocab = build_vocab(corpus, 80);
  for (int trial = 0; trial < 300; ++trial) {
    TokenSeq s;
    const auto len = rng.uniform_int(0, 10);
    for (int i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.uniform_int(1, vocab.size() - 1)));
    const std::string text = decode(s, vocab);
    const auto again = decode(encode(text, vocab), vocab);
    CHECK(split_words(again).size() == split_words(text).size());
  }
}
