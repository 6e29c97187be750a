#include "doctest.h"
#include "rnntlab/alignment.h"
#include "rnntlab/rng.h"

using namespace rnntlab;

TEST_CASE("even_split examples") {
  CHECK(even_split({"w", 100, 160}, 3) ==
        std::vector<FrameSegment>{{100, 120}, {120, 140}, {140, 160}});
  CHECK(even_split({"w", 5, 9}, 1) == std::vector<FrameSegment>{{5, 9}});
  CHECK(even_split({"w", 0, 10}, 3) == std::vector<FrameSegment>{{0, 3}, {3, 6}, {6, 10}});
  CHECK_THROWS_WITH_AS(even_split({"w", 0, 2}, 3), doctest::Contains("more pieces than frames"), Error);
  CHECK_THROWS_AS(even_split({"w", 0, 2}, 0), Error);
}

TEST_CASE("even_split partitions the span") {
  Rng rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto s = static_cast<std::size_t>(rng.uniform_int(0, 500));
    const auto len = static_cast<std::size_t>(rng.uniform_int(1, 80));
    const auto k = static_cast<std::size_t>(rng.uniform_int(1, len));
    const auto segs = even_split({"w", s, s + len}, k);
    REQUIRE(segs.size() == k);
    CHECK(segs.front().begin == s);
    CHECK(segs.back().end == s + len);
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(segs[i].end > segs[i].begin);
      if (i) CHECK(segs[i].begin == segs[i - 1].end);
      if (len % k == 0) CHECK(segs[i].end - segs[i].begin == len / k);
    }
  }
}

TEST_CASE("frame_labels examples") {
  const Vocabulary vocab({"<blank>", "<unk>", "_i", "_garden", "ing"});
  const auto sil = silence_class(vocab);
  const auto id_i = vocab.id("_i");
  const std::vector<WordTiming> one{{"i", 2, 5}};
  CHECK(frame_labels(one, vocab, 6).labels == std::vector<std::size_t>{sil, sil, id_i, id_i, id_i, sil});

  CHECK(frame_labels(std::vector<WordTiming>{}, vocab, 4).labels == std::vector<std::size_t>(4, sil));

  const std::vector<WordTiming> g{{"gardening", 0, 8}};
  const auto fl = frame_labels(g, vocab, 8);
  const auto a = vocab.id("_garden"), b = vocab.id("ing");
  CHECK(fl.labels == std::vector<std::size_t>{a, a, a, a, b, b, b, b});
}

TEST_CASE("frame_labels rejects overlaps and out-of-range words") {
  const Vocabulary vocab({"<blank>", "<unk>", "_i", "_a"});
  const std::vector<WordTiming> overlap{{"i", 0, 4}, {"a", 3, 6}};
  CHECK_THROWS_WITH_AS(frame_labels(overlap, vocab, 10), doctest::Contains("overlapping"), Error);
  const std::vector<WordTiming> late{{"i", 5, 12}};
  CHECK_THROWS_AS(frame_labels(late, vocab, 10), Error);
}

TEST_CASE("frame_labels is idempotent and downsampling reads window centres") {
  const Vocabulary vocab({"<blank>", "<unk>", "_i", "_a", "b"});
  const std::vector<WordTiming> words{{"i", 1, 4}, {"ab", 5, 9}};
  const auto once = frame_labels(words, vocab, 10);
  CHECK(frame_labels(words, vocab, 10).labels == once.labels);
  const auto down = downsample_labels(once, 3);
  REQUIRE(down.frames() == 4);
  CHECK(down.labels[0] == once.labels[1]);
  CHECK(down.labels[1] == once.labels[4]);
  CHECK(down.labels[3] == once.labels[9]);
}

TEST_CASE("timing line roundtrip") {
  const std::vector<WordTiming> words{{"hey", 3, 10}, {"cortana", 12, 40}};
  const auto text = format_timings(words);
  CHECK(text == "hey:3:10 cortana:12:40");
  CHECK(parse_timings(text) == words);
  CHECK_THROWS_AS(parse_timings("hey:3"), Error);
  CHECK_THROWS_AS(parse_timings("hey:9:3"), Error);
}
