#include <algorithm>
#include <functional>
#include <sstream>

#include "doctest.h"
#include "rnntlab/evaluation.h"
#include "rnntlab/rng.h"

using namespace rnntlab;

namespace {

using Words = std::vector<std::string>;

// Minimal edits by exhaustive search over edit scripts.
std::size_t brute_edits(const Words& a, const Words& b, std::size_t i = 0, std::size_t j = 0) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t match = brute_edits(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
  return std::min({match, brute_edits(a, b, i + 1, j) + 1, brute_edits(a, b, i, j + 1) + 1});
}

Words random_words(Rng& rng, std::size_t max_len) {
  static const Words pool{"a", "b", "c", "d"};
  Words w(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_len))));
  for (auto& x : w) x = pool[static_cast<std::size_t>(rng.uniform_int(0, 3))];
  return w;
}

std::string join(const Words& w) {
  std::string s;
  for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
  return s;
}

}  // namespace

TEST_CASE("wer examples") {
  CHECK(wer({"hey cortana", "a b c"}, {"hey cortana", "a b c"}).wer == 0.0);
  const auto one = wer({"hey cortana"}, {"hey cortina"});
  CHECK(one.substitutions == 1);
  CHECK(one.deletions == 0);
  CHECK(one.insertions == 0);
  CHECK(one.wer == 50.0);
  const auto del = wer({"a b"}, {""});
  CHECK(del.deletions == 2);
  CHECK(del.wer == 100.0);
  const auto ins = wer({"a"}, {"a b c"});
  CHECK(ins.insertions == 2);
  CHECK(ins.wer == 200.0);
}

TEST_CASE("wer errors") {
  CHECK_THROWS_AS(wer({"a"}, {}), Error);
  CHECK_THROWS_AS(wer({}, {}), Error);
  CHECK_THROWS_AS(wer({""}, {"a"}), Error);
}

TEST_CASE("edit counts match a brute-force search") {
  Rng rng(11);
  for (int trial = 0; trial < 400; ++trial) {
    const Words ref = random_words(rng, 6), hyp = random_words(rng, 6);
    const auto b = word_errors(ref, hyp);
    CHECK(b.errors() == brute_edits(ref, hyp));
    CHECK(b.ref_words == ref.size());
    // Insertions minus deletions is fixed by the lengths.
    CHECK(static_cast<long>(b.insertions) - static_cast<long>(b.deletions) ==
          static_cast<long>(hyp.size()) - static_cast<long>(ref.size()));
    if (ref.empty()) continue;
    const auto w = wer({join(ref)}, {join(hyp)});
    CHECK((w.wer == 0.0) == (ref == hyp));
    const double len_gap = 100.0 * std::abs(static_cast<double>(ref.size()) - static_cast<double>(hyp.size())) /
                           static_cast<double>(ref.size());
    CHECK(w.wer >= len_gap - 1e-12);
    CHECK(w.wer == doctest::Approx(100.0 * static_cast<double>(w.errors()) / static_cast<double>(ref.size())));
  }
}

TEST_CASE("emission delay examples") {
  const Vocabulary v({"<blank>", "<unk>", "_he", "llo", "_yo"});
  const std::vector<WordTiming> ref{{"hello", 3, 8}, {"yo", 9, 12}};
  // Stack factor 1: emissions land on input frames 5 and 11.
  const Hypothesis h{{2, 3, 4}, -1.0, {5, 6, 11}};
  const auto d = emission_delay(ref, h, v, 1);
  CHECK(d.gaps == std::vector<long>{2, 2});
  CHECK(d.mean_gap == 2.0);
  CHECK(d.measured_utterances == 1);

  const std::vector<WordTiming> ref3{{"hello", 3, 8}, {"yo", 9, 12}};
  const Hypothesis h3{{2, 3, 4}, -1.0, {1, 2, 3}};
  CHECK(emission_delay(ref3, h3, v, 3).gaps == std::vector<long>{0, 0});

  const Hypothesis short_h{{2, 3}, -1.0, {1, 2}};
  const auto skipped = emission_delay(ref, short_h, v, 3);
  CHECK(skipped.skipped_utterances == 1);
  CHECK(skipped.gaps.empty());

  // Unknown words start a new word.
  const Hypothesis unk{{kUnkId, 4}, -1.0, {2, 4}};
  CHECK(emission_delay(ref, unk, v, 3).gaps == std::vector<long>{3, 3});
}

TEST_CASE("delay stats aggregate and histogram totals") {
  const Vocabulary v({"<blank>", "<unk>", "_a", "_b"});
  DelayStats total;
  total.add(emission_delay({{"a", 0, 3}, {"b", 4, 6}}, {{2, 3}, 0.0, {1, 2}}, v, 3));
  total.add(emission_delay({{"a", 2, 3}}, {{2}, 0.0, {0}}, v, 3));
  total.add(emission_delay({{"a", 2, 3}}, {{}, 0.0, {}}, v, 3));
  CHECK(total.gaps == std::vector<long>{3, 2, -2});
  CHECK(total.mean_gap == doctest::Approx(1.0));
  CHECK(total.measured_utterances == 2);
  CHECK(total.skipped_utterances == 1);
  std::size_t count = 0;
  for (const auto& [b, n] : total.histogram) count += n;
  CHECK(count == total.gaps.size());

  const auto h = delay_histogram({-3, -1, 0, 1, 4, 5}, 2);
  CHECK(h == std::map<long, std::size_t>{{-4, 1}, {-2, 1}, {0, 2}, {4, 2}});
  CHECK_THROWS_AS(delay_histogram({1}, 0), Error);
}

TEST_CASE("latency examples and linearity") {
  CHECK(latency_ms(1, 12, 30) == 390.0);
  CHECK(latency_ms(-2, 24, 30) == 660.0);
  CHECK(latency_ms(0, 0, 30) == 0.0);
  CHECK_THROWS_AS(latency_ms(1, 1, 0), Error);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const double g1 = rng.normal(0, 5), g2 = rng.normal(0, 5), l1 = rng.normal(0, 5), l2 = rng.normal(0, 5);
    const double a = rng.normal(), f = 30.0;
    CHECK(latency_ms(g1 + g2, l1 + l2, f) == doctest::Approx(latency_ms(g1, l1, f) + latency_ms(g2, l2, f)));
    CHECK(latency_ms(a * g1, a * l1, f) == doctest::Approx(a * latency_ms(g1, l1, f)));
  }
}

TEST_CASE("report CSV formats") {
  std::ostringstream r;
  ReportRow row;
  row.model = "baseline";
  row.test_set = "test";
  row.wer = wer({"a b"}, {"a c"});
  row.mean_gap_frames = 1.5;
  row.latency_ms = 405;
  write_report_csv(r, {row});
  CHECK(r.str().rfind("model,test_set,wer,sub,del,ins,mean_gap_frames,latency_ms\n", 0) == 0);
  CHECK(r.str().find("baseline,test,50.0000,1,0,0,") != std::string::npos);
  std::ostringstream h;
  write_histogram_csv(h, {{-1, 2}, {3, 1}});
  CHECK(h.str() == "bucket_frames,count\n-1,2\n3,1\n");
}
