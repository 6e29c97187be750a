#include "rnntlab/datasets.h"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "rnntlab/rng.h"

namespace rnntlab {

namespace {

constexpr std::string_view kUnitLetters = "aeioubdgklmnprstvz";
constexpr char kFeatureMagic[4] = {'R', 'N', 'T', 'F'};

std::string utt_name(const std::string& domain, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return domain + "-" + buf;
}

std::size_t sample(Rng& rng, const std::vector<double>& weights) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace

void SynthSpec::check() const {
  if (units < 2 || units > kUnitLetters.size())
    throw Error("synth: units must be in [2, " + std::to_string(kUnitLetters.size()) + "]");
  if (words == 0) throw Error("synth: empty word list");
  if (min_word_units == 0 || min_word_units > max_word_units) throw Error("synth: bad word length range");
  if (min_unit_frames == 0 || min_unit_frames > max_unit_frames) throw Error("synth: bad unit frame range");
  if (min_sentence_words == 0 || min_sentence_words > max_sentence_words)
    throw Error("synth: bad sentence length range");
  if (min_gap_frames > max_gap_frames) throw Error("synth: bad gap range");
  if (feature_dim == 0) throw Error("synth: feature_dim must be positive");
  if (successors == 0) throw Error("synth: successors must be positive");
  if (!(noise >= 0.0) || !(speaker_variance >= 0.0)) throw Error("synth: noise and speaker variance must be >= 0");
  std::size_t possible = 0, pow = 1;
  for (std::size_t len = 1; len <= max_word_units && possible < words; ++len) {
    pow *= units;
    if (len >= min_word_units) possible += pow;
  }
  if (possible < words) throw Error("synth: cannot spell " + std::to_string(words) + " distinct words");
}

Lexicon make_lexicon(const SynthSpec& spec) {
  spec.check();
  Lexicon lex;
  Rng rng(derive_seed(spec.acoustic_seed, "lexicon"));
  std::set<std::string> seen;
  while (lex.words.size() < spec.words) {
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_word_units), static_cast<std::int64_t>(spec.max_word_units)));
    std::string w;
    std::vector<std::size_t> units;
    for (std::size_t k = 0; k < len; ++k) {
      const auto u = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.units) - 1));
      units.push_back(u);
      w += kUnitLetters[u];
    }
    if (!seen.insert(w).second) continue;
    lex.words.push_back(w);
    lex.spelling.push_back(std::move(units));
  }
  Rng proto(derive_seed(spec.acoustic_seed, "prototypes"));
  lex.prototypes = Tensor::matrix(spec.units, spec.feature_dim);
  for (double& v : lex.prototypes.data()) v = proto.normal(0.0, spec.prototype_scale);
  return lex;
}

SentenceModel make_sentence_model(const SynthSpec& spec, std::size_t vocabulary_words) {
  SentenceModel m;
  Rng rng(derive_seed(spec.text_seed, "bigram"));
  const std::size_t k = std::min(spec.successors, vocabulary_words);
  for (std::size_t prev = 0; prev <= vocabulary_words; ++prev) {
    std::vector<std::size_t> pool(vocabulary_words);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    std::vector<std::size_t> chosen;
    std::vector<double> weight;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size()) - 1));
      std::swap(pool[i], pool[j]);
      chosen.push_back(pool[i]);
      weight.push_back(rng.uniform(0.2, 1.0));
      total += weight.back();
    }
    for (double& w : weight) w /= total;
    m.next.push_back(std::move(chosen));
    m.next_weight.push_back(std::move(weight));
  }
  return m;
}

Corpus synth_corpus(const SynthSpec& spec, std::size_t n_utts, std::uint64_t seed) {
  if (n_utts == 0) throw Error("synth_corpus: n_utts must be >= 1");
  const Lexicon lex = make_lexicon(spec);
  const SentenceModel lm = make_sentence_model(spec, lex.words.size());
  const std::size_t d = spec.feature_dim;

  std::vector<std::vector<double>> pool;
  Rng speaker_rng(derive_seed(seed, spec.domain + "/speakers"));
  for (std::size_t s = 0; s < spec.speakers; ++s) {
    std::vector<double> off(d);
    for (double& v : off) v = speaker_rng.normal(0.0, spec.speaker_variance);
    pool.push_back(std::move(off));
  }

  Corpus corpus;
  corpus.reserve(n_utts);
  for (std::size_t i = 0; i < n_utts; ++i) {
    Utterance utt;
    utt.id = utt_name(spec.domain, i);
    Rng rng(derive_seed(seed, utt.id));
    auto span = [&rng](std::size_t lo, std::size_t hi) {
      return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    };

    std::vector<std::size_t> sentence;
    const std::size_t n_words = span(spec.min_sentence_words, spec.max_sentence_words);
    std::size_t prev = 0;
    for (std::size_t w = 0; w < n_words; ++w) {
      const std::size_t word = lm.next[prev][sample(rng, lm.next_weight[prev])];
      sentence.push_back(word);
      prev = word + 1;
    }

    std::vector<double> speaker(d, 0.0);
    if (!pool.empty()) {
      speaker = pool[span(0, pool.size() - 1)];
    } else {
      for (double& v : speaker) v = rng.normal(0.0, spec.speaker_variance);
    }

    // Unit index per frame; -1 marks silence.
    std::vector<long> frames(spec.edge_frames, -1);
    for (std::size_t w = 0; w < sentence.size(); ++w) {
      if (w) frames.insert(frames.end(), span(spec.min_gap_frames, spec.max_gap_frames), -1);
      const std::size_t start = frames.size();
      for (std::size_t u : lex.spelling[sentence[w]])
        frames.insert(frames.end(), span(spec.min_unit_frames, spec.max_unit_frames), static_cast<long>(u));
      utt.timings.push_back({lex.words[sentence[w]], start, frames.size()});
      if (!utt.transcript.empty()) utt.transcript += ' ';
      utt.transcript += lex.words[sentence[w]];
    }
    frames.insert(frames.end(), spec.edge_frames, -1);

    utt.features = FrameMatrix(frames.size(), d);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      for (std::size_t k = 0; k < d; ++k) {
        const double base = frames[t] < 0 ? 0.0 : lex.prototypes.at(static_cast<std::size_t>(frames[t]), k);
        utt.features.at(t, k) = base + speaker[k] + (spec.noise > 0.0 ? rng.normal(0.0, spec.noise) : 0.0);
      }
    }
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

std::vector<std::string> transcripts(const Corpus& corpus) {
  std::vector<std::string> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) out.push_back(u.transcript);
  return out;
}

FrameMatrix round_to_f32(const FrameMatrix& feat) {
  FrameMatrix out = feat;
  for (double& v : out.values) v = static_cast<double>(static_cast<float>(v));
  return out;
}

void write_features(const std::filesystem::path& path, const FrameMatrix& feat) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kFeatureMagic, 4);
  write_u32(out, static_cast<std::uint32_t>(feat.frames));
  write_u32(out, static_cast<std::uint32_t>(feat.dim));
  for (double v : feat.values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    out.write(bytes, 4);
  }
  if (!out) throw Error("write failed: " + path.string());
}

FrameMatrix read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t offset, const std::string& what) {
    return Error(path.string() + ": " + what + " at byte offset " + std::to_string(offset));
  };
  auto u32 = [&](std::size_t offset) {
    if (offset + 4 > bytes.size()) throw fail(offset, "truncated file");
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(bytes[offset + k]);
    return v;
  };
  if (bytes.size() < 4 || bytes.compare(0, 4, kFeatureMagic, 4) != 0) throw fail(0, "bad magic");
  const std::size_t frames = u32(4), dim = u32(8);
  FrameMatrix feat(frames, dim);
  for (std::size_t i = 0; i < feat.values.size(); ++i)
    feat.values[i] = static_cast<double>(std::bit_cast<float>(u32(12 + 4 * i)));
  if (bytes.size() != 12 + 4 * feat.values.size()) throw fail(12 + 4 * feat.values.size(), "trailing bytes");
  return feat;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "feats");
  std::ofstream index(dir / "index.tsv"), text(dir / "transcripts.txt"), timing(dir / "timings.txt");
  if (!index || !text || !timing) throw Error("cannot write corpus files under " + dir.string());
  index << "utt_id\trelative_path\n";
  for (const auto& u : corpus) {
    const std::string rel = "feats/" + u.id + ".rntf";
    write_features(dir / rel, u.features);
    index << u.id << '\t' << rel << '\n';
    text << u.id << '\t' << u.transcript << '\n';
    timing << u.id << '\t' << format_timings(u.timings) << '\n';
  }
}

namespace {

std::map<std::string, std::string> read_keyed_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(path.string() + ":" + std::to_string(lineno) + ": missing tab");
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

}  // namespace

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.tsv");
  if (!index) throw Error("cannot open " + (dir / "index.tsv").string());
  std::string line;
  if (!std::getline(index, line) || line != "utt_id\trelative_path")
    throw Error((dir / "index.tsv").string() + ": bad header");
  const auto texts = read_keyed_lines(dir / "transcripts.txt");
  const auto timings = read_keyed_lines(dir / "timings.txt");
  Corpus corpus;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("index.tsv: missing tab in '" + line + "'");
    Utterance u;
    u.id = line.substr(0, tab);
    u.features = read_features(dir / line.substr(tab + 1));
    const auto t = texts.find(u.id);
    if (t == texts.end()) throw Error("no transcript for " + u.id);
    u.transcript = t->second;
    if (const auto tm = timings.find(u.id); tm != timings.end()) u.timings = parse_timings(tm->second);
    corpus.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace rnntlab
