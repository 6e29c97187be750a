#include "rnntlab/experiment.h"

#include <atomic>
#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rnntlab/rng.h"

namespace rnntlab {

namespace fs = std::filesystem;

LabConfig::LabConfig() {
  train.arch = parse_arch_spec("48p24x2");
  train.arch.pred_layers = 1;
  train.init = InitKind::kCe;
  train.lr = 3e-3;
  train.epochs = 20;
  train.pretrain_epochs = 10;
  train.pretrain_lr = 3e-3;
  adapt = train;
  adapt.epochs = 10;
  adapt.lr = 1e-3;
  lm = train;
  lm.lm_hidden = 64;
  lm.epochs = 5;
  lm.batch = 16;
}

SynthSpec LabConfig::new_domain_spec() const {
  SynthSpec s = synth;
  s.text_seed = new_domain_text_seed;
  s.domain = "new";
  return s;
}

SynthSpec LabConfig::narrow_spec() const {
  SynthSpec s = new_domain_spec();
  s.domain = "tts";
  s.speakers = narrow_speakers;
  s.speaker_variance = narrow_speaker_variance;
  s.noise = narrow_noise;
  if (narrow_unit_frames > 0) s.min_unit_frames = s.max_unit_frames = narrow_unit_frames;
  return s;
}

namespace {

Corpus synth_named(SynthSpec spec, const std::string& name, std::size_t n, std::uint64_t seed) {
  spec.domain = name;
  if (n == 0) return {};
  return synth_corpus(spec, n, derive_seed(seed, name));
}

}  // namespace

LabCorpora synth_lab_corpora(const LabConfig& cfg) {
  LabCorpora c;
  const SynthSpec shifted = cfg.new_domain_spec();
  c.train = synth_named(cfg.synth, "train", cfg.train_utts, cfg.data_seed);
  c.test = synth_named(cfg.synth, "test", cfg.test_utts, cfg.data_seed);
  c.adapt = synth_named(cfg.narrow_spec(), "tts", cfg.adapt_utts, cfg.data_seed);
  c.new_dev = synth_named(shifted, "newdev", cfg.new_dev_utts, cfg.data_seed);
  c.new_test = synth_named(shifted, "newtest", cfg.new_test_utts, cfg.data_seed);
  SynthSpec text = shifted;
  text.noise = 0.0;
  text.speaker_variance = 0.0;
  c.lm_text = transcripts(synth_named(text, "lmtext", cfg.lm_text_utts, cfg.data_seed));
  return c;
}

Vocabulary build_lab_vocab(const LabConfig& cfg, const Corpus& train) {
  const auto texts = transcripts(train);
  return build_vocab(texts, cfg.vocab_size);
}

LabData prepare_lab_data(const LabConfig& cfg, const LabCorpora& corpora, const Vocabulary& vocab) {
  ArchSpec arch = cfg.train.arch;
  arch.vocab_size = vocab.size();
  LabData d;
  d.vocab = vocab;
  Split split = split_dev(prepare_examples(corpora.train, vocab, arch), cfg.data_seed, cfg.train.dev_fraction);
  d.train = std::move(split.train);
  d.dev = std::move(split.dev);
  d.test = prepare_examples(corpora.test, vocab, arch);
  d.adapt = prepare_examples(corpora.adapt, vocab, arch);
  d.new_dev = prepare_examples(corpora.new_dev, vocab, arch);
  d.new_test = prepare_examples(corpora.new_test, vocab, arch);
  d.lm_text = corpora.lm_text;
  return d;
}

LabData build_lab_data(const LabConfig& cfg) {
  const LabCorpora c = synth_lab_corpora(cfg);
  return prepare_lab_data(cfg, c, build_lab_vocab(cfg, c.train));
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

TrainResult train_model(const TrainConfig& cfg_in, const LabData& data) {
  TrainConfig cfg = cfg_in;
  cfg.arch.vocab_size = data.vocab.size();
  switch (cfg.init) {
    case InitKind::kCe: {
      const EncoderParams enc = pretrain_encoder_ce(cfg, data.train).encoder;
      return train_rnnt(cfg, data.train, data.dev, data.vocab, &enc);
    }
    case InitKind::kCtc: {
      const EncoderParams enc = pretrain_encoder_ctc(cfg, data.train).encoder;
      return train_rnnt(cfg, data.train, data.dev, data.vocab, &enc);
    }
    case InitKind::kRandom:
      break;
  }
  return train_rnnt(cfg, data.train, data.dev, data.vocab);
}

std::vector<NBest> decode_nbest(const ModelParams& params, const std::vector<Example>& data, std::size_t beam,
                                std::size_t jobs) {
  std::vector<NBest> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    out[i] = beam == 0 ? NBest{greedy_decode(params, data[i].stacked)} : beam_decode(params, data[i].stacked, beam);
  });
  return out;
}

std::vector<Hypothesis> decode_best(const ModelParams& params, const std::vector<Example>& data, std::size_t beam,
                                    std::size_t jobs) {
  std::vector<Hypothesis> out;
  for (auto& nb : decode_nbest(params, data, beam, jobs)) out.push_back(nb.empty() ? Hypothesis{} : std::move(nb[0]));
  return out;
}

WerBreakdown score_wer(const std::vector<Hypothesis>& hyps, const std::vector<Example>& data, const Vocabulary& vocab) {
  if (hyps.size() != data.size()) throw Error("score_wer: hypothesis and example counts differ");
  std::vector<std::string> refs, texts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    refs.push_back(data[i].transcript);
    texts.push_back(decode(hyps[i].tokens, vocab));
  }
  return wer(refs, texts);
}

DelayStats score_delay(const std::vector<Hypothesis>& hyps, const std::vector<Example>& data, const Vocabulary& vocab,
                       std::size_t stack_factor) {
  if (hyps.size() != data.size()) throw Error("score_delay: hypothesis and example counts differ");
  DelayStats total;
  for (std::size_t i = 0; i < data.size(); ++i) total.add(emission_delay(data[i].timings, hyps[i], vocab, stack_factor));
  return total;
}

std::vector<InitRow> compare_init(const LabConfig& cfg, const LabData& data, const std::vector<std::uint64_t>& seeds) {
  std::vector<InitRow> rows;
  for (std::uint64_t seed : seeds) {
    InitRow row;
    row.seed = seed;
    for (InitKind kind : {InitKind::kRandom, InitKind::kCtc, InitKind::kCe}) {
      TrainConfig t = cfg.train;
      t.seed = seed;
      t.init = kind;
      const ModelParams m = train_model(t, data).params;
      const double w = score_wer(decode_best(m, data.dev, cfg.beam, cfg.jobs), data.dev, data.vocab).wer;
      (kind == InitKind::kRandom ? row.wer_random : kind == InitKind::kCtc ? row.wer_ctc : row.wer_ce) = w;
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<LookaheadRow> compare_lookahead(const LabConfig& cfg, const LabData& data, std::size_t tau,
                                            const std::vector<std::uint64_t>& seeds) {
  std::vector<LookaheadRow> rows;
  for (std::uint64_t seed : seeds) {
    LookaheadRow row;
    row.seed = seed;
    for (std::size_t k : {std::size_t{0}, tau}) {
      TrainConfig t = cfg.train;
      t.seed = seed;
      t.arch.tau = k;
      const ModelParams m = train_model(t, data).params;
      const auto hyps = decode_best(m, data.dev, cfg.beam, cfg.jobs);
      const double w = score_wer(hyps, data.dev, data.vocab).wer;
      const double d = score_delay(hyps, data.dev, data.vocab, t.arch.stack_factor).mean_gap;
      (k == 0 ? row.wer_base : row.wer_context) = w;
      (k == 0 ? row.delay_base : row.delay_context) = d;
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_init_csv(std::ostream& out, const std::vector<InitRow>& rows) {
  out << "seed,wer_random,wer_ctc,wer_ce,delta_ctc,delta_ce\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << fmt(r.wer_random) << ',' << fmt(r.wer_ctc) << ',' << fmt(r.wer_ce) << ','
        << fmt(r.wer_ctc - r.wer_random) << ',' << fmt(r.wer_ce - r.wer_random) << '\n';
  }
}

void write_lookahead_csv(std::ostream& out, const std::vector<LookaheadRow>& rows) {
  out << "seed,wer_tau0,wer_context,delta_wer,gap_tau0,gap_context\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << fmt(r.wer_base) << ',' << fmt(r.wer_context) << ',' << fmt(r.wer_context - r.wer_base)
        << ',' << fmt(r.delay_base) << ',' << fmt(r.delay_context) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Config files

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T number(const std::string& section, const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("[" + section + "] " + key + ": bad value '" + v + "'");
  return out;
}

bool set_synth_option(LabConfig& lab, const std::string& key, const std::string& v) {
  auto sz = [&] { return number<std::size_t>("synth", key, v); };
  auto real = [&] { return number<double>("synth", key, v); };
  auto u64 = [&] { return number<std::uint64_t>("synth", key, v); };
  SynthSpec& s = lab.synth;
  const std::map<std::string, std::size_t*> sizes{
      {"units", &s.units},
      {"words", &s.words},
      {"min_word_units", &s.min_word_units},
      {"max_word_units", &s.max_word_units},
      {"feature_dim", &s.feature_dim},
      {"min_unit_frames", &s.min_unit_frames},
      {"max_unit_frames", &s.max_unit_frames},
      {"min_sentence_words", &s.min_sentence_words},
      {"max_sentence_words", &s.max_sentence_words},
      {"min_gap_frames", &s.min_gap_frames},
      {"max_gap_frames", &s.max_gap_frames},
      {"edge_frames", &s.edge_frames},
      {"successors", &s.successors},
      {"speakers", &s.speakers},
      {"train_utts", &lab.train_utts},
      {"test_utts", &lab.test_utts},
      {"adapt_utts", &lab.adapt_utts},
      {"new_dev_utts", &lab.new_dev_utts},
      {"new_test_utts", &lab.new_test_utts},
      {"lm_text_utts", &lab.lm_text_utts},
      {"vocab_size", &lab.vocab_size},
      {"narrow_speakers", &lab.narrow_speakers},
      {"narrow_unit_frames", &lab.narrow_unit_frames},
  };
  const std::map<std::string, double*> reals{
      {"prototype_scale", &s.prototype_scale},
      {"noise", &s.noise},
      {"speaker_variance", &s.speaker_variance},
      {"narrow_noise", &lab.narrow_noise},
      {"narrow_speaker_variance", &lab.narrow_speaker_variance},
  };
  const std::map<std::string, std::uint64_t*> seeds{
      {"acoustic_seed", &s.acoustic_seed},
      {"text_seed", &s.text_seed},
      {"data_seed", &lab.data_seed},
      {"new_domain_text_seed", &lab.new_domain_text_seed},
  };
  if (auto it = sizes.find(key); it != sizes.end()) {
    *it->second = sz();
  } else if (auto r = reals.find(key); r != reals.end()) {
    *r->second = real();
  } else if (auto q = seeds.find(key); q != seeds.end()) {
    *q->second = u64();
  } else {
    return false;
  }
  return true;
}

void apply_option(ExperimentConfig& cfg, const std::string& section, const std::string& key, const std::string& v) {
  LabConfig& lab = cfg.lab;
  auto unknown = [&] { throw ConfigError("[" + section + "]: unknown key '" + key + "'"); };
  try {
    if (section == "experiment") {
      if (key == "stages") {
        cfg.stages.clear();
        std::stringstream ss(v);
        std::string stage;
        while (std::getline(ss, stage, ',')) {
          stage = trim(stage);
          if (stage.empty()) continue;
          if (std::find(all_stages().begin(), all_stages().end(), stage) == all_stages().end())
            throw ConfigError("[experiment] stages: unknown stage '" + stage + "'");
          cfg.stages.push_back(stage);
        }
      } else if (key == "seed") {
        cfg.seed = number<std::uint64_t>(section, key, v);
      } else {
        unknown();
      }
    } else if (section == "synth") {
      if (!set_synth_option(lab, key, v)) unknown();
    } else if (section == "decode") {
      if (key == "beam")
        lab.beam = number<std::size_t>(section, key, v);
      else if (key == "jobs")
        lab.jobs = number<std::size_t>(section, key, v);
      else
        unknown();
    } else if (section == "train" || section == "adapt" || section == "lm") {
      if (key == "seed") throw ConfigError("[" + section + "] seed: set the seed in [experiment]");
      if (section == "adapt" && key == "scope") {
        lab.adapt_scope = parse_scope(v);
      } else if (section == "adapt" && key == "mix_ratio") {
        lab.mix_ratio = number<double>(section, key, v);
      } else {
        TrainConfig& t = section == "train" ? lab.train : section == "adapt" ? lab.adapt : lab.lm;
        if (!set_train_option(t, key, v)) unknown();
        // Adaptation and the LM inherit the transducer shape.
        if (section == "train" && (key == "arch" || key == "pred_layers" || key == "joint_dim")) {
          lab.adapt.arch = lab.train.arch;
        }
      }
    } else {
      throw ConfigError("unknown section [" + section + "]");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("[" + section + "] " + key + ": " + e.what());
  }
}

}  // namespace

std::string ExperimentConfig::canonical() const {
  std::ostringstream out;
  for (const auto& [section, keys] : raw) {
    out << '[' << section << "]\n";
    for (const auto& [k, v] : keys)
      if (!(section == "experiment" && k == "seed")) out << k << '=' << v << '\n';
  }
  out << "seed=" << seed << '\n';
  return out.str();
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  lab.train.seed = s;
  lab.adapt.seed = s;
  lab.lm.seed = s;
}

ExperimentConfig parse_experiment_config(std::string_view text) {
  ExperimentConfig cfg;
  cfg.stages = {"synth", "vocab", "train", "decode", "eval"};
  std::istringstream in{std::string(text)};
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      static const std::set<std::string> known{"experiment", "synth", "train", "adapt", "lm", "decode"};
      if (!known.count(section))
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown section [" + section + "]");
      cfg.raw[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    try {
      apply_option(cfg, section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
    cfg.raw[section][key] = value;
  }
  cfg.set_seed(cfg.seed);
  try {
    cfg.lab.synth.check();
    cfg.lab.train.check();
    cfg.lab.adapt.check();
    cfg.lab.lm.check();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (cfg.lab.mix_ratio < 0.0 || cfg.lab.mix_ratio > 1.0) throw ConfigError("[adapt] mix_ratio must be in [0, 1]");
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

// ---------------------------------------------------------------------------
// Stages

namespace {

using json = nlohmann::json;

const char* kCorpora[] = {"train", "test", "adapt", "new_dev", "new_test"};

struct Run {
  const ExperimentConfig& cfg;
  std::ostream& log;
  fs::path out;

  fs::path path(const std::string& name) const { return out / name; }

  void require(const std::string& stage, const fs::path& p, const char* what) const {
    if (!fs::exists(p)) throw StageError(stage, "missing " + std::string(what) + " " + p.string());
  }

  template <typename F>
  void write_file(const fs::path& p, F&& body) const {
    const fs::path tmp = p.string() + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) throw Error("cannot write " + tmp.string());
      body(f);
      if (!f) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, p);
  }

  LabCorpora corpora(const std::string& stage) const {
    LabCorpora c;
    Corpus* slots[] = {&c.train, &c.test, &c.adapt, &c.new_dev, &c.new_test};
    for (std::size_t i = 0; i < 5; ++i) {
      const fs::path dir = path("data") / kCorpora[i];
      require(stage, dir / "index.tsv", "corpus");
      *slots[i] = read_corpus(dir);
    }
    const fs::path text = path("data") / "lm_text.txt";
    require(stage, text, "LM text");
    std::ifstream in(text);
    for (std::string line; std::getline(in, line);) c.lm_text.push_back(line);
    return c;
  }

  Vocabulary vocab(const std::string& stage) const {
    require(stage, path("vocab.txt"), "vocabulary");
    return Vocabulary::load(path("vocab.txt"));
  }

  LabData data(const std::string& stage) const { return prepare_lab_data(cfg.lab, corpora(stage), vocab(stage)); }

  ModelParams model(const std::string& stage, const char* name) const {
    require(stage, path(name), "checkpoint");
    return ModelParams::load(path(name));
  }

  TrainConfig train_cfg(const LabData& d) const {
    TrainConfig t = cfg.lab.train;
    t.arch.vocab_size = d.vocab.size();
    return t;
  }

  void synth() const {
    const LabCorpora c = synth_lab_corpora(cfg.lab);
    const Corpus* slots[] = {&c.train, &c.test, &c.adapt, &c.new_dev, &c.new_test};
    for (std::size_t i = 0; i < 5; ++i) write_corpus(*slots[i], path("data") / kCorpora[i]);
    write_file(path("data") / "lm_text.txt", [&](std::ostream& f) {
      for (const auto& t : c.lm_text) f << t << '\n';
    });
    log << "synth: " << c.train.size() << " train, " << c.test.size() << " test, " << c.adapt.size()
        << " adaptation utterances\n";
  }

  void make_vocab() const {
    const LabCorpora c = corpora("vocab");
    const Vocabulary v = build_lab_vocab(cfg.lab, c.train);
    v.save(path("vocab.txt"));
    log << "vocab: " << v.size() << " pieces\n";
  }

  void pretrain() const {
    const LabData d = data("pretrain");
    const TrainConfig t = train_cfg(d);
    ModelParams m = ModelParams::init(t.arch, t.seed);
    if (t.init == InitKind::kCe)
      m.encoder = pretrain_encoder_ce(t, d.train).encoder;
    else if (t.init == InitKind::kCtc)
      m.encoder = pretrain_encoder_ctc(t, d.train).encoder;
    m.save(path("pretrain.ckpt"));
    log << "pretrain: " << init_name(t.init) << " encoder\n";
  }

  void train() const {
    const LabData d = data("train");
    const TrainConfig t = train_cfg(d);
    TrainResult r;
    if (t.init == InitKind::kRandom) {
      r = train_rnnt(t, d.train, d.dev, d.vocab);
    } else {
      const fs::path init = path("pretrain.ckpt");
      const bool listed = std::find(cfg.stages.begin(), cfg.stages.end(), "pretrain") != cfg.stages.end();
      if (listed || fs::exists(init)) {
        const ModelParams p = model("train", "pretrain.ckpt");
        if (!(p.arch == t.arch)) throw StageError("train", "pretrain.ckpt has a different architecture");
        r = train_rnnt(t, d.train, d.dev, d.vocab, &p.encoder);
      } else {
        r = train_model(t, d);
      }
    }
    r.params.save(path("model.ckpt"));
    write_file(path("metrics.csv"), [&](std::ostream& f) { write_metrics_csv(f, r.history); });
    log << "train: " << r.history.size() / 2 << " epochs\n";
  }

  void write_nbest(const std::string& name, const std::vector<Example>& ex, const std::vector<NBest>& nb,
                   const Vocabulary& v) const {
    write_file(path(name), [&](std::ostream& f) {
      write_nbest_header(f);
      for (std::size_t i = 0; i < ex.size(); ++i) write_nbest_rows(f, ex[i].id, nb[i], v);
    });
  }

  void decode_stage() const {
    const ModelParams m = model("decode", "model.ckpt");
    const LabData d = data("decode");
    write_nbest("nbest_test.csv", d.test, decode_nbest(m, d.test, cfg.lab.beam, cfg.lab.jobs), d.vocab);
    write_nbest("nbest_new_test.csv", d.new_test, decode_nbest(m, d.new_test, cfg.lab.beam, cfg.lab.jobs), d.vocab);
    log << "decode: beam " << cfg.lab.beam << "\n";
  }

  void rescore_stage() const {
    const ModelParams m = model("rescore", "model.ckpt");
    const LabData d = data("rescore");
    const LmParams lm = train_lm(d.lm_text, cfg.lab.lm, d.vocab);
    lm.save(path("lm.ckpt"));
    const auto nb = decode_nbest(m, d.new_dev, std::max<std::size_t>(cfg.lab.beam, 1), cfg.lab.jobs);
    std::vector<std::string> refs;
    for (const auto& e : d.new_dev) refs.push_back(e.transcript);
    const LambdaSearch s = select_lambda(nb, refs, lm, d.vocab, default_lambda_grid());
    write_file(path("lambda.csv"), [&](std::ostream& f) {
      f << "lambda,dev_wer,selected\n";
      for (const auto& [l, w] : s.grid) f << fmt(l) << ',' << fmt(w) << ',' << (l == s.best_lambda ? 1 : 0) << '\n';
    });
    log << "rescore: lambda " << s.best_lambda << "\n";
  }

  void adapt_stage() const {
    const ModelParams m = model("adapt", "model.ckpt");
    const LabData d = data("adapt");
    TrainConfig t = cfg.lab.adapt;
    t.arch = m.arch;
    MixSpec mix;
    if (cfg.lab.mix_ratio > 0.0) mix = {&d.train, cfg.lab.mix_ratio};
    const ModelParams a = adapt(m, t, d.adapt, cfg.lab.adapt_scope, mix);
    a.save(path("adapted.ckpt"));
    log << "adapt: scope " << scope_name(cfg.lab.adapt_scope) << "\n";
  }

  double selected_lambda() const {
    std::ifstream in(path("lambda.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.size() >= 2 && line.substr(line.size() - 2) == ",1") return std::stod(line.substr(0, line.find(',')));
    }
    throw StageError("eval", "lambda.csv has no selected row");
  }

  void eval_stage() const {
    const ModelParams m = model("eval", "model.ckpt");
    const LabData d = data("eval");
    const std::size_t beam = cfg.lab.beam, jobs = cfg.lab.jobs;
    const ArchSpec& arch = m.arch;
    const double lookahead = static_cast<double>(total_lookahead(arch).frames);
    const double frame_ms = static_cast<double>(arch.encoder_frame_ms());
    std::vector<ReportRow> rows;
    std::map<long, std::size_t> histogram;
    auto add_row = [&](const std::string& model_name, const std::string& set, const std::vector<Hypothesis>& hyps,
                       const std::vector<Example>& ex) {
      ReportRow r;
      r.model = model_name;
      r.test_set = set;
      r.wer = score_wer(hyps, ex, d.vocab);
      const DelayStats ds = score_delay(hyps, ex, d.vocab, arch.stack_factor);
      r.mean_gap_frames = ds.mean_gap;
      r.latency_ms = latency_ms(ds.mean_gap, lookahead, frame_ms);
      if (model_name == "baseline" && set == "test") histogram = delay_histogram(ds.gaps);
      rows.push_back(r);
    };
    add_row("baseline", "test", decode_best(m, d.test, beam, jobs), d.test);
    const auto new_nb = decode_nbest(m, d.new_test, std::max<std::size_t>(beam, 1), jobs);
    std::vector<Hypothesis> new_best;
    for (const auto& nb : new_nb) new_best.push_back(nb.front());
    add_row("baseline", "new_test", new_best, d.new_test);
    if (fs::exists(path("lm.ckpt")) && fs::exists(path("lambda.csv"))) {
      const LmParams lm = LmParams::load(path("lm.ckpt"));
      const double lambda = selected_lambda();
      std::vector<Hypothesis> picked;
      for (const auto& nb : new_nb) picked.push_back(rescore(nb, lm, lambda));
      add_row("rescored_lambda_" + fmt(lambda), "new_test", picked, d.new_test);
    }
    if (fs::exists(path("adapted.ckpt"))) {
      const ModelParams a = ModelParams::load(path("adapted.ckpt"));
      add_row("adapted_" + std::string(scope_name(cfg.lab.adapt_scope)), "new_test",
              decode_best(a, d.new_test, beam, jobs), d.new_test);
    }
    write_file(path("report.csv"), [&](std::ostream& f) { write_report_csv(f, rows); });
    write_file(path("histogram.csv"), [&](std::ostream& f) { write_histogram_csv(f, histogram); });
    for (const auto& r : rows)
      log << "eval: " << r.model << " on " << r.test_set << " WER " << fmt(r.wer.wer) << "\n";
  }

  void run_stage(const std::string& stage) const {
    if (stage == "synth") synth();
    else if (stage == "vocab") make_vocab();
    else if (stage == "pretrain") pretrain();
    else if (stage == "train") train();
    else if (stage == "decode") decode_stage();
    else if (stage == "rescore") rescore_stage();
    else if (stage == "adapt") adapt_stage();
    else if (stage == "eval") eval_stage();
    else throw StageError(stage, "unknown stage");
  }
};

}  // namespace

void run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  if (cfg.out.empty()) throw ConfigError("no output directory");
  fs::create_directories(cfg.out);
  const fs::path manifest_path = cfg.out / "manifest.json";
  const std::string hash = cfg.hash();

  std::set<std::string> done;
  if (fs::exists(manifest_path)) {
    try {
      std::ifstream in(manifest_path);
      const json m = json::parse(in);
      if (m.at("config_hash").get<std::string>() == hash && m.at("seed").get<std::uint64_t>() == cfg.seed) {
        for (const auto& s : m.at("completed")) done.insert(s.get<std::string>());
      }
    } catch (const json::exception&) {
      done.clear();
    }
  }

  std::vector<std::string> completed;
  for (const auto& s : all_stages())
    if (done.count(s)) completed.push_back(s);
  auto save_manifest = [&] {
    json m;
    m["config_hash"] = hash;
    m["seed"] = cfg.seed;
    m["stages"] = cfg.stages;
    m["completed"] = completed;
    m["config"] = cfg.canonical();
    const fs::path tmp = manifest_path.string() + ".tmp";
    {
      std::ofstream f(tmp);
      f << m.dump(2) << '\n';
    }
    fs::rename(tmp, manifest_path);
  };

  const Run run{cfg, log, cfg.out};
  for (const auto& stage : cfg.stages) {
    if (done.count(stage)) {
      log << stage << ": up to date\n";
      continue;
    }
    try {
      run.run_stage(stage);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
    done.insert(stage);
    completed.clear();
    for (const auto& s : all_stages())
      if (done.count(s)) completed.push_back(s);
    save_manifest();
  }
  save_manifest();
}

}  // namespace rnntlab
