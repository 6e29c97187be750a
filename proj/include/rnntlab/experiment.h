#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rnntlab/datasets.h"
#include "rnntlab/decoder.h"
#include "rnntlab/evaluation.h"
#include "rnntlab/language_model.h"
#include "rnntlab/trainer.h"

namespace rnntlab {

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what) : Error("stage " + stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Everything a desk-scale run needs: corpora, vocabulary, training knobs.
struct LabConfig {
  SynthSpec synth;
  std::uint64_t data_seed = 7;
  std::uint64_t new_domain_text_seed = 101;
  std::size_t train_utts = 500;
  std::size_t test_utts = 100;
  std::size_t adapt_utts = 300;
  std::size_t new_dev_utts = 100;
  std::size_t new_test_utts = 100;
  std::size_t lm_text_utts = 2000;
  std::size_t vocab_size = 30;
  // Acoustics of the adaptation corpus.
  std::size_t narrow_speakers = 1;
  double narrow_speaker_variance = 0.0;
  double narrow_noise = 0.0;
  std::size_t narrow_unit_frames = 4;

  TrainConfig train;
  TrainConfig adapt;
  FreezeScope adapt_scope = FreezeScope::kPredictionAndJoint;
  double mix_ratio = 0.0;
  TrainConfig lm;
  std::size_t beam = kDefaultBeam;
  std::size_t jobs = 1;

  LabConfig();
  SynthSpec new_domain_spec() const;
  SynthSpec narrow_spec() const;
};

struct LabData {
  Vocabulary vocab;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
  std::vector<Example> adapt;
  std::vector<Example> new_dev;
  std::vector<Example> new_test;
  std::vector<std::string> lm_text;
};

struct LabCorpora {
  Corpus train, test, adapt, new_dev, new_test;
  std::vector<std::string> lm_text;
};

LabCorpora synth_lab_corpora(const LabConfig& cfg);
Vocabulary build_lab_vocab(const LabConfig& cfg, const Corpus& train);
LabData prepare_lab_data(const LabConfig& cfg, const LabCorpora& corpora, const Vocabulary& vocab);
LabData build_lab_data(const LabConfig& cfg);

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

/// Pretrains according to cfg.init, then trains the transducer.
TrainResult train_model(const TrainConfig& cfg, const LabData& data);

/// 1-best per utterance from beam search; beam 0 decodes greedily.
std::vector<Hypothesis> decode_best(const ModelParams& params, const std::vector<Example>& data, std::size_t beam,
                                    std::size_t jobs = 1);
std::vector<NBest> decode_nbest(const ModelParams& params, const std::vector<Example>& data, std::size_t beam,
                                std::size_t jobs = 1);
WerBreakdown score_wer(const std::vector<Hypothesis>& hyps, const std::vector<Example>& data, const Vocabulary& vocab);
/// Emission delay of the hypotheses against the reference timings.
DelayStats score_delay(const std::vector<Hypothesis>& hyps, const std::vector<Example>& data, const Vocabulary& vocab,
                       std::size_t stack_factor);

struct InitRow {
  std::uint64_t seed = 0;
  double wer_random = 0.0;
  double wer_ctc = 0.0;
  double wer_ce = 0.0;
};
std::vector<InitRow> compare_init(const LabConfig& cfg, const LabData& data, const std::vector<std::uint64_t>& seeds);

struct LookaheadRow {
  std::uint64_t seed = 0;
  double wer_base = 0.0;
  double wer_context = 0.0;
  double delay_base = 0.0;
  double delay_context = 0.0;
};
std::vector<LookaheadRow> compare_lookahead(const LabConfig& cfg, const LabData& data, std::size_t tau,
                                            const std::vector<std::uint64_t>& seeds);

void write_init_csv(std::ostream& out, const std::vector<InitRow>& rows);
void write_lookahead_csv(std::ostream& out, const std::vector<LookaheadRow>& rows);

// ---------------------------------------------------------------------------
// Staged runs

inline const std::vector<std::string>& all_stages() {
  static const std::vector<std::string> s{"synth", "vocab", "pretrain", "train", "decode", "rescore", "adapt", "eval"};
  return s;
}

struct ExperimentConfig {
  LabConfig lab;
  std::vector<std::string> stages;
  std::uint64_t seed = 1;
  std::filesystem::path out;
  // Parsed sections, kept for hashing.
  std::map<std::string, std::map<std::string, std::string>> raw;

  std::string canonical() const;
  std::string hash() const;
  void set_seed(std::uint64_t s);
};

/// INI-style sections of "key = value" lines: [experiment], [synth],
/// [train], [adapt], [lm], [decode]. Unknown sections or keys are errors.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Executes the configured stages under cfg.out. Stages already recorded in
/// a manifest with the same config hash are skipped.
void run_experiment(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace rnntlab
