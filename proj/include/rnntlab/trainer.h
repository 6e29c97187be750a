#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "rnntlab/alignment.h"
#include "rnntlab/datasets.h"
#include "rnntlab/network.h"
#include "rnntlab/tokenizer.h"

namespace rnntlab {

enum class InitKind { kRandom, kCtc, kCe };

std::string_view init_name(InitKind kind);
InitKind parse_init(std::string_view name);

struct TrainConfig {
  ArchSpec arch;
  InitKind init = InitKind::kRandom;
  double lr = 1e-3;
  double lr_decay = 1.0;        // multiplied in every decay_every epochs
  std::size_t decay_every = 1;
  std::size_t epochs = 1;
  std::size_t batch = 8;
  double clip = 5.0;            // global gradient norm
  std::uint64_t seed = 1;
  std::uint64_t max_batch_bytes = 0;  // lattice budget per minibatch, 0 = off
  double dev_fraction = 0.1;
  std::size_t pretrain_epochs = 0;
  double pretrain_lr = 1e-3;
  std::size_t lm_hidden = 512;
  std::size_t lm_layers = 1;

  void check() const;
  double lr_at(std::size_t epoch) const;
};

/// "key = value" lines; '#' starts a comment. Unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path);
/// Applies one key to a config; false when the key is unknown.
bool set_train_option(TrainConfig& cfg, std::string_view key, std::string_view value);

// ---------------------------------------------------------------------------
// Data

struct Example {
  std::string id;
  std::string transcript;
  FrameMatrix stacked;
  TokenSeq labels;
  std::vector<WordTiming> timings;  // 10 ms frames
  FrameLabels targets;              // encoder-rate CE targets, empty without timings
};

std::vector<Example> prepare_examples(const Corpus& corpus, const Vocabulary& vocab, const ArchSpec& arch);

bool in_dev_split(std::string_view utt_id, std::uint64_t seed, double fraction);

struct Split {
  std::vector<Example> train;
  std::vector<Example> dev;
};
Split split_dev(std::vector<Example> examples, std::uint64_t seed, double fraction);

/// Indices sorted by frame count and cut into minibatches of at most `batch`
/// utterances whose summed lattice bytes stay within `max_bytes` (0 = off).
std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example>& data, std::size_t batch,
                                                   std::uint64_t max_bytes, std::size_t classes);

// ---------------------------------------------------------------------------
// Optimization

/// Scales gradients so their global L2 norm is at most `threshold`; returns
/// the norm before clipping.
double clip_global_norm(const std::vector<Tensor*>& params, double threshold);
double global_grad_norm(const std::vector<Tensor*>& params);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  /// The parameter list must be the same, in the same order, on every call.
  void step(const std::vector<Tensor*>& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

class NonFiniteLossError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

/// Per-example loss that also accumulates gradients into the bound params.
using ExampleLoss = std::function<double(std::size_t index)>;

struct EpochOptions {
  const std::vector<std::vector<std::size_t>>* batches = nullptr;
  double lr = 1e-3;
  double clip = 5.0;
  std::uint64_t shuffle_seed = 0;
};

/// One pass over the batches in a seeded order: minibatch mean loss,
/// clipping, one Adam step per batch. Returns the mean per-utterance loss.
double run_epoch(const std::vector<Tensor*>& params, Adam& opt, const EpochOptions& opts, const ExampleLoss& loss);

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, ModelParams last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const ModelParams& last_good() const { return last_good_; }

 private:
  ModelParams last_good_;
};

// ---------------------------------------------------------------------------
// Training stages

/// Per-utterance loss and gradient of the transducer objective.
double rnnt_example_loss(ModelParams& params, const Example& ex, unsigned trainable);

/// Linear output layer used only during encoder pretraining.
struct PretrainHead {
  Tensor w;  // classes x N
  Tensor b;  // 1 x classes
};

struct CePretrainResult {
  EncoderParams encoder;
  PretrainHead head;
  double final_loss = 0.0;  // mean loss of the last epoch
};
CePretrainResult pretrain_encoder_ce(const TrainConfig& cfg, const std::vector<Example>& data);

/// Share of frames whose argmax head output equals the CE target.
double ce_frame_accuracy(const EncoderParams& enc, const PretrainHead& head, const std::vector<Example>& data);

struct CtcPretrainResult {
  EncoderParams encoder;
  PretrainHead head;
  std::size_t skipped = 0;  // utterances too short for their labels
  double final_loss = 0.0;
};
CtcPretrainResult pretrain_encoder_ctc(const TrainConfig& cfg, const std::vector<Example>& data);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double wer = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> history;
};

/// Greedy-decoding WER over a set of examples.
double greedy_wer(const ModelParams& params, const std::vector<Example>& data, const Vocabulary& vocab);
double mean_rnnt_loss(const ModelParams& params, const std::vector<Example>& data);

/// Transducer training. The encoder starts from `init` when given; the
/// prediction and joint networks always start from the seeded random init.
TrainResult train_rnnt(const TrainConfig& cfg, const std::vector<Example>& train, const std::vector<Example>& dev,
                       const Vocabulary& vocab, const EncoderParams* init = nullptr);

void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& history);

enum class FreezeScope { kAll, kPredictionAndJoint };

std::string_view scope_name(FreezeScope scope);
FreezeScope parse_scope(std::string_view name);

struct MixSpec {
  const std::vector<Example>* corpus = nullptr;
  double ratio = 0.0;  // share of every minibatch drawn from `corpus`
};

/// Fine-tunes the parts inside `scope` on `data`; everything else is left
/// bit-identical.
ModelParams adapt(const ModelParams& params, const TrainConfig& cfg, const std::vector<Example>& data,
                  FreezeScope scope, const MixSpec& mix = {});

}  // namespace rnntlab
