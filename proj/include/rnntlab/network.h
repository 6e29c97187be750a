#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rnntlab/numerics.h"
#include "rnntlab/tokenizer.h"

namespace rnntlab {

/// Encoder/prediction description. The name form is MpN[_F]xL: M cells, N
/// projection width, F lookahead frames per layer, L encoder layers.
struct ArchSpec {
  std::size_t cells = 0;
  std::size_t proj = 0;
  std::size_t tau = 0;
  std::size_t layers = 0;
  std::size_t pred_layers = 2;
  std::size_t feature_dim = 8;
  std::size_t stack_factor = 3;
  std::size_t frame_ms = 10;
  // Output classes including blank; 0 until bound to a vocabulary.
  std::size_t vocab_size = 0;
  // Joint hidden width; 0 means "same as proj".
  std::size_t joint_dim = 0;

  std::size_t joint_width() const { return joint_dim == 0 ? proj : joint_dim; }
  std::size_t input_dim() const { return feature_dim * stack_factor; }
  std::size_t encoder_frame_ms() const { return frame_ms * stack_factor; }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

ArchSpec parse_arch_spec(std::string_view name);
std::string arch_name(const ArchSpec& spec);
void validate(const ArchSpec& spec);

struct Lookahead {
  std::size_t frames = 0;
  double ms = 0.0;
};

/// L x tau encoder frames; milliseconds at the stacked frame rate.
Lookahead total_lookahead(const ArchSpec& spec);

/// Row-major T x D feature matrix.
struct FrameMatrix {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  FrameMatrix() = default;
  FrameMatrix(std::size_t t, std::size_t d) : frames(t), dim(d), values(t * d, 0.0) {}
  double& at(std::size_t t, std::size_t d) { return values[t * dim + d]; }
  double at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }
  std::span<const double> row(std::size_t t) const { return {values.data() + t * dim, dim}; }

  friend bool operator==(const FrameMatrix&, const FrameMatrix&) = default;
};

/// Concatenates `factor` consecutive frames; T' = ceil(T / factor) and the
/// last window is zero padded.
FrameMatrix stack_frames(const FrameMatrix& feat, std::size_t factor);

// ---------------------------------------------------------------------------
// Parameters

/// Layer-normalized LSTM with a cells -> proj output projection. Gate blocks
/// are ordered input, forget, cell, output; each block is normalized on its
/// own with its own gain/bias slice.
struct LstmLayerParams {
  Tensor w_in;     // 4C x in
  Tensor w_rec;    // 4C x N
  Tensor ln_gain;  // 1 x 4C
  Tensor ln_bias;  // 1 x 4C
  Tensor w_proj;   // N x C

  std::size_t cells() const { return w_proj.cols(); }
  std::size_t proj() const { return w_proj.rows(); }
  std::size_t input_dim() const { return w_in.cols(); }
};

struct EncoderParams {
  std::vector<LstmLayerParams> layers;
  // Per-layer context weights, (tau + 1) x N; empty when tau == 0.
  std::vector<Tensor> context;
};

struct PredictionParams {
  Tensor embedding;  // vocab_size x N, row 0 is the start symbol
  std::vector<LstmLayerParams> layers;
};

struct JointParams {
  Tensor w_enc;   // H x N
  Tensor w_pred;  // H x N
  Tensor bias;    // 1 x H
  Tensor w_out;   // vocab_size x H
};

enum class Part : unsigned { kEncoder = 1u, kPrediction = 2u, kJoint = 4u };
inline constexpr unsigned kAllParts = 7u;
inline constexpr unsigned part_bit(Part p) { return static_cast<unsigned>(p); }

struct ModelParams {
  ArchSpec arch;
  EncoderParams encoder;
  PredictionParams prediction;
  JointParams joint;

  static ModelParams init(const ArchSpec& arch, std::uint64_t seed);

  struct Entry {
    std::string name;
    Part part;
    Tensor* tensor;
  };
  std::vector<Entry> tensors();
  std::vector<std::pair<std::string, const Tensor*>> tensors() const;
  std::size_t parameter_count() const;

  void save(const std::filesystem::path& path) const;
  static ModelParams load(const std::filesystem::path& path);
};

LstmLayerParams init_lstm_layer(std::size_t input, std::size_t cells, std::size_t proj,
                                std::uint64_t seed, std::string_view name);
EncoderParams init_encoder(const ArchSpec& arch, std::uint64_t seed);

/// Glorot-uniform matrix, seeded per tensor name.
Tensor glorot(std::size_t rows, std::size_t cols, std::uint64_t seed, std::string_view name);

// ---------------------------------------------------------------------------
// Checkpoint container shared by transducer and LM checkpoints: "RNTCKPT1",
// u32 tag, u32 header field count, header fields, u32 section count, tensor
// sections.

inline constexpr std::uint32_t kTransducerTag = 0;
inline constexpr std::uint32_t kLanguageModelTag = 1;

struct Checkpoint {
  std::uint32_t tag = 0;
  std::vector<std::uint32_t> header;
  std::vector<std::pair<std::string, Tensor>> sections;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  const Tensor& section(std::string_view name) const;
};

// ---------------------------------------------------------------------------
// Graph forward passes. Tensors of parts selected in `trainable` become
// parameter leaves; everything else is bound as a constant.

class Binder {
 public:
  Binder(Graph& g, unsigned trainable) : graph_(&g), trainable_(trainable) {}
  Graph& graph() const { return *graph_; }
  Var operator()(const Tensor& t, Part part) const;
  bool trains(Part part) const { return (trainable_ & part_bit(part)) != 0; }

 private:
  Graph* graph_;
  unsigned trainable_;
};

inline constexpr double kLayerNormEps = 1e-5;

/// Runs one LSTM-P layer over `input` (T x in) from a zero state -> T x N.
Var lstm_p_forward(const Binder& bind, const LstmLayerParams& layer, Part part, Var input);

/// g_t = sum_delta v_delta (.) h_{t+delta}, zero beyond the sequence end.
Var context_forward(Var weights, Var h);

Var encoder_forward(const Binder& bind, const EncoderParams& enc, Var input);
/// Rows u = 0..U: start symbol followed by the labels.
Var prediction_forward(const Binder& bind, const PredictionParams& pred, const TokenSeq& labels);
/// (T * (U+1)) x vocab_size logits, row t * (U+1) + u.
Var joint_forward(const Binder& bind, const JointParams& joint, Var enc, Var pred);

struct TransducerVars {
  Var encoder;
  Var prediction;
  Var logits;
};

TransducerVars rnnt_forward_graph(const Binder& bind, const ModelParams& params,
                                  const FrameMatrix& stacked, const TokenSeq& labels);

/// T x (U+1) x (V+1) joint outputs.
struct LogitLattice {
  std::size_t frames = 0;
  std::size_t labels = 0;
  std::size_t classes = 0;  // V + 1, blank at index 0
  std::vector<double> logits;

  LogitLattice() = default;
  LogitLattice(std::size_t t, std::size_t u, std::size_t v1)
      : frames(t), labels(u), classes(v1), logits(t * (u + 1) * v1, 0.0) {}
  std::size_t offset(std::size_t t, std::size_t u) const { return (t * (labels + 1) + u) * classes; }
  std::span<const double> at(std::size_t t, std::size_t u) const {
    return {logits.data() + offset(t, u), classes};
  }
  std::span<double> at(std::size_t t, std::size_t u) { return {logits.data() + offset(t, u), classes}; }
};

/// Full value-level forward: `feat` must already be stacked.
LogitLattice rnnt_forward(const ModelParams& params, const FrameMatrix& stacked,
                          const TokenSeq& labels);

/// Encoder outputs (T x N) for a stacked feature matrix.
std::vector<double> encode_features(const EncoderParams& enc, const FrameMatrix& stacked);

// ---------------------------------------------------------------------------
// Step-wise inference used by the decoders and the language model.

struct LstmState {
  std::vector<double> h;  // N
  std::vector<double> c;  // C
};

LstmState zero_state(const LstmLayerParams& layer);
/// Advances one layer by one step; returns the new projected output.
const std::vector<double>& lstm_step(const LstmLayerParams& layer, std::span<const double> x,
                                     LstmState& state);

/// Prediction-network state after consuming a label prefix.
struct PredictionState {
  std::vector<LstmState> layers;
  std::vector<double> output;  // h_u^pre
};

PredictionState prediction_start(const PredictionParams& pred);
PredictionState prediction_advance(const PredictionParams& pred, const PredictionState& state,
                                   TokenId token);

/// Precomputed encoder side of the joint network: W_enc h_t + b for every t.
std::vector<double> joint_encoder_terms(const JointParams& joint, std::span<const double> enc,
                                        std::size_t frames);
std::vector<double> joint_prediction_term(const JointParams& joint,
                                          std::span<const double> pred_out);
/// Log-probabilities over the vocab_size outputs at one lattice node.
std::vector<double> joint_log_probs(const JointParams& joint, std::span<const double> enc_term,
                                    std::span<const double> pred_term);

}  // namespace rnntlab
