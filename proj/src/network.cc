#include "rnntlab/network.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rnntlab/rng.h"

namespace rnntlab {

// ---------------------------------------------------------------------------
// ArchSpec

namespace {

class SpecParser {
 public:
  explicit SpecParser(std::string_view s) : s_(s) {}

  std::size_t number(const char* what) {
    const std::size_t begin = pos_;
    std::size_t value = 0;
    while (pos_ < s_.size() && s_[pos_] >= '0' && s_[pos_] <= '9') {
      value = value * 10 + static_cast<std::size_t>(s_[pos_] - '0');
      if (value > 1'000'000'000) fail(begin, "number too large");
      ++pos_;
    }
    if (pos_ == begin) fail(begin, std::string("expected ") + what);
    return value;
  }

  bool accept(char c) {
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) fail(pos_, std::string("expected '") + c + "'");
  }

  void finish() {
    if (pos_ != s_.size()) fail(pos_, "unexpected trailing characters");
  }

  [[noreturn]] void fail(std::size_t at, const std::string& msg) const {
    throw Error("arch spec '" + std::string(s_) + "': parse error at position " +
                std::to_string(at) + ": " + msg);
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

ArchSpec parse_arch_spec(std::string_view name) {
  SpecParser p(name);
  ArchSpec spec;
  spec.cells = p.number("cell count");
  p.expect('p');
  spec.proj = p.number("projection size");
  if (p.accept('_')) spec.tau = p.number("lookahead frames");
  p.expect('x');
  spec.layers = p.number("layer count");
  p.finish();
  if (spec.cells == 0 || spec.proj == 0 || spec.layers == 0) {
    throw Error("arch spec '" + std::string(name) + "': counts must be positive");
  }
  return spec;
}

std::string arch_name(const ArchSpec& spec) {
  std::string out = std::to_string(spec.cells) + "p" + std::to_string(spec.proj);
  if (spec.tau > 0) out += "_" + std::to_string(spec.tau);
  return out + "x" + std::to_string(spec.layers);
}

void validate(const ArchSpec& spec) {
  if (spec.cells == 0 || spec.proj == 0 || spec.layers == 0 || spec.pred_layers == 0 ||
      spec.feature_dim == 0 || spec.stack_factor == 0 || spec.frame_ms == 0) {
    throw Error("arch spec " + arch_name(spec) + ": all counts must be positive");
  }
  if (spec.vocab_size < 2) throw Error("arch spec " + arch_name(spec) + ": vocabulary not bound");
}

Lookahead total_lookahead(const ArchSpec& spec) {
  Lookahead la;
  la.frames = spec.layers * spec.tau;
  la.ms = static_cast<double>(la.frames * spec.frame_ms * spec.stack_factor);
  return la;
}

FrameMatrix stack_frames(const FrameMatrix& feat, std::size_t factor) {
  if (factor == 0) throw Error("stack_frames: factor must be positive");
  const std::size_t out_frames = (feat.frames + factor - 1) / factor;
  FrameMatrix out(out_frames, feat.dim * factor);
  for (std::size_t t = 0; t < feat.frames; ++t) {
    const std::size_t dst = t / factor, slot = t % factor;
    std::copy_n(feat.values.begin() + static_cast<std::ptrdiff_t>(t * feat.dim), feat.dim,
                out.values.begin() + static_cast<std::ptrdiff_t>(dst * out.dim + slot * feat.dim));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

Tensor glorot(std::size_t rows, std::size_t cols, std::uint64_t seed, std::string_view name) {
  Rng rng(derive_seed(seed, name));
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

LstmLayerParams init_lstm_layer(std::size_t input, std::size_t cells, std::size_t proj,
                                std::uint64_t seed, std::string_view name) {
  const std::string n(name);
  LstmLayerParams l;
  l.w_in = glorot(4 * cells, input, seed, n + ".w_in");
  l.w_rec = glorot(4 * cells, proj, seed, n + ".w_rec");
  l.ln_gain = Tensor::matrix(1, 4 * cells, 1.0);
  l.ln_bias = Tensor::matrix(1, 4 * cells, 0.0);
  // Forget-gate block starts open.
  for (std::size_t j = cells; j < 2 * cells; ++j) l.ln_bias[j] = 1.0;
  l.w_proj = glorot(proj, cells, seed, n + ".w_proj");
  return l;
}

EncoderParams init_encoder(const ArchSpec& arch, std::uint64_t seed) {
  EncoderParams enc;
  std::size_t in = arch.input_dim();
  for (std::size_t l = 0; l < arch.layers; ++l) {
    const std::string name = "enc." + std::to_string(l);
    enc.layers.push_back(init_lstm_layer(in, arch.cells, arch.proj, seed, name));
    if (arch.tau > 0) {
      Tensor v = Tensor::matrix(arch.tau + 1, arch.proj, 0.0);
      Rng rng(derive_seed(seed, name + ".context"));
      for (std::size_t j = 0; j < arch.proj; ++j) v.at(0, j) = 1.0;
      for (std::size_t d = 1; d <= arch.tau; ++d)
        for (std::size_t j = 0; j < arch.proj; ++j) v.at(d, j) = rng.uniform(0.0, 0.5);
      enc.context.push_back(std::move(v));
    }
    in = arch.proj;
  }
  return enc;
}

ModelParams ModelParams::init(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  ModelParams p;
  p.arch = arch;
  p.encoder = init_encoder(arch, seed);
  p.prediction.embedding = glorot(arch.vocab_size, arch.proj, seed, "pred.embedding");
  for (std::size_t m = 0; m < arch.pred_layers; ++m) {
    p.prediction.layers.push_back(
        init_lstm_layer(arch.proj, arch.cells, arch.proj, seed, "pred." + std::to_string(m)));
  }
  const std::size_t h = arch.joint_width();
  p.joint.w_enc = glorot(h, arch.proj, seed, "joint.w_enc");
  p.joint.w_pred = glorot(h, arch.proj, seed, "joint.w_pred");
  p.joint.bias = Tensor::matrix(1, h, 0.0);
  p.joint.w_out = glorot(arch.vocab_size, h, seed, "joint.w_out");
  return p;
}

namespace {

template <class Layer, class Fn>
void visit_layer(const std::string& prefix, Layer& l, Fn&& fn) {
  fn(prefix + ".w_in", l.w_in);
  fn(prefix + ".w_rec", l.w_rec);
  fn(prefix + ".ln_gain", l.ln_gain);
  fn(prefix + ".ln_bias", l.ln_bias);
  fn(prefix + ".w_proj", l.w_proj);
}

template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.encoder.layers.size(); ++l) {
    const std::string prefix = "enc." + std::to_string(l);
    visit_layer(prefix, p.encoder.layers[l],
                [&](const std::string& n, auto& t) { fn(n, Part::kEncoder, t); });
    if (l < p.encoder.context.size()) fn(prefix + ".context", Part::kEncoder, p.encoder.context[l]);
  }
  fn("pred.embedding", Part::kPrediction, p.prediction.embedding);
  for (std::size_t m = 0; m < p.prediction.layers.size(); ++m) {
    visit_layer("pred." + std::to_string(m), p.prediction.layers[m],
                [&](const std::string& n, auto& t) { fn(n, Part::kPrediction, t); });
  }
  fn("joint.w_enc", Part::kJoint, p.joint.w_enc);
  fn("joint.w_pred", Part::kJoint, p.joint.w_pred);
  fn("joint.bias", Part::kJoint, p.joint.bias);
  fn("joint.w_out", Part::kJoint, p.joint.w_out);
}

std::vector<std::uint32_t> arch_header(const ArchSpec& a) {
  auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  return {u(a.cells),       u(a.proj),         u(a.tau),      u(a.layers),     u(a.pred_layers),
          u(a.feature_dim), u(a.stack_factor), u(a.frame_ms), u(a.vocab_size), u(a.joint_dim)};
}

ArchSpec arch_from_header(const std::vector<std::uint32_t>& h) {
  if (h.size() != 10) throw Error("checkpoint: unexpected arch header size");
  ArchSpec a;
  a.cells = h[0];
  a.proj = h[1];
  a.tau = h[2];
  a.layers = h[3];
  a.pred_layers = h[4];
  a.feature_dim = h[5];
  a.stack_factor = h[6];
  a.frame_ms = h[7];
  a.vocab_size = h[8];
  a.joint_dim = h[9];
  return a;
}

}  // namespace

std::vector<ModelParams::Entry> ModelParams::tensors() {
  std::vector<Entry> out;
  visit_params(*this, [&](const std::string& n, Part part, Tensor& t) { out.push_back({n, part, &t}); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_params(*this, [&](const std::string& n, Part, const Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors()) n += t->size();
  return n;
}

void ModelParams::save(const std::filesystem::path& path) const {
  Checkpoint ck;
  ck.tag = kTransducerTag;
  ck.header = arch_header(arch);
  for (const auto& [name, t] : tensors()) ck.sections.emplace_back(name, *t);
  ck.save(path);
}

ModelParams ModelParams::load(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.tag != kTransducerTag) throw Error(path.string() + ": not a transducer checkpoint");
  ModelParams p = init(arch_from_header(ck.header), 0);
  for (auto& e : p.tensors()) {
    const Tensor& src = ck.section(e.name);
    if (src.shape() != e.tensor->shape()) throw Error(path.string() + ": shape mismatch for " + e.name);
    *e.tensor = src;
  }
  return p;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write("RNTCKPT1", 8);
  write_u32(out, tag);
  write_u32(out, static_cast<std::uint32_t>(header.size()));
  for (auto v : header) write_u32(out, v);
  write_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, t] : sections) write_tensor_section(out, name, t);
  if (!out) throw Error("write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != "RNTCKPT1") {
    throw Error(path.string() + ": bad checkpoint magic");
  }
  Checkpoint ck;
  ck.tag = read_u32(in);
  const std::uint32_t nh = read_u32(in);
  if (nh > 64) throw Error(path.string() + ": implausible header size");
  for (std::uint32_t i = 0; i < nh; ++i) ck.header.push_back(read_u32(in));
  const std::uint32_t ns = read_u32(in);
  for (std::uint32_t i = 0; i < ns; ++i) ck.sections.push_back(read_tensor_section(in));
  return ck;
}

const Tensor& Checkpoint::section(std::string_view name) const {
  for (const auto& [n, t] : sections)
    if (n == name) return t;
  throw Error("checkpoint: missing tensor section " + std::string(name));
}

// ---------------------------------------------------------------------------
// Graph forward

Var Binder::operator()(const Tensor& t, Part part) const {
  // Parameter leaves write gradients into the tensor they were bound from.
  if (trains(part)) return graph_->param(const_cast<Tensor&>(t));
  return graph_->input(t);
}

Var lstm_p_forward(const Binder& bind, const LstmLayerParams& layer, Part part, Var input) {
  Graph& g = bind.graph();
  const std::size_t c = layer.cells(), n = layer.proj();
  if (input.cols() != layer.input_dim()) {
    throw Error("lstm_p_forward: input width " + std::to_string(input.cols()) + " != " +
                std::to_string(layer.input_dim()));
  }
  const Var w_in = bind(layer.w_in, part);
  const Var w_rec = bind(layer.w_rec, part);
  const Var gain = bind(layer.ln_gain, part);
  const Var bias = bind(layer.ln_bias, part);
  const Var w_proj = bind(layer.w_proj, part);

  const Var xw = linear(input, w_in);
  Var h = g.input(1, n, std::vector<double>(n, 0.0));
  Var cell = g.input(1, c, std::vector<double>(c, 0.0));
  std::vector<Var> outputs;
  outputs.reserve(input.rows());
  for (std::size_t t = 0; t < input.rows(); ++t) {
    const Var pre = layer_norm_rows(row(xw, t) + linear(h, w_rec), gain, bias, kLayerNormEps, c);
    const Var i_gate = sigmoid(slice_cols(pre, 0, c));
    const Var f_gate = sigmoid(slice_cols(pre, c, 2 * c));
    const Var g_gate = tanh(slice_cols(pre, 2 * c, 3 * c));
    const Var o_gate = sigmoid(slice_cols(pre, 3 * c, 4 * c));
    cell = f_gate * cell + i_gate * g_gate;
    h = linear(o_gate * tanh(cell), w_proj);
    outputs.push_back(h);
  }
  if (outputs.empty()) return g.input(0, n, {});
  return stack_rows(outputs);
}

Var context_forward(Var weights, Var h) {
  Graph& g = *h.graph;
  const std::size_t frames = h.rows(), n = h.cols(), taps = weights.rows();
  if (weights.cols() != n) {
    throw Error("context_forward: context width " + std::to_string(weights.cols()) +
                " != hidden width " + std::to_string(n));
  }
  const auto& hv = g.node(h.id).value;
  const auto& wv = g.node(weights.id).value;
  std::vector<double> out(frames * n, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t d = 0; d < taps && t + d < frames; ++d) {
      const double* src = &hv[(t + d) * n];
      const double* w = &wv[d * n];
      double* dst = &out[t * n];
      for (std::size_t j = 0; j < n; ++j) dst[j] += w[j] * src[j];
    }
  }
  const std::size_t hi = h.id, wi = weights.id;
  const bool need = g.node(hi).needs_grad || g.node(wi).needs_grad;
  return g.emplace(frames, n, std::move(out), need,
                   [hi, wi, frames, n, taps, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     const bool gh = gr.node(hi).needs_grad, gw = gr.node(wi).needs_grad;
                     const auto& hv2 = gr.node(hi).value;
                     const auto& wv2 = gr.node(wi).value;
                     for (std::size_t t = 0; t < frames; ++t)
                       for (std::size_t d = 0; d < taps && t + d < frames; ++d)
                         for (std::size_t j = 0; j < n; ++j) {
                           const double dy = dout[t * n + j];
                           if (gh) gr.node(hi).grad[(t + d) * n + j] += dy * wv2[d * n + j];
                           if (gw) gr.node(wi).grad[d * n + j] += dy * hv2[(t + d) * n + j];
                         }
                   });
}

Var encoder_forward(const Binder& bind, const EncoderParams& enc, Var input) {
  Var x = input;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    x = lstm_p_forward(bind, enc.layers[l], Part::kEncoder, x);
    if (l < enc.context.size()) x = context_forward(bind(enc.context[l], Part::kEncoder), x);
  }
  return x;
}

Var prediction_forward(const Binder& bind, const PredictionParams& pred, const TokenSeq& labels) {
  std::vector<std::size_t> ids;
  ids.reserve(labels.size() + 1);
  ids.push_back(0);
  for (TokenId y : labels) {
    if (y == kBlankId || y >= pred.embedding.rows()) {
      throw Error("prediction_forward: invalid label id " + std::to_string(y));
    }
    ids.push_back(y);
  }
  Var x = gather_rows(bind(pred.embedding, Part::kPrediction), ids);
  for (const auto& layer : pred.layers) x = lstm_p_forward(bind, layer, Part::kPrediction, x);
  return x;
}

Var joint_forward(const Binder& bind, const JointParams& joint, Var enc, Var pred) {
  const Var e = linear(enc, bind(joint.w_enc, Part::kJoint));
  const Var p = linear(pred, bind(joint.w_pred, Part::kJoint));
  const Var hidden = tanh(add_row(outer_add_rows(e, p), bind(joint.bias, Part::kJoint)));
  return linear(hidden, bind(joint.w_out, Part::kJoint));
}

TransducerVars rnnt_forward_graph(const Binder& bind, const ModelParams& params,
                                  const FrameMatrix& stacked, const TokenSeq& labels) {
  Graph& g = bind.graph();
  if (stacked.dim != params.arch.input_dim()) {
    throw Error("rnnt_forward: feature width " + std::to_string(stacked.dim) + " != " +
                std::to_string(params.arch.input_dim()));
  }
  TransducerVars out;
  out.encoder = encoder_forward(bind, params.encoder, g.input(stacked.frames, stacked.dim, stacked.values));
  out.prediction = prediction_forward(bind, params.prediction, labels);
  out.logits = joint_forward(bind, params.joint, out.encoder, out.prediction);
  for (double v : out.logits.value()) {
    if (!std::isfinite(v)) throw NonFiniteError("rnnt_forward: non-finite joint output");
  }
  return out;
}

LogitLattice rnnt_forward(const ModelParams& params, const FrameMatrix& stacked,
                          const TokenSeq& labels) {
  Graph g;
  const Binder bind(g, 0);
  const auto vars = rnnt_forward_graph(bind, params, stacked, labels);
  LogitLattice lat(stacked.frames, labels.size(), params.arch.vocab_size);
  const auto v = vars.logits.value();
  std::copy(v.begin(), v.end(), lat.logits.begin());
  return lat;
}

std::vector<double> encode_features(const EncoderParams& enc, const FrameMatrix& stacked) {
  Graph g;
  const Binder bind(g, 0);
  const Var out = encoder_forward(bind, enc, g.input(stacked.frames, stacked.dim, stacked.values));
  for (double v : out.value()) {
    if (!std::isfinite(v)) throw Error("encoder: non-finite activation");
  }
  return {out.value().begin(), out.value().end()};
}

// ---------------------------------------------------------------------------
// Step-wise inference

LstmState zero_state(const LstmLayerParams& layer) {
  return {std::vector<double>(layer.proj(), 0.0), std::vector<double>(layer.cells(), 0.0)};
}

namespace {

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const std::vector<double>& lstm_step(const LstmLayerParams& layer, std::span<const double> x,
                                     LstmState& state) {
  const std::size_t c = layer.cells(), n = layer.proj(), in = layer.input_dim();
  if (x.size() != in) throw Error("lstm_step: input width mismatch");
  std::vector<double> pre(4 * c);
  for (std::size_t j = 0; j < 4 * c; ++j) {
    const double* wi = &layer.w_in.data()[j * in];
    double a = 0.0;
    for (std::size_t p = 0; p < in; ++p) a += x[p] * wi[p];
    const double* wr = &layer.w_rec.data()[j * n];
    double b = 0.0;
    for (std::size_t p = 0; p < n; ++p) b += state.h[p] * wr[p];
    pre[j] = a + b;
  }
  for (std::size_t b0 = 0; b0 < 4 * c; b0 += c) {
    const auto normed = layer_norm(std::span<const double>(&pre[b0], c),
                                   layer.ln_gain.data().subspan(b0, c),
                                   layer.ln_bias.data().subspan(b0, c), kLayerNormEps);
    std::copy(normed.begin(), normed.end(), pre.begin() + static_cast<std::ptrdiff_t>(b0));
  }
  std::vector<double> m(c);
  for (std::size_t j = 0; j < c; ++j) {
    const double ig = sigm(pre[j]);
    const double fg = sigm(pre[c + j]);
    const double gg = std::tanh(pre[2 * c + j]);
    const double og = sigm(pre[3 * c + j]);
    state.c[j] = fg * state.c[j] + ig * gg;
    m[j] = og * std::tanh(state.c[j]);
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double* wp = &layer.w_proj.data()[k * c];
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += m[j] * wp[j];
    state.h[k] = s;
  }
  return state.h;
}

namespace {

PredictionState feed(const PredictionParams& pred, PredictionState st, TokenId token) {
  const std::size_t n = pred.embedding.cols();
  if (token >= pred.embedding.rows()) throw Error("prediction: token id out of range");
  std::vector<double> x(pred.embedding.data().begin() + static_cast<std::ptrdiff_t>(token * n),
                        pred.embedding.data().begin() + static_cast<std::ptrdiff_t>((token + 1) * n));
  for (std::size_t l = 0; l < pred.layers.size(); ++l) x = lstm_step(pred.layers[l], x, st.layers[l]);
  st.output = std::move(x);
  return st;
}

}  // namespace

PredictionState prediction_start(const PredictionParams& pred) {
  PredictionState st;
  for (const auto& l : pred.layers) st.layers.push_back(zero_state(l));
  return feed(pred, std::move(st), 0);
}

PredictionState prediction_advance(const PredictionParams& pred, const PredictionState& state,
                                   TokenId token) {
  if (token == kBlankId) throw Error("prediction: blank cannot advance the label history");
  return feed(pred, state, token);
}

std::vector<double> joint_encoder_terms(const JointParams& joint, std::span<const double> enc,
                                        std::size_t frames) {
  const std::size_t h = joint.w_enc.rows(), n = joint.w_enc.cols();
  std::vector<double> out(frames * h);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < h; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += enc[t * n + j] * joint.w_enc.data()[k * n + j];
      out[t * h + k] = s + joint.bias[k];
    }
  return out;
}

std::vector<double> joint_prediction_term(const JointParams& joint,
                                          std::span<const double> pred_out) {
  const std::size_t h = joint.w_pred.rows(), n = joint.w_pred.cols();
  std::vector<double> out(h);
  for (std::size_t k = 0; k < h; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += pred_out[j] * joint.w_pred.data()[k * n + j];
    out[k] = s;
  }
  return out;
}

std::vector<double> joint_log_probs(const JointParams& joint, std::span<const double> enc_term,
                                    std::span<const double> pred_term) {
  const std::size_t h = joint.w_out.cols(), v = joint.w_out.rows();
  std::vector<double> hidden(h);
  for (std::size_t k = 0; k < h; ++k) hidden[k] = std::tanh(enc_term[k] + pred_term[k]);
  std::vector<double> out(v);
  for (std::size_t o = 0; o < v; ++o) {
    const double* w = &joint.w_out.data()[o * h];
    double s = 0.0;
    for (std::size_t k = 0; k < h; ++k) s += hidden[k] * w[k];
    out[o] = s;
  }
  log_softmax_inplace(out);
  return out;
}

}  // namespace rnntlab
