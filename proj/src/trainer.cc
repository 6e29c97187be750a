#include "rnntlab/trainer.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "rnntlab/decoder.h"
#include "rnntlab/evaluation.h"
#include "rnntlab/rng.h"
#include "rnntlab/transducer_loss.h"

namespace rnntlab {

std::string_view init_name(InitKind kind) {
  switch (kind) {
    case InitKind::kRandom: return "random";
    case InitKind::kCtc: return "ctc";
    case InitKind::kCe: return "ce";
  }
  return "random";
}

InitKind parse_init(std::string_view name) {
  if (name == "random") return InitKind::kRandom;
  if (name == "ctc") return InitKind::kCtc;
  if (name == "ce") return InitKind::kCe;
  throw Error("unknown init '" + std::string(name) + "' (random, ctc, ce)");
}

std::string_view scope_name(FreezeScope scope) {
  return scope == FreezeScope::kAll ? "all" : "prediction_and_joint";
}

FreezeScope parse_scope(std::string_view name) {
  if (name == "all") return FreezeScope::kAll;
  if (name == "prediction_and_joint") return FreezeScope::kPredictionAndJoint;
  throw Error("unknown scope '" + std::string(name) + "' (all, prediction_and_joint)");
}

void TrainConfig::check() const {
  if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw Error("train config: learning rates must be positive");
  if (!(lr_decay > 0.0)) throw Error("train config: lr_decay must be positive");
  if (decay_every == 0) throw Error("train config: decay_every must be >= 1");
  if (batch == 0) throw Error("train config: batch must be >= 1");
  if (!(clip > 0.0)) throw Error("train config: clip must be positive");
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw Error("train config: dev_fraction must be in [0, 1)");
  if (lm_hidden == 0 || lm_layers == 0) throw Error("train config: lm_hidden and lm_layers must be >= 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw Error("bad value for " + std::string(key) + ": '" + std::string(v) + "'");
  return out;
}

}  // namespace

bool set_train_option(TrainConfig& cfg, std::string_view key, std::string_view value) {
  auto sz = [&] { return parse_number<std::size_t>(key, value); };
  auto real = [&] { return parse_number<double>(key, value); };
  if (key == "arch") {
    ArchSpec a = parse_arch_spec(value);
    a.pred_layers = cfg.arch.pred_layers;
    a.feature_dim = cfg.arch.feature_dim;
    a.stack_factor = cfg.arch.stack_factor;
    a.frame_ms = cfg.arch.frame_ms;
    a.vocab_size = cfg.arch.vocab_size;
    a.joint_dim = cfg.arch.joint_dim;
    cfg.arch = a;
  } else if (key == "pred_layers") {
    cfg.arch.pred_layers = sz();
  } else if (key == "feature_dim") {
    cfg.arch.feature_dim = sz();
  } else if (key == "stack_factor") {
    cfg.arch.stack_factor = sz();
  } else if (key == "joint_dim") {
    cfg.arch.joint_dim = sz();
  } else if (key == "init") {
    cfg.init = parse_init(value);
  } else if (key == "lr") {
    cfg.lr = real();
  } else if (key == "lr_decay") {
    cfg.lr_decay = real();
  } else if (key == "decay_every") {
    cfg.decay_every = sz();
  } else if (key == "epochs") {
    cfg.epochs = sz();
  } else if (key == "batch") {
    cfg.batch = sz();
  } else if (key == "clip") {
    cfg.clip = real();
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "max_batch_bytes") {
    cfg.max_batch_bytes = parse_number<std::uint64_t>(key, value);
  } else if (key == "dev_fraction") {
    cfg.dev_fraction = real();
  } else if (key == "pretrain_epochs") {
    cfg.pretrain_epochs = sz();
  } else if (key == "pretrain_lr") {
    cfg.pretrain_lr = real();
  } else if (key == "lm_hidden") {
    cfg.lm_hidden = sz();
  } else if (key == "lm_layers") {
    cfg.lm_layers = sz();
  } else {
    return false;
  }
  return true;
}

TrainConfig parse_train_config(std::string_view text, TrainConfig cfg) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!set_train_option(cfg, key, value))
      throw Error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  cfg.check();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::vector<Example> prepare_examples(const Corpus& corpus, const Vocabulary& vocab, const ArchSpec& arch) {
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) {
    if (u.features.dim != arch.feature_dim) {
      throw Error(u.id + ": feature dim " + std::to_string(u.features.dim) + " != " +
                  std::to_string(arch.feature_dim));
    }
    Example ex;
    ex.id = u.id;
    ex.transcript = normalize_text(u.transcript);
    ex.labels = encode(ex.transcript, vocab);
    ex.stacked = stack_frames(u.features, arch.stack_factor);
    ex.timings = u.timings;
    if (!u.timings.empty() || ex.labels.empty()) {
      ex.targets = downsample_labels(frame_labels(u.timings, vocab, u.features.frames), arch.stack_factor);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

bool in_dev_split(std::string_view utt_id, std::uint64_t seed, double fraction) {
  const std::uint64_t h = derive_seed(seed, utt_id) % 1000000;
  return static_cast<double>(h) < fraction * 1000000.0;
}

Split split_dev(std::vector<Example> examples, std::uint64_t seed, double fraction) {
  Split s;
  for (auto& ex : examples) (in_dev_split(ex.id, seed, fraction) ? s.dev : s.train).push_back(std::move(ex));
  return s;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example>& data, std::size_t batch,
                                                   std::uint64_t max_bytes, std::size_t classes) {
  if (batch == 0) throw Error("make_batches: batch must be >= 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (data[a].stacked.frames != data[b].stacked.frames) return data[a].stacked.frames < data[b].stacked.frames;
    return data[a].id < data[b].id;
  });
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::uint64_t bytes = 0;
  for (std::size_t i : order) {
    const std::uint64_t b = lattice_memory_bytes(data[i].stacked.frames, data[i].labels.size(),
                                                 classes == 0 ? 0 : classes - 1, sizeof(double));
    if (!cur.empty() && (cur.size() == batch || (max_bytes && bytes + b > max_bytes))) {
      out.push_back(std::move(cur));
      cur.clear();
      bytes = 0;
    }
    cur.push_back(i);
    bytes += b;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double global_grad_norm(const std::vector<Tensor*>& params) {
  double sq = 0.0;
  for (Tensor* p : params)
    if (p->has_grad())
      for (double g : std::as_const(*p).grad()) sq += g * g;
  return std::sqrt(sq);
}

double clip_global_norm(const std::vector<Tensor*>& params, double threshold) {
  const double norm = global_grad_norm(params);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (Tensor* p : params)
      if (p->has_grad())
        for (double& g : p->grad()) g *= s;
  }
  return norm;
}

void Adam::step(const std::vector<Tensor*>& params, double lr) {
  if (m_.empty()) {
    for (Tensor* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw Error("Adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    const auto g = std::as_const(p).grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double run_epoch(const std::vector<Tensor*>& params, Adam& opt, const EpochOptions& opts, const ExampleLoss& loss) {
  if (!opts.batches) throw Error("run_epoch: no batches");
  std::vector<std::size_t> order(opts.batches->size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(opts.shuffle_seed);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b : order) {
    const auto& batch = (*opts.batches)[b];
    if (batch.empty()) continue;
    for (Tensor* p : params) p->zero_grad();
    for (std::size_t idx : batch) {
      double l = 0.0;
      try {
        l = loss(idx);
      } catch (const NonFiniteError& e) {
        throw NonFiniteLossError("example " + std::to_string(idx) + ": " + e.what());
      }
      if (!std::isfinite(l)) throw NonFiniteLossError("non-finite loss on example " + std::to_string(idx));
      total += l;
      ++count;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (Tensor* p : params)
      if (p->has_grad())
        for (double& g : p->grad()) g *= inv;
    clip_global_norm(params, opts.clip);
    opt.step(params, opts.lr);
  }
  for (Tensor* p : params) p->drop_grad();
  return count ? total / static_cast<double>(count) : 0.0;
}

double rnnt_example_loss(ModelParams& params, const Example& ex, unsigned trainable) {
  Graph g;
  const Binder bind(g, trainable);
  const auto vars = rnnt_forward_graph(bind, params, ex.stacked, ex.labels);
  LogitLattice lat(ex.stacked.frames, ex.labels.size(), params.arch.vocab_size);
  const auto v = vars.logits.value();
  std::copy(v.begin(), v.end(), lat.logits.begin());
  const auto r = rnnt_loss_grad(lat, ex.labels);
  if (std::isfinite(r.loss) && trainable) g.backward(vars.logits, r.grad);
  return r.loss;
}

namespace {

std::vector<Tensor*> encoder_tensors(EncoderParams& enc) {
  std::vector<Tensor*> out;
  for (auto& l : enc.layers)
    for (Tensor* t : {&l.w_in, &l.w_rec, &l.ln_gain, &l.ln_bias, &l.w_proj}) out.push_back(t);
  for (auto& c : enc.context) out.push_back(&c);
  return out;
}

std::vector<Tensor*> tensors_in(ModelParams& params, unsigned parts) {
  std::vector<Tensor*> out;
  for (auto& e : params.tensors())
    if (parts & part_bit(e.part)) out.push_back(e.tensor);
  return out;
}

void check_arch(const TrainConfig& cfg) {
  cfg.check();
  validate(cfg.arch);
  if (cfg.arch.vocab_size < 2) throw Error("train: arch vocab_size is not bound to a vocabulary");
}

/// Encoder + linear head trained against a per-utterance loss on its logits.
template <typename HeadLoss>
EncoderParams pretrain_with_head(const TrainConfig& cfg, const std::vector<Example>& data,
                                 const std::vector<std::size_t>& usable, std::size_t classes,
                                 std::string_view tag, HeadLoss&& head_loss, PretrainHead& head,
                                 double& final_loss) {
  EncoderParams enc = ModelParams::init(cfg.arch, cfg.seed).encoder;
  head.w = glorot(classes, cfg.arch.proj, cfg.seed, std::string(tag) + ".w");
  head.b = Tensor::matrix(1, classes);
  if (cfg.pretrain_epochs == 0 || usable.empty()) return enc;
  Tensor& w = head.w;
  Tensor& b = head.b;
  auto params = encoder_tensors(enc);
  params.push_back(&w);
  params.push_back(&b);

  std::vector<Example> subset;
  for (std::size_t i : usable) subset.push_back(data[i]);
  const auto batches = make_batches(subset, cfg.batch, cfg.max_batch_bytes, classes);
  Adam opt;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    EpochOptions o{&batches, cfg.pretrain_lr, cfg.clip, derive_seed(cfg.seed, std::string(tag) + std::to_string(epoch))};
    const double l = run_epoch(params, opt, o, [&](std::size_t idx) {
      const Example& ex = subset[idx];
      Graph g;
      const Binder bind(g, part_bit(Part::kEncoder));
      const Var x = g.input(ex.stacked.frames, ex.stacked.dim, ex.stacked.values);
      const Var logits = add_row(linear(encoder_forward(bind, enc, x), g.param(w)), g.param(b));
      const LossResult r = head_loss(ex, LogitSeqView{logits.value(), ex.stacked.frames, classes});
      if (std::isfinite(r.loss)) g.backward(logits, r.grad);
      return r.loss;
    });
    final_loss = l;
  }
  return enc;
}

}  // namespace

CePretrainResult pretrain_encoder_ce(const TrainConfig& cfg, const std::vector<Example>& data) {
  check_arch(cfg);
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].targets.frames() != data[i].stacked.frames) throw Error("pretrain_encoder_ce: no timings for " + data[i].id);
    usable.push_back(i);
  }
  const std::size_t classes = cfg.arch.vocab_size + 1;
  CePretrainResult res;
  res.encoder = pretrain_with_head(
      cfg, data, usable, classes, "ce_head",
      [](const Example& ex, LogitSeqView v) { return ce_frame_loss(v, ex.targets); }, res.head, res.final_loss);
  return res;
}

double ce_frame_accuracy(const EncoderParams& enc, const PretrainHead& head, const std::vector<Example>& data) {
  const std::size_t classes = head.w.rows(), n = head.w.cols();
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data) {
    if (ex.targets.frames() != ex.stacked.frames) throw Error("ce_frame_accuracy: no targets for " + ex.id);
    const auto h = encode_features(enc, ex.stacked);
    for (std::size_t t = 0; t < ex.stacked.frames; ++t) {
      std::size_t best = 0;
      double best_v = kNegInf;
      for (std::size_t k = 0; k < classes; ++k) {
        double v = head.b[k];
        for (std::size_t j = 0; j < n; ++j) v += head.w.at(k, j) * h[t * n + j];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      hit += best == ex.targets.labels[t];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

CtcPretrainResult pretrain_encoder_ctc(const TrainConfig& cfg, const std::vector<Example>& data) {
  check_arch(cfg);
  CtcPretrainResult res;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (ctc_min_frames(data[i].labels) > data[i].stacked.frames) {
      ++res.skipped;
    } else {
      usable.push_back(i);
    }
  }
  res.encoder = pretrain_with_head(cfg, data, usable, cfg.arch.vocab_size, "ctc_head",
                                   [](const Example& ex, LogitSeqView v) { return ctc_loss_grad(v, ex.labels); },
                                   res.head, res.final_loss);
  return res;
}

double greedy_wer(const ModelParams& params, const std::vector<Example>& data, const Vocabulary& vocab) {
  std::vector<std::string> refs, hyps;
  for (const auto& ex : data) {
    refs.push_back(ex.transcript);
    hyps.push_back(decode(greedy_decode(params, ex.stacked).tokens, vocab));
  }
  return wer(refs, hyps).wer;
}

double mean_rnnt_loss(const ModelParams& params, const std::vector<Example>& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : data) {
    const auto lat = rnnt_forward(params, ex.stacked, ex.labels);
    total += rnnt_loss_grad(lat, ex.labels).loss;
  }
  return total / static_cast<double>(data.size());
}

namespace {

void check_same_shapes(const EncoderParams& a, const EncoderParams& b) {
  auto& ma = const_cast<EncoderParams&>(a);
  auto& mb = const_cast<EncoderParams&>(b);
  const auto ta = encoder_tensors(ma), tb = encoder_tensors(mb);
  if (ta.size() != tb.size()) throw Error("train_rnnt: init encoder has a different layer layout");
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (ta[i]->shape() != tb[i]->shape()) throw Error("train_rnnt: init encoder tensor shape mismatch");
}

}  // namespace

TrainResult train_rnnt(const TrainConfig& cfg, const std::vector<Example>& train, const std::vector<Example>& dev,
                       const Vocabulary& vocab, const EncoderParams* init) {
  check_arch(cfg);
  if (cfg.arch.vocab_size != vocab.size()) throw Error("train_rnnt: arch vocab_size differs from the vocabulary");
  TrainResult res;
  res.params = ModelParams::init(cfg.arch, cfg.seed);
  if (init) {
    check_same_shapes(res.params.encoder, *init);
    res.params.encoder = *init;
  }
  if (train.empty()) return res;
  const auto params = res.params.tensors();
  std::vector<Tensor*> list;
  for (const auto& e : params) list.push_back(e.tensor);
  const auto batches = make_batches(train, cfg.batch, cfg.max_batch_bytes, cfg.arch.vocab_size);
  Adam opt;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ModelParams last_good = res.params;
    double loss = 0.0;
    try {
      EpochOptions o{&batches, cfg.lr_at(epoch), cfg.clip, derive_seed(cfg.seed, "rnnt" + std::to_string(epoch))};
      loss = run_epoch(list, opt, o, [&](std::size_t i) { return rnnt_example_loss(res.params, train[i], kAllParts); });
    } catch (const NonFiniteLossError& e) {
      throw DivergenceError("train_rnnt diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what(),
                            std::move(last_good));
    }
    res.history.push_back({epoch + 1, "train", loss});
    if (!dev.empty()) res.history.push_back({epoch + 1, "dev", mean_rnnt_loss(res.params, dev), greedy_wer(res.params, dev, vocab)});
  }
  return res;
}

void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& history) {
  out << "epoch,split,loss,wer\n";
  char buf[96];
  for (const auto& m : history) {
    if (std::isnan(m.wer)) {
      std::snprintf(buf, sizeof buf, "%.6f,", m.loss);
    } else {
      std::snprintf(buf, sizeof buf, "%.6f,%.4f", m.loss, m.wer);
    }
    out << m.epoch << ',' << m.split << ',' << buf << '\n';
  }
}

ModelParams adapt(const ModelParams& params, const TrainConfig& cfg, const std::vector<Example>& data,
                  FreezeScope scope, const MixSpec& mix) {
  cfg.check();
  if (data.empty()) throw Error("adapt: empty adaptation data");
  if (mix.corpus && !(mix.ratio > 0.0 && mix.ratio <= 1.0)) throw Error("adapt: mix ratio must be in (0, 1]");
  if (mix.corpus && mix.corpus->empty()) throw Error("adapt: empty mix corpus");
  ModelParams out = params;
  if (cfg.epochs == 0) return out;
  const unsigned trainable = scope == FreezeScope::kAll ? kAllParts : part_bit(Part::kPrediction) | part_bit(Part::kJoint);
  const auto list = tensors_in(out, trainable);
  const std::size_t n = data.size();
  auto example = [&](std::size_t i) -> const Example& { return i < n ? data[i] : (*mix.corpus)[i - n]; };

  Adam opt;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> batches;
    if (!mix.corpus) {
      batches = make_batches(data, cfg.batch, cfg.max_batch_bytes, out.arch.vocab_size);
    } else {
      const auto from_mix = static_cast<std::size_t>(std::lround(mix.ratio * static_cast<double>(cfg.batch)));
      const std::size_t mixed = std::clamp<std::size_t>(from_mix, 1, cfg.batch);
      const std::size_t primary = cfg.batch - mixed;
      const std::size_t n_batches = (n + std::max<std::size_t>(primary, 1) - 1) / std::max<std::size_t>(primary, 1);
      Rng rng(derive_seed(cfg.seed, "mix" + std::to_string(epoch)));
      std::size_t next = 0;
      for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::size_t> batch;
        for (std::size_t k = 0; k < primary && next < n; ++k) batch.push_back(next++);
        for (std::size_t k = 0; k < mixed; ++k)
          batch.push_back(n + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(mix.corpus->size()) - 1)));
        batches.push_back(std::move(batch));
      }
    }
    EpochOptions o{&batches, cfg.lr_at(epoch), cfg.clip, derive_seed(cfg.seed, "adapt" + std::to_string(epoch))};
    try {
      run_epoch(list, opt, o, [&](std::size_t i) { return rnnt_example_loss(out, example(i), trainable); });
    } catch (const NonFiniteLossError& e) {
      throw DivergenceError(std::string("adapt diverged: ") + e.what(), params);
    }
  }
  return out;
}

}  // namespace rnntlab
