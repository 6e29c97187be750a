#include "rnntlab/transducer_loss.h"

#include <cmath>

namespace rnntlab {

namespace {

void check_lattice(const LogitLattice& lat, const TokenSeq& labels) {
  if (lat.frames == 0) throw Error("rnnt loss: lattice has no frames");
  if (lat.labels != labels.size()) {
    throw Error("rnnt loss: lattice built for U=" + std::to_string(lat.labels) + " but got " +
                std::to_string(labels.size()) + " labels");
  }
  if (lat.logits.size() != lat.frames * (lat.labels + 1) * lat.classes) {
    throw Error("rnnt loss: lattice size does not match its shape");
  }
  for (TokenId y : labels) {
    if (y == kBlankId || y >= lat.classes) throw Error("rnnt loss: invalid label " + std::to_string(y));
  }
}

std::vector<double> log_probs(const LogitLattice& lat) {
  std::vector<double> lp(lat.logits);
  for (std::size_t i = 0; i < lp.size(); i += lat.classes) {
    log_softmax_inplace(std::span<double>(lp.data() + i, lat.classes));
  }
  return lp;
}

}  // namespace

namespace {

struct DpTables {
  std::vector<double> lp;
  TransducerDp dp;
};

DpTables run_dp(const LogitLattice& lat, const TokenSeq& labels) {
  check_lattice(lat, labels);
  DpTables out;
  out.lp = log_probs(lat);
  const auto& lp = out.lp;
  const std::size_t T = lat.frames, U = labels.size(), V1 = lat.classes, W = U + 1;
  auto blank = [&](std::size_t t, std::size_t u) { return lp[(t * W + u) * V1 + kBlankId]; };
  auto emit = [&](std::size_t t, std::size_t u) { return lp[(t * W + u) * V1 + labels[u]]; };

  TransducerDp& dp = out.dp;
  dp.frames = T;
  dp.labels = U;
  dp.alpha.assign(T * W, kNegInf);
  dp.beta.assign(T * W, kNegInf);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) {
        dp.alpha[0] = 0.0;
        continue;
      }
      double a = kNegInf;
      if (t > 0) a = dp.alpha[(t - 1) * W + u] + blank(t - 1, u);
      if (u > 0) a = logsumexp(a, dp.alpha[t * W + u - 1] + emit(t, u - 1));
      dp.alpha[t * W + u] = a;
    }
  }
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t u = U + 1; u-- > 0;) {
      if (t == T - 1 && u == U) {
        dp.beta[t * W + u] = blank(t, u);
        continue;
      }
      double b = kNegInf;
      if (t + 1 < T) b = dp.beta[(t + 1) * W + u] + blank(t, u);
      if (u < U) b = logsumexp(b, dp.beta[t * W + u + 1] + emit(t, u));
      dp.beta[t * W + u] = b;
    }
  }
  dp.forward_loglik = dp.alpha[(T - 1) * W + U] + blank(T - 1, U);
  dp.backward_loglik = dp.beta[0];
  dp.occupancy.resize(T * W);
  for (std::size_t i = 0; i < T * W; ++i) {
    dp.occupancy[i] = std::exp(dp.alpha[i] + dp.beta[i] - dp.forward_loglik);
  }
  return out;
}

}  // namespace

TransducerDp rnnt_alpha_beta(const LogitLattice& lat, const TokenSeq& labels) {
  return run_dp(lat, labels).dp;
}

LossResult rnnt_loss_grad(const LogitLattice& lat, const TokenSeq& labels) {
  const DpTables tables = run_dp(lat, labels);
  const auto& lp = tables.lp;
  const auto& dp = tables.dp;
  const std::size_t T = lat.frames, U = labels.size(), V1 = lat.classes, W = U + 1;
  const double logz = dp.forward_loglik;
  if (!std::isfinite(logz)) throw Error("rnnt loss: non-finite log-likelihood");

  LossResult r;
  r.loss = -logz;
  r.grad.assign(lat.logits.size(), 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      const std::size_t node = t * W + u;
      const double a = dp.alpha[node];
      double* g = r.grad.data() + node * V1;
      const double* l = lp.data() + node * V1;
      // d(-log P)/d lp: minus the posterior of taking each outgoing arc.
      const double beta_next_blank =
          (t + 1 < T) ? dp.beta[(t + 1) * W + u] : (u == U ? 0.0 : kNegInf);
      const double arc_blank = std::exp(a + l[kBlankId] + beta_next_blank - logz);
      double arc_label = 0.0;
      if (u < U) arc_label = std::exp(a + l[labels[u]] + dp.beta[node + 1] - logz);
      const double occ = arc_blank + arc_label;
      for (std::size_t k = 0; k < V1; ++k) g[k] = std::exp(l[k]) * occ;
      g[kBlankId] -= arc_blank;
      if (u < U) g[labels[u]] -= arc_label;
    }
  }
  return r;
}

namespace {

void enumerate_paths(const std::vector<double>& lp, const TokenSeq& labels, std::size_t T,
                     std::size_t V1, std::size_t t, std::size_t u, double acc,
                     std::vector<double>& path_scores, std::uint64_t& count) {
  const std::size_t W = labels.size() + 1;
  const double* l = lp.data() + (t * W + u) * V1;
  if (u < labels.size()) {
    enumerate_paths(lp, labels, T, V1, t, u + 1, acc + l[labels[u]], path_scores, count);
  }
  if (t + 1 < T) {
    enumerate_paths(lp, labels, T, V1, t + 1, u, acc + l[kBlankId], path_scores, count);
  } else if (u == labels.size()) {
    path_scores.push_back(acc + l[kBlankId]);
    ++count;
  }
}

}  // namespace

BruteForceResult rnnt_loss_bruteforce(const LogitLattice& lat, const TokenSeq& labels) {
  check_lattice(lat, labels);
  if (lat.frames + labels.size() > kBruteForceMaxSteps) {
    throw Error("rnnt_loss_bruteforce: T + U = " + std::to_string(lat.frames + labels.size()) +
                " exceeds the enumeration guard of " + std::to_string(kBruteForceMaxSteps));
  }
  const auto lp = log_probs(lat);
  std::vector<double> scores;
  BruteForceResult r;
  enumerate_paths(lp, labels, lat.frames, lat.classes, 0, 0, 0.0, scores, r.paths);
  r.loss = -logsumexp(scores);
  return r;
}

// ---------------------------------------------------------------------------

std::size_t ctc_min_frames(const TokenSeq& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return n;
}

namespace {

void check_view(const LogitSeqView& v, const char* who) {
  if (v.values.size() != v.frames * v.classes) {
    throw Error(std::string(who) + ": logits size does not match frames x classes");
  }
}

}  // namespace

LossResult ctc_loss_grad(LogitSeqView logits, const TokenSeq& labels) {
  check_view(logits, "ctc loss");
  const std::size_t T = logits.frames, C = logits.classes;
  for (TokenId y : labels) {
    if (y == kBlankId || y >= C) throw Error("ctc loss: invalid label " + std::to_string(y));
  }
  const std::size_t need = ctc_min_frames(labels);
  if (T < need || T == 0) {
    throw Error("ctc loss: " + std::to_string(T) + " frames but the label sequence needs at least " +
                std::to_string(std::max<std::size_t>(need, 1)));
  }
  std::vector<double> lp(logits.values.begin(), logits.values.end());
  for (std::size_t t = 0; t < T; ++t) log_softmax_inplace(std::span<double>(lp.data() + t * C, C));

  std::vector<TokenId> ext(2 * labels.size() + 1, kBlankId);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  const std::size_t S = ext.size();
  auto skip_ok = [&](std::size_t s) { return s >= 2 && ext[s] != kBlankId && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = lp[ext[0]];
  if (S > 1) alpha[1] = lp[ext[1]];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = logsumexp(a, alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) a = logsumexp(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNegInf ? kNegInf : a + lp[t * C + ext[s]];
    }
  }
  beta[(T - 1) * S + S - 1] = lp[(T - 1) * C + ext[S - 1]];
  if (S > 1) beta[(T - 1) * S + S - 2] = lp[(T - 1) * C + ext[S - 2]];
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s];
      if (s + 1 < S) b = logsumexp(b, beta[(t + 1) * S + s + 1]);
      if (s + 2 < S && skip_ok(s + 2)) b = logsumexp(b, beta[(t + 1) * S + s + 2]);
      beta[t * S + s] = b == kNegInf ? kNegInf : b + lp[t * C + ext[s]];
    }
  }
  double logz = alpha[(T - 1) * S + S - 1];
  if (S > 1) logz = logsumexp(logz, alpha[(T - 1) * S + S - 2]);
  if (!std::isfinite(logz)) throw Error("ctc loss: non-finite log-likelihood");

  LossResult r;
  r.loss = -logz;
  r.grad.assign(T * C, 0.0);
  std::vector<double> gamma(C);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(gamma.begin(), gamma.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      const double ab = alpha[t * S + s] + beta[t * S + s];
      if (ab == kNegInf) continue;
      gamma[ext[s]] += std::exp(ab - lp[t * C + ext[s]] - logz);
    }
    for (std::size_t k = 0; k < C; ++k) r.grad[t * C + k] = std::exp(lp[t * C + k]) - gamma[k];
  }
  return r;
}

LossResult ce_frame_loss(LogitSeqView logits, const FrameLabels& targets) {
  check_view(logits, "ce loss");
  const std::size_t T = logits.frames, C = logits.classes;
  if (targets.frames() != T) {
    throw Error("ce loss: " + std::to_string(targets.frames()) + " targets for " +
                std::to_string(T) + " frames");
  }
  if (T == 0) throw Error("ce loss: no frames");
  LossResult r;
  r.grad.assign(T * C, 0.0);
  std::vector<double> lp(C);
  const double inv_t = 1.0 / static_cast<double>(T);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t y = targets.labels[t];
    if (y >= C) throw Error("ce loss: label " + std::to_string(y) + " >= class count " + std::to_string(C));
    std::copy_n(logits.values.begin() + static_cast<std::ptrdiff_t>(t * C), C, lp.begin());
    log_softmax_inplace(lp);
    r.loss -= lp[y] * inv_t;
    for (std::size_t k = 0; k < C; ++k) r.grad[t * C + k] = (std::exp(lp[k]) - (k == y)) * inv_t;
  }
  return r;
}

std::uint64_t lattice_memory_bytes(std::uint64_t frames, std::uint64_t labels, std::uint64_t vocab,
                                   std::uint64_t bytes_per) {
  return frames * (labels + 1) * (vocab + 1) * bytes_per;
}

}  // namespace rnntlab
