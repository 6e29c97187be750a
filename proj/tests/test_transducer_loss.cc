#include <cmath>
#include <functional>
#include <map>

#include "doctest.h"
#include "rnntlab/rng.h"
#include "rnntlab/transducer_loss.h"
#include "test_util.h"

using namespace rnntlab;
using namespace rnntlab::testing;

namespace {

// Independent CTC oracle: sum over every length-T string that collapses to
// the labels.
double ctc_bruteforce(const std::vector<double>& logits, std::size_t T, std::size_t C,
                      const TokenSeq& labels) {
  std::vector<double> lp(logits);
  for (std::size_t t = 0; t < T; ++t) log_softmax_inplace(std::span<double>(lp.data() + t * C, C));
  std::vector<std::size_t> path(T, 0);
  std::vector<double> hits;
  while (true) {
    TokenSeq collapsed;
    std::size_t prev = kBlankId;
    double score = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      score += lp[t * C + path[t]];
      if (path[t] != kBlankId && path[t] != prev) collapsed.push_back(path[t]);
      prev = path[t];
    }
    if (collapsed == labels) hits.push_back(score);
    std::size_t k = 0;
    while (k < T && ++path[k] == C) path[k++] = 0;
    if (k == T) break;
  }
  return -logsumexp(hits);
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

TEST_CASE("rnnt loss: single node is -log softmax_blank") {
  Rng rng(1);
  const auto lat = random_lattice(rng, 1, 0, 4);
  std::vector<double> lp(lat.logits);
  log_softmax_inplace(lp);
  CHECK(rnnt_loss_grad(lat, {}).loss == doctest::Approx(-lp[0]).epsilon(1e-14));
  const auto bf = rnnt_loss_bruteforce(lat, {});
  CHECK(bf.paths == 1);
  CHECK(bf.loss == doctest::Approx(-lp[0]).epsilon(1e-14));
}

TEST_CASE("rnnt brute force enumerates C(T+U-1, U) paths") {
  Rng rng(2);
  const auto lat = random_lattice(rng, 2, 1, 3);
  CHECK(rnnt_loss_bruteforce(lat, {2}).paths == 2);
  for (std::size_t T = 1; T <= 5; ++T)
    for (std::size_t U = 0; U <= 4; ++U) {
      const auto l = random_lattice(rng, T, U, 3);
      CHECK(rnnt_loss_bruteforce(l, random_labels(rng, U, 3)).paths == binomial(T + U - 1, U));
    }
  const auto big = random_lattice(rng, 10, 7, 3);
  CHECK_THROWS_AS(rnnt_loss_bruteforce(big, random_labels(rng, 7, 3)), Error);
}

TEST_CASE("rnnt loss equals brute force on uniform and random lattices") {
  Rng rng(3);
  LogitLattice uniform(3, 2, 4);
  CHECK(std::abs(rnnt_loss_grad(uniform, {1, 3}).loss - rnnt_loss_bruteforce(uniform, {1, 3}).loss) < 1e-10);
  // Uniform case closed form: C(T+U-1, U) paths, each of probability V1^-(T+U).
  CHECK(rnnt_loss_grad(uniform, {1, 3}).loss ==
        doctest::Approx(5.0 * std::log(4.0) - std::log(6.0)).epsilon(1e-12));
  const auto lat = random_lattice(rng, 3, 2, 4);
  const TokenSeq y{2, 1};
  CHECK(std::abs(rnnt_loss_grad(lat, y).loss - rnnt_loss_bruteforce(lat, y).loss) < 1e-6);
}

TEST_CASE("rnnt alpha/beta consistency and occupancy cuts") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    const auto T = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const auto U = static_cast<std::size_t>(rng.uniform_int(0, 5));
    const auto lat = random_lattice(rng, T, U, 5);
    const auto y = random_labels(rng, U, 5);
    const auto dp = rnnt_alpha_beta(lat, y);
    CHECK(std::abs(dp.forward_loglik - dp.backward_loglik) < 1e-10);
    for (std::size_t k = 0; k + 1 <= T - 1 + U + 1; ++k) {
      double total = 0.0;
      for (std::size_t t = 0; t < T; ++t)
        if (k >= t && k - t <= U) total += dp.occupancy[t * (U + 1) + (k - t)];
      CHECK(std::abs(total - 1.0) < 1e-8);
    }
    // Summing (softmax*occ - grad) over classes recovers the node posterior.
    const auto r = rnnt_loss_grad(lat, y);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t u = 0; u <= U; ++u) {
        std::vector<double> p(lat.at(t, u).begin(), lat.at(t, u).end());
        log_softmax_inplace(p);
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += std::exp(p[k]) * dp.occupancy[t * (U + 1) + u] - r.grad[lat.offset(t, u) + k];
        CHECK(std::abs(s - dp.occupancy[t * (U + 1) + u]) < 1e-8);
      }
  }
}

TEST_CASE("rnnt loss gradient passes finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    auto lat = random_lattice(rng, 3, 2, 4);
    const auto y = random_labels(rng, 2, 4);
    Tensor logits({lat.logits.size()}, lat.logits);
    NamedTensor p{"logits", &logits};
    const auto report = grad_check(
        [&](bool acc) {
          std::copy(logits.data().begin(), logits.data().end(), lat.logits.begin());
          const auto r = rnnt_loss_grad(lat, y);
          if (acc)
            for (std::size_t i = 0; i < r.grad.size(); ++i) logits.grad()[i] += r.grad[i];
          return r.loss;
        },
        std::span<const NamedTensor>(&p, 1), 1e-4);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("rnnt loss shape errors") {
  Rng rng(1);
  const auto lat = random_lattice(rng, 3, 2, 4);
  CHECK_THROWS_AS(rnnt_loss_grad(lat, {1}), Error);
  CHECK_THROWS_AS(rnnt_loss_grad(lat, {1, 0}), Error);
  CHECK_THROWS_AS(rnnt_loss_grad(lat, {1, 4}), Error);
}

TEST_CASE("ctc loss examples") {
  Rng rng(4);
  std::vector<double> one(4);
  for (double& v : one) v = rng.normal();
  std::vector<double> lp(one);
  log_softmax_inplace(lp);
  CHECK(ctc_loss_grad({one, 1, 4}, {2}).loss == doctest::Approx(-lp[2]).epsilon(1e-14));

  std::vector<double> seq(3 * 4);
  for (double& v : seq) v = rng.normal();
  double want = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> row(seq.begin() + t * 4, seq.begin() + (t + 1) * 4);
    log_softmax_inplace(row);
    want -= row[0];
  }
  CHECK(ctc_loss_grad({seq, 3, 4}, {}).loss == doctest::Approx(want).epsilon(1e-13));
  CHECK(ctc_min_frames({1, 1, 2}) == 4);
  CHECK_THROWS_WITH_AS(ctc_loss_grad({seq, 3, 4}, {1, 1, 2}), doctest::Contains("at least 4"), Error);
}

TEST_CASE("ctc loss equals collapse enumeration and passes finite differences") {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    Rng rng(seed);
    const auto T = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const std::size_t C = 4;
    std::vector<double> logits(T * C);
    for (double& v : logits) v = rng.normal(0.0, 1.5);
    TokenSeq y = random_labels(rng, static_cast<std::size_t>(rng.uniform_int(0, 3)), C);
    while (ctc_min_frames(y) > T) y.pop_back();
    CHECK(std::abs(ctc_loss_grad({logits, T, C}, y).loss - ctc_bruteforce(logits, T, C, y)) < 1e-6);

    Tensor p({logits.size()}, logits);
    NamedTensor named{"logits", &p};
    const auto report = grad_check(
        [&](bool acc) {
          const auto r = ctc_loss_grad({p.data(), T, C}, y);
          if (acc)
            for (std::size_t i = 0; i < r.grad.size(); ++i) p.grad()[i] += r.grad[i];
          return r.loss;
        },
        std::span<const NamedTensor>(&named, 1), 1e-4);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("frame cross entropy examples") {
  FrameLabels fl;
  fl.labels = {0, 2, 1};
  std::vector<double> sharp(3 * 3, 0.0);
  for (std::size_t t = 0; t < 3; ++t) sharp[t * 3 + fl.labels[t]] = 50.0;
  CHECK(ce_frame_loss({sharp, 3, 3}, fl).loss < 1e-20);
  const std::vector<double> flat(3 * 3, 0.2);
  CHECK(ce_frame_loss({flat, 3, 3}, fl).loss == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  Rng rng(3);
  std::vector<double> logits(3 * 3);
  for (double& v : logits) v = rng.normal();
  double want = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    double z = 0.0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits[t * 3 + k]);
    want += std::log(z) - logits[t * 3 + fl.labels[t]];
  }
  CHECK(std::abs(ce_frame_loss({logits, 3, 3}, fl).loss - want / 3.0) < 1e-12);

  fl.labels[1] = 3;
  CHECK_THROWS_AS(ce_frame_loss({logits, 3, 3}, fl), Error);
}

TEST_CASE("lattice memory accounting") {
  CHECK(lattice_memory_bytes(100, 7, 4000, 4) == 12'803'200);
  CHECK(lattice_memory_bytes(100, 13, 4000, 4) == 22'405'600);
  CHECK(lattice_memory_bytes(50, 0, 10, 8) == 50 * 1 * 11 * 8);
  CHECK(lattice_memory_bytes(200, 7, 4000, 4) == 2 * lattice_memory_bytes(100, 7, 4000, 4));
  for (std::uint64_t u = 1; u < 20; ++u) CHECK(lattice_memory_bytes(100, u - 1, 30, 4) < lattice_memory_bytes(100, u, 30, 4));
}

TEST_CASE("full rnnt forward + loss passes grad_check on a toy model") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto arch = tiny_arch(1, 2, 4);
    auto params = ModelParams::init(arch, seed);
    Rng rng(seed + 100);
    const auto x = random_features(rng, 3, arch.input_dim());
    const TokenSeq y = random_labels(rng, 2, 4);
    std::vector<NamedTensor> named;
    for (auto& e : params.tensors()) named.push_back({e.name, e.tensor});
    const auto report = grad_check(
        [&](bool acc) {
          Graph g;
          const Binder bind(g, acc ? kAllParts : 0);
          const auto vars = rnnt_forward_graph(bind, params, x, y);
          LogitLattice lat(x.frames, y.size(), arch.vocab_size);
          std::copy(vars.logits.value().begin(), vars.logits.value().end(), lat.logits.begin());
          const auto r = rnnt_loss_grad(lat, y);
          if (acc) g.backward(vars.logits, r.grad);
          return r.loss;
        },
        named, 1e-4);
    INFO("worst " << report.worst_param << "[" << report.worst_index << "]");
    CHECK(report.max_rel_err < 1e-4);
  }
}
