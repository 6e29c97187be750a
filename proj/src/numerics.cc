#include "rnntlab/numerics.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

namespace rnntlab {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require(bool ok, const char* what) {
  if (!ok) throw Error(what);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw Error("tensor data length does not match shape");
  }
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

std::span<double> Tensor::grad() {
  if (!grad_on_) zero_grad();
  return grad_;
}

void Tensor::zero_grad() {
  grad_.assign(data_.size(), 0.0);
  grad_on_ = true;
}

// ---------------------------------------------------------------------------

double logsumexp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return std::max(a, b) + std::log1p(std::exp(-std::abs(a - b)));
}

double logsumexp(std::span<const double> v) {
  if (v.empty()) throw Error("empty reduction");
  const double m = *std::max_element(v.begin(), v.end());
  if (m == kNegInf) return kNegInf;
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
  if (x.size() != gain.size() || x.size() != bias.size()) {
    throw Error("layer_norm: length mismatch");
  }
  if (!(eps > 0.0)) throw Error("layer_norm: eps must be positive");
  if (x.empty()) return {};
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
  return out;
}

void log_softmax_inplace(std::span<double> v) {
  const double z = logsumexp(v);
  for (double& x : v) x -= z;
}

// ---------------------------------------------------------------------------
// Graph

std::size_t Var::rows() const { return graph->node(id).rows; }
std::size_t Var::cols() const { return graph->node(id).cols; }
std::span<const double> Var::value() const { return graph->node(id).value; }
double Var::scalar() const {
  const auto& n = graph->node(id);
  if (n.value.size() != 1) throw Error("scalar(): value is not 1x1");
  return n.value[0];
}

Var Graph::emplace(std::size_t rows, std::size_t cols, std::vector<double> value,
                   bool needs_grad, std::function<void(Graph&)> backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::input(const Tensor& t) {
  return emplace(t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end()),
                 false, nullptr);
}

Var Graph::input(std::size_t rows, std::size_t cols, std::vector<double> values) {
  require(values.size() == rows * cols, "graph input: size mismatch");
  return emplace(rows, cols, std::move(values), false, nullptr);
}

Var Graph::param(Tensor& t) {
  Var v = emplace(t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end()),
                  true, nullptr);
  nodes_[v.id].param = &t;
  return v;
}

void Graph::backward(Var out) {
  require(out.graph == this, "backward: foreign variable");
  require(nodes_[out.id].value.size() == 1, "backward: output is not a scalar");
  const double one = 1.0;
  backward(out, std::span<const double>(&one, 1));
}

void Graph::backward(Var out, std::span<const double> seed) {
  require(out.graph == this, "backward: foreign variable");
  Node& root = nodes_[out.id];
  require(seed.size() == root.value.size(), "backward: seed shape mismatch");
  if (!root.needs_grad) return;
  for (std::size_t i = 0; i <= out.id; ++i) {
    if (nodes_[i].needs_grad) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
  }
  std::copy(seed.begin(), seed.end(), root.grad.begin());
  run_backward(out.id);
}

void Graph::run_backward(std::size_t last) {
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.param != nullptr) {
      auto g = n.param->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

bool wants(const Graph& g, std::size_t id) { return g.node(id).needs_grad; }

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul: inner dimension mismatch");
  std::vector<double> out(m * n, 0.0);
  {
    const auto& av = g.node(a.id).value;
    const auto& bv = g.node(b.id).value;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double x = av[i * k + p];
        if (x == 0.0) continue;
        const double* br = &bv[p * n];
        double* orow = &out[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += x * br[j];
      }
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace(m, n, std::move(out), wants(g, ai) || wants(g, bi),
                   [ai, bi, m, k, n, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     if (wants(gr, ai)) {
                       auto& da = gr.node(ai).grad;
                       const auto& bv = gr.node(bi).value;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           double s = 0.0;
                           for (std::size_t j = 0; j < n; ++j) s += dout[i * n + j] * bv[p * n + j];
                           da[i * k + p] += s;
                         }
                     }
                     if (wants(gr, bi)) {
                       auto& db = gr.node(bi).grad;
                       const auto& av = gr.node(ai).value;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           const double x = av[i * k + p];
                           if (x == 0.0) continue;
                           for (std::size_t j = 0; j < n; ++j) db[p * n + j] += x * dout[i * n + j];
                         }
                     }
                   });
}

Var linear(Var x, Var weight) {
  Graph& g = *x.graph;
  const std::size_t m = x.rows(), k = x.cols(), n = weight.rows();
  require(weight.cols() == k, "linear: input dimension mismatch");
  std::vector<double> out(m * n);
  {
    const auto& xv = g.node(x.id).value;
    const auto& wv = g.node(weight.id).value;
    for (std::size_t i = 0; i < m; ++i) {
      const double* xr = &xv[i * k];
      for (std::size_t j = 0; j < n; ++j) {
        const double* wr = &wv[j * k];
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += xr[p] * wr[p];
        out[i * n + j] = s;
      }
    }
  }
  const std::size_t xi = x.id, wi = weight.id;
  return g.emplace(m, n, std::move(out), wants(g, xi) || wants(g, wi),
                   [xi, wi, m, k, n, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     if (wants(gr, xi)) {
                       auto& dx = gr.node(xi).grad;
                       const auto& wv = gr.node(wi).value;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) {
                           const double d = dout[i * n + j];
                           if (d == 0.0) continue;
                           const double* wr = &wv[j * k];
                           double* dxr = &dx[i * k];
                           for (std::size_t p = 0; p < k; ++p) dxr[p] += d * wr[p];
                         }
                     }
                     if (wants(gr, wi)) {
                       auto& dw = gr.node(wi).grad;
                       const auto& xv = gr.node(xi).value;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) {
                           const double d = dout[i * n + j];
                           if (d == 0.0) continue;
                           const double* xr = &xv[i * k];
                           double* dwr = &dw[j * k];
                           for (std::size_t p = 0; p < k; ++p) dwr[p] += d * xr[p];
                         }
                     }
                   });
}

namespace {

template <class Fwd, class Bwd>
Var binary_same_shape(Var a, Var b, const char* what, Fwd fwd, Bwd bwd) {
  Graph& g = *a.graph;
  require(a.rows() == b.rows() && a.cols() == b.cols(), what);
  const auto& av = g.node(a.id).value;
  const auto& bv = g.node(b.id).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace(a.rows(), a.cols(), std::move(out), wants(g, ai) || wants(g, bi),
                   [ai, bi, bwd, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     const auto& av2 = gr.node(ai).value;
                     const auto& bv2 = gr.node(bi).value;
                     const bool ga = wants(gr, ai), gb = wants(gr, bi);
                     for (std::size_t i = 0; i < dout.size(); ++i) {
                       auto [da, db] = bwd(av2[i], bv2[i], dout[i]);
                       if (ga) gr.node(ai).grad[i] += da;
                       if (gb) gr.node(bi).grad[i] += db;
                     }
                   });
}

template <class Fwd, class Bwd>
Var unary(Var a, Fwd fwd, Bwd bwd) {
  Graph& g = *a.graph;
  const auto& av = g.node(a.id).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ai = a.id;
  return g.emplace(a.rows(), a.cols(), std::move(out), wants(g, ai),
                   [ai, bwd, self = g.node_count()](Graph& gr) {
                     const auto& n = gr.node(self);
                     auto& da = gr.node(ai).grad;
                     const auto& av2 = gr.node(ai).value;
                     for (std::size_t i = 0; i < n.grad.size(); ++i)
                       da[i] += bwd(av2[i], n.value[i], n.grad[i]);
                   });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_same_shape(
      a, b, "add: shape mismatch", [](double x, double y) { return x + y; },
      [](double, double, double d) { return std::pair{d, d}; });
}

Var sub(Var a, Var b) {
  return binary_same_shape(
      a, b, "sub: shape mismatch", [](double x, double y) { return x - y; },
      [](double, double, double d) { return std::pair{d, -d}; });
}

Var mul(Var a, Var b) {
  return binary_same_shape(
      a, b, "mul: shape mismatch", [](double x, double y) { return x * y; },
      [](double x, double y, double d) { return std::pair{d * y, d * x}; });
}

Var add_row(Var a, Var r) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), n = a.cols();
  require(r.rows() == 1 && r.cols() == n, "add_row: shape mismatch");
  const auto& av = g.node(a.id).value;
  const auto& rv = g.node(r.id).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
  const std::size_t ai = a.id, ri = r.id;
  return g.emplace(m, n, std::move(out), wants(g, ai) || wants(g, ri),
                   [ai, ri, m, n, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     if (wants(gr, ai)) {
                       auto& da = gr.node(ai).grad;
                       for (std::size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
                     }
                     if (wants(gr, ri)) {
                       auto& dr = gr.node(ri).grad;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) dr[j] += dout[i * n + j];
                     }
                   });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double, double d) { return factor * d; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y, double d) { return d * y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y, double d) { return d * (1.0 - y * y); });
}

Var softmax_rows(Var a) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(g.node(a.id).value);
  for (std::size_t i = 0; i < m; ++i) {
    std::span<double> r(&out[i * n], n);
    log_softmax_inplace(r);
    for (double& x : r) x = std::exp(x);
  }
  const std::size_t ai = a.id;
  return g.emplace(m, n, std::move(out), wants(g, ai),
                   [ai, m, n, self = g.node_count()](Graph& gr) {
                     const auto& s = gr.node(self);
                     auto& da = gr.node(ai).grad;
                     for (std::size_t i = 0; i < m; ++i) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < n; ++j) dot += s.grad[i * n + j] * s.value[i * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         da[i * n + j] += s.value[i * n + j] * (s.grad[i * n + j] - dot);
                     }
                   });
}

Var log_softmax_rows(Var a) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(g.node(a.id).value);
  for (std::size_t i = 0; i < m; ++i) log_softmax_inplace(std::span<double>(&out[i * n], n));
  const std::size_t ai = a.id;
  return g.emplace(m, n, std::move(out), wants(g, ai),
                   [ai, m, n, self = g.node_count()](Graph& gr) {
                     const auto& s = gr.node(self);
                     auto& da = gr.node(ai).grad;
                     for (std::size_t i = 0; i < m; ++i) {
                       double total = 0.0;
                       for (std::size_t j = 0; j < n; ++j) total += s.grad[i * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         da[i * n + j] += s.grad[i * n + j] - std::exp(s.value[i * n + j]) * total;
                     }
                   });
}

Var logsumexp_rows(Var a) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), n = a.cols();
  const auto& av = g.node(a.id).value;
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = logsumexp(std::span<const double>(&av[i * n], n));
  const std::size_t ai = a.id;
  return g.emplace(m, 1, std::move(out), wants(g, ai),
                   [ai, m, n, self = g.node_count()](Graph& gr) {
                     const auto& s = gr.node(self);
                     auto& da = gr.node(ai).grad;
                     const auto& av2 = gr.node(ai).value;
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         da[i * n + j] += s.grad[i] * std::exp(av2[i * n + j] - s.value[i]);
                   });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps, std::size_t block) {
  Graph& g = *x.graph;
  const std::size_t m = x.rows(), n = x.cols();
  require(block > 0 && n % block == 0, "layer_norm: block does not divide width");
  require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
          "layer_norm: length mismatch");
  require(eps > 0.0, "layer_norm: eps must be positive");
  const auto& xv = g.node(x.id).value;
  const auto& gv = g.node(gain.id).value;
  const auto& bv = g.node(bias.id).value;
  const std::size_t nblocks = m * (n / block);
  std::vector<double> xhat(m * n), inv_std(nblocks), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t b0 = 0; b0 < n; b0 += block) {
      const double* src = &xv[i * n + b0];
      double mean = 0.0;
      for (std::size_t j = 0; j < block; ++j) mean += src[j];
      mean /= static_cast<double>(block);
      double var = 0.0;
      for (std::size_t j = 0; j < block; ++j) var += (src[j] - mean) * (src[j] - mean);
      var /= static_cast<double>(block);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[(i * n + b0) / block] = inv;
      for (std::size_t j = 0; j < block; ++j) {
        const std::size_t idx = i * n + b0 + j;
        xhat[idx] = (src[j] - mean) * inv;
        out[idx] = gv[b0 + j] * xhat[idx] + bv[b0 + j];
      }
    }
  }
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  const bool need = wants(g, xi) || wants(g, gi) || wants(g, bi);
  return g.emplace(
      m, n, std::move(out), need,
      [xi, gi, bi, m, n, block, xhat = std::move(xhat), inv_std = std::move(inv_std),
       self = g.node_count()](Graph& gr) {
        const auto& dout = gr.node(self).grad;
        const auto& gv2 = gr.node(gi).value;
        if (wants(gr, gi)) {
          auto& dg = gr.node(gi).grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dg[j] += dout[i * n + j] * xhat[i * n + j];
        }
        if (wants(gr, bi)) {
          auto& db = gr.node(bi).grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) db[j] += dout[i * n + j];
        }
        if (wants(gr, xi)) {
          auto& dx = gr.node(xi).grad;
          const double inv_block = 1.0 / static_cast<double>(block);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t b0 = 0; b0 < n; b0 += block) {
              double mean_d = 0.0, mean_dx = 0.0;
              for (std::size_t j = 0; j < block; ++j) {
                const std::size_t idx = i * n + b0 + j;
                const double dh = dout[idx] * gv2[b0 + j];
                mean_d += dh;
                mean_dx += dh * xhat[idx];
              }
              mean_d *= inv_block;
              mean_dx *= inv_block;
              const double inv = inv_std[(i * n + b0) / block];
              for (std::size_t j = 0; j < block; ++j) {
                const std::size_t idx = i * n + b0 + j;
                const double dh = dout[idx] * gv2[b0 + j];
                dx[idx] += inv * (dh - mean_d - xhat[idx] * mean_dx);
              }
            }
          }
        }
      });
}

Var row(Var a, std::size_t r) {
  Graph& g = *a.graph;
  const std::size_t n = a.cols();
  require(r < a.rows(), "row: index out of range");
  const auto& av = g.node(a.id).value;
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(r * n),
                          av.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  const std::size_t ai = a.id;
  return g.emplace(1, n, std::move(out), wants(g, ai),
                   [ai, r, n, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     auto& da = gr.node(ai).grad;
                     for (std::size_t j = 0; j < n; ++j) da[r * n + j] += dout[j];
                   });
}

Var stack_rows(std::span<const Var> rows) {
  require(!rows.empty(), "stack_rows: no rows");
  Graph& g = *rows[0].graph;
  const std::size_t n = rows[0].cols();
  std::vector<double> out;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  bool need = false;
  for (Var r : rows) {
    require(r.cols() == n, "stack_rows: width mismatch");
    const auto& v = g.node(r.id).value;
    offsets.push_back(out.size());
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(r.id);
    total += r.rows();
    need = need || wants(g, r.id);
  }
  return g.emplace(total, n, std::move(out), need,
                   [ids = std::move(ids), offsets = std::move(offsets),
                    self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       if (!wants(gr, ids[k])) continue;
                       auto& d = gr.node(ids[k]).grad;
                       for (std::size_t j = 0; j < d.size(); ++j) d[j] += dout[offsets[k] + j];
                     }
                   });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Graph& g = *a.graph;
  const std::size_t m = a.rows(), n = a.cols();
  require(begin <= end && end <= n, "slice_cols: bad range");
  const std::size_t w = end - begin;
  const auto& av = g.node(a.id).value;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * n + begin + j];
  const std::size_t ai = a.id;
  return g.emplace(m, w, std::move(out), wants(g, ai),
                   [ai, m, n, w, begin, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     auto& da = gr.node(ai).grad;
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < w; ++j) da[i * n + begin + j] += dout[i * w + j];
                   });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Graph& g = *table.graph;
  const std::size_t n = table.cols();
  const auto& tv = g.node(table.id).value;
  std::vector<double> out;
  out.reserve(ids.size() * n);
  for (std::size_t id : ids) {
    require(id < table.rows(), "gather_rows: index out of range");
    out.insert(out.end(), tv.begin() + static_cast<std::ptrdiff_t>(id * n),
               tv.begin() + static_cast<std::ptrdiff_t>((id + 1) * n));
  }
  const std::size_t ti = table.id;
  return g.emplace(ids.size(), n, std::move(out), wants(g, ti),
                   [ti, n, idv = std::vector<std::size_t>(ids.begin(), ids.end()),
                    self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     auto& dt = gr.node(ti).grad;
                     for (std::size_t r = 0; r < idv.size(); ++r)
                       for (std::size_t j = 0; j < n; ++j) dt[idv[r] * n + j] += dout[r * n + j];
                   });
}

Var outer_add_rows(Var a, Var b) {
  Graph& g = *a.graph;
  const std::size_t ma = a.rows(), mb = b.rows(), n = a.cols();
  require(b.cols() == n, "outer_add_rows: width mismatch");
  const auto& av = g.node(a.id).value;
  const auto& bv = g.node(b.id).value;
  std::vector<double> out(ma * mb * n);
  for (std::size_t i = 0; i < ma; ++i)
    for (std::size_t j = 0; j < mb; ++j)
      for (std::size_t k = 0; k < n; ++k) out[(i * mb + j) * n + k] = av[i * n + k] + bv[j * n + k];
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace(ma * mb, n, std::move(out), wants(g, ai) || wants(g, bi),
                   [ai, bi, ma, mb, n, self = g.node_count()](Graph& gr) {
                     const auto& dout = gr.node(self).grad;
                     const bool ga = wants(gr, ai), gb = wants(gr, bi);
                     for (std::size_t i = 0; i < ma; ++i)
                       for (std::size_t j = 0; j < mb; ++j)
                         for (std::size_t k = 0; k < n; ++k) {
                           const double d = dout[(i * mb + j) * n + k];
                           if (ga) gr.node(ai).grad[i * n + k] += d;
                           if (gb) gr.node(bi).grad[j * n + k] += d;
                         }
                   });
}

Var sum(Var a) {
  Graph& g = *a.graph;
  const auto& av = g.node(a.id).value;
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  const std::size_t ai = a.id;
  return g.emplace(1, 1, {s}, wants(g, ai), [ai, self = g.node_count()](Graph& gr) {
    const double d = gr.node(self).grad[0];
    for (double& x : gr.node(ai).grad) x += d;
  });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Graph& g = *logits.graph;
  const std::size_t m = logits.rows(), n = logits.cols();
  require(labels.size() == m, "softmax_cross_entropy: label count mismatch");
  require(m > 0, "softmax_cross_entropy: no rows");
  std::vector<double> logp(g.node(logits.id).value);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(labels[i] < n, "softmax_cross_entropy: label out of range");
    log_softmax_inplace(std::span<double>(&logp[i * n], n));
    loss -= logp[i * n + labels[i]];
  }
  loss /= static_cast<double>(m);
  const std::size_t li = logits.id;
  return g.emplace(1, 1, {loss}, wants(g, li),
                   [li, m, n, logp = std::move(logp),
                    lab = std::vector<std::size_t>(labels.begin(), labels.end()),
                    self = g.node_count()](Graph& gr) {
                     const double d = gr.node(self).grad[0] / static_cast<double>(m);
                     auto& dl = gr.node(li).grad;
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) {
                         const double p = std::exp(logp[i * n + j]);
                         dl[i * n + j] += d * (p - (j == lab[i] ? 1.0 : 0.0));
                       }
                   });
}

// ---------------------------------------------------------------------------

GradReport grad_check(const LossFunction& loss, std::span<const NamedTensor> params,
                      double step) {
  if (!(step > 0.0)) throw Error("grad_check: step must be positive");
  for (const auto& p : params) p.tensor->zero_grad();
  const double base = loss(true);
  if (!std::isfinite(base)) throw Error("grad_check: non-finite loss at the unperturbed point");

  GradReport report;
  for (const auto& p : params) {
    GradEntry entry;
    entry.name = p.name;
    Tensor& t = *p.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      const double up = loss(false);
      t[i] = saved - step;
      const double down = loss(false);
      t[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error("grad_check: non-finite loss perturbing " + p.name + "[" +
                    std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel >= entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    if (entry.max_rel_err >= report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = entry.name;
      report.worst_index = entry.worst_index;
    }
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------

void write_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error("truncated stream reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

namespace {

void write_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error("truncated stream reading f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_tensor_section(std::ostream& out, const std::string& name, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) write_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) write_f64(out, v);
}

std::pair<std::string, Tensor> read_tensor_section(std::istream& in) {
  const std::uint32_t len = read_u32(in);
  if (len > (1u << 20)) throw Error("tensor section: implausible name length");
  std::string name(len, '\0');
  if (!in.read(name.data(), len)) throw Error("tensor section: truncated name");
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw Error("tensor section: implausible rank for " + name);
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = read_u32(in);
  Tensor t(shape);
  for (double& v : t.data()) v = read_f64(in);
  return {std::move(name), std::move(t)};
}

}  // namespace rnntlab
