#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rnntlab/error.h"

namespace rnntlab {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Dense row-major tensor of doubles with an optional gradient buffer of the
/// same shape. Gradients accumulate; callers zero them explicitly.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  // 2-D view: rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool has_grad() const { return grad_on_; }
  std::span<double> grad();
  std::span<const double> grad() const { return grad_; }
  void zero_grad();
  void drop_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
    grad_on_ = false;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool grad_on_ = false;
};

// ---------------------------------------------------------------------------
// Scalar/vector helpers.

/// log(sum(exp(v))) with max subtraction. -inf entries are identities.
double logsumexp(std::span<const double> v);
double logsumexp(double a, double b);

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps);

void log_softmax_inplace(std::span<double> v);

// ---------------------------------------------------------------------------
// Reverse-mode tape. Every value in the graph is a 2-D matrix; vectors are
// single rows. Nodes live until the graph is destroyed or cleared.

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const double> value() const;
  double scalar() const;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf; receives no gradient.
  Var input(const Tensor& t);
  Var input(std::size_t rows, std::size_t cols, std::vector<double> values);
  /// Parameter leaf: backward() adds into t.grad(). `t` must outlive the graph.
  Var param(Tensor& t);

  /// Seeds d(out)/d(out) = 1; `out` must be 1x1.
  void backward(Var out);
  /// Seeds an arbitrary upstream gradient for `out`.
  void backward(Var out, std::span<const double> seed);

  void clear() { nodes_.clear(); }
  std::size_t node_count() const { return nodes_.size(); }

  // Internal node access used by the op implementations.
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* param = nullptr;
    std::function<void(Graph&)> backward;
  };
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  Var emplace(std::size_t rows, std::size_t cols, std::vector<double> value, bool needs_grad,
              std::function<void(Graph&)> backward);

 private:
  void run_backward(std::size_t last);

  std::vector<Node> nodes_;
};

// Ops. Weight matrices are stored [out x in]; linear(x, W) = x * W^T.
Var matmul(Var a, Var b);
Var linear(Var x, Var weight);
Var add(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1xN row over every row of a
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sigmoid(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var logsumexp_rows(Var a);  // -> rows x 1
/// Normalizes each contiguous block of `block` columns in every row; gain and
/// bias are 1 x cols.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps, std::size_t block);
Var row(Var a, std::size_t r);
Var stack_rows(std::span<const Var> rows);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// out[i * b.rows() + j] = a[i] + b[j]
Var outer_add_rows(Var a, Var b);
Var sum(Var a);
/// Mean over rows of -log softmax(logits[r])[labels[r]].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

struct GradEntry {
  std::string name;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_rel_err = 0.0;
};

struct GradReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::vector<GradEntry> per_param;
};

/// `loss(true)` must evaluate the loss and add analytic gradients into the
/// parameters' grad slots; `loss(false)` only evaluates.
using LossFunction = std::function<double(bool accumulate_grad)>;

GradReport grad_check(const LossFunction& loss, std::span<const NamedTensor> params,
                      double step);

// ---------------------------------------------------------------------------
// Checkpoint tensor sections: u32 name length, UTF-8 name, u32 rank, u32
// extents, then little-endian f64 payload.

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in);
void write_tensor_section(std::ostream& out, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> read_tensor_section(std::istream& in);

}  // namespace rnntlab
