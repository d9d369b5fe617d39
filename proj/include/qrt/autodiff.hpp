#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrt::ad {

using Matrix = Eigen::MatrixXd;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Tanh,
  Relu,
  Sigmoid,
  Softplus,
  ClampMin,
  LogSumExp,
  Sum,
  Mean,
  RowSum,
  MatMul,
  Affine,
  LogisticCdf,
  LogisticLogPdf,
  GaussianCdf,
  GaussianLogPdf,
  Sort,
  Cols,
  Rows,
  ReflectedKdeLogPdf,
};

const char* op_name(Op op);

// Thrown when a node value comes out NaN or infinite. `op` is the tag of the
// first offending node in creation order.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(Op op);
  Op op;
};

class Tape;

// Lightweight handle to a node on a tape. Copyable; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  Op op = Op::Leaf;
  bool needs_grad = false;
  std::vector<std::size_t> parents;
  // Propagates this node's gradient (third argument) into its parents.
  std::function<void(Tape&, std::size_t, const Matrix&)> backward;
};

// Records operations in creation order. Creation order is a topological order,
// so backward() walks the node list once in reverse.
//
// Contract: backward() may be called once per tape. A second call throws
// std::logic_error unless reset_gradients() was called in between.
class Tape {
 public:
  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value);
  Var constant(double value);

  void backward(Var loss);
  void reset_gradients();

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const;
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Logistic kernel evaluations performed by ReflectedKdeLogPdf nodes.
  std::uint64_t kernel_evaluations() const { return kernel_evaluations_; }
  void count_kernel_evaluations(std::uint64_t n) { kernel_evaluations_ += n; }

  // Internal: used by op implementations.
  using Backward = std::function<void(Tape&, std::size_t, const Matrix&)>;
  Var push(Matrix value, Op op, std::vector<std::size_t> parents, Backward backward);
  void accumulate(std::size_t id, const Matrix& g);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::uint64_t kernel_evaluations_ = 0;
};

// Elementwise binary ops broadcast dimensions of size 1 (numpy-style, 2-D).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var add(Var a, double b);
Var mul(Var a, double b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator+(Var a, double b) { return add(a, b); }
inline Var operator*(Var a, double b) { return mul(a, b); }
inline Var operator*(double a, Var b) { return mul(b, a); }

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
// max(a, floor) with zero gradient where the floor is active.
Var clamp_min(Var a, double floor);

// Row-wise log-sum-exp: (n x k) -> (n x 1).
Var logsumexp(Var a);
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);
Var matmul(Var a, Var b);
// x * w + b, with b a (1 x m) row broadcast over rows.
Var affine(Var x, Var w, Var b);

// Standard logistic and Gaussian distribution functions, elementwise.
Var logistic_cdf(Var u);
Var logistic_log_pdf(Var u);
Var gaussian_cdf(Var z);
Var gaussian_log_pdf(Var z);

// Ascending sort of a vector (n x 1 or 1 x n). Ties keep original order.
// `permutation`, when given, receives the source index of each output slot.
Var sort(Var a, std::vector<std::size_t>* permutation = nullptr);

Var cols(Var a, Eigen::Index start, Eigen::Index count);
Var rows(Var a, Eigen::Index start, Eigen::Index count);

// Cuts the graph: same value, no gradient flows back.
Var detach(Var a);

// log phi(q_i) for the reflected logistic KDE on [0, 1]:
//   phi(x) = 1/(n s) sum_j [k((x - c_j)/s) + k((-x - c_j)/s) + k((2 - x - c_j)/s)]
// with k the standard logistic density and s the logistic scale.
// queries: (m x 1), centers: (n x 1). Performs 3 m n kernel evaluations.
Var reflected_kde_log_pdf(Var queries, Var centers, double scale);

// Named trainable arrays with Adam state.
class ParamStore {
 public:
  struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  void add(const std::string& name, Matrix value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Matrix& get(const std::string& name) const;
  Matrix& get(const std::string& name);
  const std::map<std::string, Matrix>& params() const { return params_; }
  std::size_t parameter_count() const;
  std::int64_t step_count() const { return step_; }

  // Creates one tape leaf per parameter.
  std::map<std::string, Var> bind(Tape& tape) const;
  // One Adam step using the gradients accumulated on the bound leaves.
  void adam_step(const std::map<std::string, Var>& bound, const AdamConfig& cfg);

  // Parameters only (optimizer state excluded).
  std::map<std::string, Matrix> snapshot() const { return params_; }
  void restore(const std::map<std::string, Matrix>& values);

 private:
  std::map<std::string, Matrix> params_;
  std::map<std::string, Matrix> first_moment_;
  std::map<std::string, Matrix> second_moment_;
  std::int64_t step_ = 0;
};

struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  Eigen::Index worst_index = 0;  // column-major index inside the leaf
  double analytic = 0.0;
  double numeric = 0.0;
};

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares reverse-mode gradients with central differences at `points`.
// Error per coordinate is |analytic - central| / max(1, |central|); non-finite
// differences count as infinite error.
FiniteDiffResult finite_diff_check(const GraphFn& fn, std::span<const Matrix> points,
                                   double h);
FiniteDiffResult finite_diff_check(const std::function<Var(Tape&, Var)>& fn,
                                   const Matrix& point, double h);

}  // namespace qrt::ad
