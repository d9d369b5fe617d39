#include "qrt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace qrt::ad {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kSoftplusLinear = 30.0;

using Array = Eigen::ArrayXXd;

Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw std::invalid_argument("autodiff: incompatible shapes for broadcasting");
}

Matrix expand(const Matrix& m, Eigen::Index r, Eigen::Index c) {
  if (m.rows() == r && m.cols() == c) return m;
  return m.replicate(r / m.rows(), c / m.cols());
}

Matrix reduce_to(const Matrix& g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  Matrix out = g;
  if (r == 1 && out.rows() != 1) out = out.colwise().sum().eval();
  if (c == 1 && out.cols() != 1) out = out.rowwise().sum().eval();
  return out;
}

Array stable_sigmoid(const Array& x) {
  const Array t = (-x.abs()).exp();
  return (x >= 0).select(1.0 / (1.0 + t), t / (1.0 + t));
}

template <class Fwd, class Bwd>
Var unary(Var a, Op op, Fwd fwd, Bwd bwd) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix v = fwd(a.value().array()).matrix();
  return t.push(std::move(v), op, {ia},
                [ia, bwd](Tape& tape, std::size_t self, const Matrix& g) {
                  tape.accumulate(ia, bwd(tape.value(ia).array(), tape.value(self).array(),
                                          g.array())
                                          .matrix());
                });
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::ClampMin: return "clamp_min";
    case Op::LogSumExp: return "logsumexp";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowSum: return "row_sum";
    case Op::MatMul: return "matmul";
    case Op::Affine: return "affine";
    case Op::LogisticCdf: return "logistic_cdf";
    case Op::LogisticLogPdf: return "logistic_log_pdf";
    case Op::GaussianCdf: return "gaussian_cdf";
    case Op::GaussianLogPdf: return "gaussian_log_pdf";
    case Op::Sort: return "sort";
    case Op::Cols: return "cols";
    case Op::Rows: return "rows";
    case Op::ReflectedKdeLogPdf: return "reflected_kde_log_pdf";
  }
  return "unknown";
}

NonFiniteError::NonFiniteError(Op o)
    : std::runtime_error(std::string("non-finite value produced by op '") + op_name(o) + "'"),
      op(o) {}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar on non-scalar node");
  return v(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  if (!value.allFinite()) throw NonFiniteError(Op::Leaf);
  Node n;
  n.value = std::move(value);
  n.op = requires_grad ? Op::Leaf : Op::Constant;
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return leaf(std::move(value), false); }

Var Tape::constant(double value) { return leaf(Matrix::Constant(1, 1, value), false); }

Var Tape::push(Matrix value, Op op, std::vector<std::size_t> parents, Backward backward) {
  if (!value.allFinite()) throw NonFiniteError(op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.needs_grad = std::any_of(parents.begin(), parents.end(),
                             [this](std::size_t p) { return nodes_[p].needs_grad; });
  n.parents = std::move(parents);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

const Matrix& Tape::grad(std::size_t id) const { return nodes_[id].grad; }

void Tape::backward(Var loss) {
  if (backward_done_) {
    throw std::logic_error("Tape::backward called twice without reset_gradients()");
  }
  if (loss.value().size() != 1) throw std::invalid_argument("backward requires a scalar loss");
  backward_done_ = true;
  const std::size_t root = loss.id();
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
}

void Tape::reset_gradients() {
  for (Node& n : nodes_) n.grad.resize(0, 0);
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise binary

namespace {

template <class Fwd, class Bwd>
Var binary(Var a, Var b, Op op, Fwd fwd, Bwd bwd) {
  if (a.tape() != b.tape()) throw std::invalid_argument("autodiff: operands on different tapes");
  Tape& t = *a.tape();
  const Eigen::Index r = broadcast_dim(a.rows(), b.rows());
  const Eigen::Index c = broadcast_dim(a.cols(), b.cols());
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Matrix v = fwd(expand(a.value(), r, c).array(), expand(b.value(), r, c).array()).matrix();
  return t.push(std::move(v), op, {ia, ib},
                [ia, ib, r, c, bwd](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& va = tape.value(ia);
                  const Matrix& vb = tape.value(ib);
                  const Array ea = expand(va, r, c).array();
                  const Array eb = expand(vb, r, c).array();
                  if (tape.needs_grad(ia)) {
                    Matrix ga = bwd(ea, eb, g.array(), 0).matrix();
                    tape.accumulate(ia, reduce_to(ga, va.rows(), va.cols()));
                  }
                  if (tape.needs_grad(ib)) {
                    Matrix gb = bwd(ea, eb, g.array(), 1).matrix();
                    tape.accumulate(ib, reduce_to(gb, vb.rows(), vb.cols()));
                  }
                });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, Op::Add, [](const Array& x, const Array& y) -> Array { return x + y; },
      [](const Array&, const Array&, const Array& g, int) -> Array { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, Op::Sub, [](const Array& x, const Array& y) -> Array { return x - y; },
      [](const Array&, const Array&, const Array& g, int which) -> Array {
        return which == 0 ? Array(g) : Array(-g);
      });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, Op::Mul, [](const Array& x, const Array& y) -> Array { return x * y; },
      [](const Array& x, const Array& y, const Array& g, int which) -> Array {
        return which == 0 ? Array(g * y) : Array(g * x);
      });
}

Var div(Var a, Var b) {
  return binary(
      a, b, Op::Div, [](const Array& x, const Array& y) -> Array { return x / y; },
      [](const Array& x, const Array& y, const Array& g, int which) -> Array {
        return which == 0 ? Array(g / y) : Array(-g * x / (y * y));
      });
}

Var neg(Var a) {
  return unary(
      a, Op::Neg, [](const Array& x) -> Array { return -x; },
      [](const Array&, const Array&, const Array& g) -> Array { return -g; });
}

Var add(Var a, double b) {
  return unary(
      a, Op::Add, [b](const Array& x) -> Array { return x + b; },
      [](const Array&, const Array&, const Array& g) -> Array { return g; });
}

Var mul(Var a, double b) {
  return unary(
      a, Op::Mul, [b](const Array& x) -> Array { return x * b; },
      [b](const Array&, const Array&, const Array& g) -> Array { return g * b; });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var exp(Var a) {
  return unary(
      a, Op::Exp, [](const Array& x) -> Array { return x.exp(); },
      [](const Array&, const Array& v, const Array& g) -> Array { return g * v; });
}

Var log(Var a) {
  return unary(
      a, Op::Log, [](const Array& x) -> Array { return x.log(); },
      [](const Array& x, const Array&, const Array& g) -> Array { return g / x; });
}

Var tanh(Var a) {
  return unary(
      a, Op::Tanh, [](const Array& x) -> Array { return x.tanh(); },
      [](const Array&, const Array& v, const Array& g) -> Array { return g * (1.0 - v * v); });
}

Var relu(Var a) {
  return unary(
      a, Op::Relu, [](const Array& x) -> Array { return x.max(0.0); },
      [](const Array& x, const Array&, const Array& g) -> Array {
        return (x > 0.0).select(g, 0.0);
      });
}

Var sigmoid(Var a) {
  return unary(
      a, Op::Sigmoid, [](const Array& x) -> Array { return stable_sigmoid(x); },
      [](const Array&, const Array& v, const Array& g) -> Array { return g * v * (1.0 - v); });
}

Var softplus(Var a) {
  return unary(
      a, Op::Softplus,
      [](const Array& x) -> Array {
        // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); linear beyond the threshold.
        const Array smooth = x.max(0.0) + (-x.abs()).exp().log1p();
        return (x > kSoftplusLinear).select(x, smooth);
      },
      [](const Array& x, const Array&, const Array& g) -> Array {
        return (x > kSoftplusLinear).select(g, g * stable_sigmoid(x));
      });
}

Var clamp_min(Var a, double floor) {
  return unary(
      a, Op::ClampMin, [floor](const Array& x) -> Array { return x.max(floor); },
      [floor](const Array& x, const Array&, const Array& g) -> Array {
        return (x >= floor).select(g, 0.0);
      });
}

Var logistic_cdf(Var u) {
  return unary(
      u, Op::LogisticCdf, [](const Array& x) -> Array { return stable_sigmoid(x); },
      [](const Array&, const Array& v, const Array& g) -> Array { return g * v * (1.0 - v); });
}

Var logistic_log_pdf(Var u) {
  return unary(
      u, Op::LogisticLogPdf,
      [](const Array& x) -> Array { return -x.abs() - 2.0 * (-x.abs()).exp().log1p(); },
      [](const Array& x, const Array&, const Array& g) -> Array {
        return g * (1.0 - 2.0 * stable_sigmoid(x));
      });
}

Var gaussian_cdf(Var z) {
  return unary(
      z, Op::GaussianCdf,
      [](const Array& x) -> Array {
        return x.unaryExpr([](double v) { return 0.5 * std::erfc(-v * M_SQRT1_2); });
      },
      [](const Array& x, const Array&, const Array& g) -> Array {
        return g * kInvSqrt2Pi * (-0.5 * x * x).exp();
      });
}

Var gaussian_log_pdf(Var z) {
  return unary(
      z, Op::GaussianLogPdf, [](const Array& x) -> Array { return -0.5 * x * x - kHalfLog2Pi; },
      [](const Array& x, const Array&, const Array& g) -> Array { return -g * x; });
}

// ---------------------------------------------------------------------------
// Reductions and linear algebra

Var logsumexp(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  const Eigen::VectorXd m = x.rowwise().maxCoeff();
  const Eigen::VectorXd s = (x.colwise() - m).array().exp().rowwise().sum();
  Matrix v = (m.array() + s.array().log()).matrix();
  return t.push(std::move(v), Op::LogSumExp, {ia},
                [ia](Tape& tape, std::size_t self, const Matrix& g) {
                  const Matrix& xv = tape.value(ia);
                  const Matrix& out = tape.value(self);
                  Matrix soft = (xv.colwise() - out.col(0)).array().exp().matrix();
                  tape.accumulate(ia, (soft.array().colwise() * g.col(0).array()).matrix());
                });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.push(Matrix::Constant(1, 1, a.value().sum()), Op::Sum, {ia},
                [ia](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& x = tape.value(ia);
                  tape.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
                });
}

Var mean(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.push(Matrix::Constant(1, 1, a.value().mean()), Op::Mean, {ia},
                [ia](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& x = tape.value(ia);
                  const double n = static_cast<double>(x.size());
                  tape.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n));
                });
}

Var row_sum(Var a) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix v = a.value().rowwise().sum();
  return t.push(std::move(v), Op::RowSum, {ia}, [ia](Tape& tape, std::size_t, const Matrix& g) {
    tape.accumulate(ia, g.col(0).replicate(1, tape.value(ia).cols()));
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  Matrix v = a.value() * b.value();
  return t.push(std::move(v), Op::MatMul, {ia, ib},
                [ia, ib](Tape& tape, std::size_t, const Matrix& g) {
                  if (tape.needs_grad(ia)) tape.accumulate(ia, g * tape.value(ib).transpose());
                  if (tape.needs_grad(ib)) tape.accumulate(ib, tape.value(ia).transpose() * g);
                });
}

Var affine(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("affine: shape mismatch");
  }
  Tape& t = *x.tape();
  const std::size_t ix = x.id();
  const std::size_t iw = w.id();
  const std::size_t ib = b.id();
  Matrix v = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return t.push(std::move(v), Op::Affine, {ix, iw, ib},
                [ix, iw, ib](Tape& tape, std::size_t, const Matrix& g) {
                  if (tape.needs_grad(ix)) tape.accumulate(ix, g * tape.value(iw).transpose());
                  if (tape.needs_grad(iw)) tape.accumulate(iw, tape.value(ix).transpose() * g);
                  if (tape.needs_grad(ib)) tape.accumulate(ib, g.colwise().sum());
                });
}

// ---------------------------------------------------------------------------
// Structural

Var sort(Var a, std::vector<std::size_t>* permutation) {
  if (a.rows() != 1 && a.cols() != 1) throw std::invalid_argument("sort: expects a vector");
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  const Matrix& x = a.value();
  const auto n = static_cast<std::size_t>(x.size());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const double* data = x.data();
  std::stable_sort(perm.begin(), perm.end(),
                   [data](std::size_t i, std::size_t j) { return data[i] < data[j]; });
  Matrix v(x.rows(), x.cols());
  for (std::size_t i = 0; i < n; ++i) v.data()[i] = data[perm[i]];
  if (permutation) *permutation = perm;
  return t.push(std::move(v), Op::Sort, {ia},
                [ia, perm = std::move(perm)](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& xv = tape.value(ia);
                  Matrix ga = Matrix::Zero(xv.rows(), xv.cols());
                  for (std::size_t i = 0; i < perm.size(); ++i) ga.data()[perm[i]] += g.data()[i];
                  tape.accumulate(ia, ga);
                });
}

Var cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("cols: slice out of range");
  }
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix v = a.value().middleCols(start, count);
  return t.push(std::move(v), Op::Cols, {ia},
                [ia, start, count](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& xv = tape.value(ia);
                  Matrix ga = Matrix::Zero(xv.rows(), xv.cols());
                  ga.middleCols(start, count) = g;
                  tape.accumulate(ia, ga);
                });
}

Var rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("rows: slice out of range");
  }
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  Matrix v = a.value().middleRows(start, count);
  return t.push(std::move(v), Op::Rows, {ia},
                [ia, start, count](Tape& tape, std::size_t, const Matrix& g) {
                  const Matrix& xv = tape.value(ia);
                  Matrix ga = Matrix::Zero(xv.rows(), xv.cols());
                  ga.middleRows(start, count) = g;
                  tape.accumulate(ia, ga);
                });
}

Var detach(Var a) { return a.tape()->constant(a.value()); }

// ---------------------------------------------------------------------------
// Reflected logistic KDE

Var reflected_kde_log_pdf(Var queries, Var centers, double scale) {
  if (queries.cols() != 1 || centers.cols() != 1) {
    throw std::invalid_argument("reflected_kde_log_pdf: expects column vectors");
  }
  if (!(scale > 0.0)) throw std::invalid_argument("reflected_kde_log_pdf: scale must be > 0");
  Tape& t = *queries.tape();
  const std::size_t iq = queries.id();
  const std::size_t ic = centers.id();
  const Eigen::Index m = queries.rows();
  const Eigen::Index n = centers.rows();
  const Eigen::ArrayXd c = centers.value().col(0).array();
  const double inv_scale = 1.0 / scale;
  const double log_norm = std::log(static_cast<double>(n) * scale);
  const bool want_q = t.needs_grad(iq);
  const bool want_c = t.needs_grad(ic);

  // Segment r of the 3n buffers holds u = (reflected x - c_j) / scale for the
  // reflections x, -x, 2 - x, whose derivatives in x are +1, -1, -1.
  const Eigen::ArrayXd cs = c * inv_scale;
  Eigen::ArrayXd u(3 * n), e(3 * n), tail(3 * n), kern(3 * n), kd(3 * n);
  Matrix out(m, 1);
  Eigen::VectorXd dq = Eigen::VectorXd::Zero(m);
  Matrix dct;  // n x m, column i holds d out_i / d c
  if (want_c) dct.resize(n, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double x = queries.value()(i, 0) * inv_scale;
    u.segment(0, n) = x - cs;
    u.segment(n, n) = -x - cs;
    u.segment(2 * n, n) = 2.0 * inv_scale - x - cs;
    // k(u) e^{min|u|} = e^{min|u| - |u|} / (1 + e^{-|u|})^2
    const double min_abs = u.abs().minCoeff();
    // Floor keeps far terms out of the subnormal range; they stay ~1e-260
    // below the nearest term.
    e = (min_abs - u.abs()).max(-600.0).exp();
    tail = e * std::exp(-min_abs);
    kern = e / (1.0 + tail).square();
    const double total = kern.sum();
    out(i, 0) = -min_abs + std::log(total) - log_norm;
    if (!want_q && !want_c) continue;
    // d log k / du = -sign(u) (1 - e^{-|u|}) / (1 + e^{-|u|})
    kd = kern * (1.0 - tail) / (1.0 + tail);
    kd = (u >= 0.0).select(-kd, kd);
    const double w = inv_scale / total;
    if (want_q) dq(i) = w * (kd.segment(0, n).sum() - kd.segment(n, 2 * n).sum());
    if (want_c) dct.col(i) = (-w * (kd.segment(0, n) + kd.segment(n, n) + kd.segment(2 * n, n))).matrix();
  }
  t.count_kernel_evaluations(static_cast<std::uint64_t>(3 * m * n));

  return t.push(std::move(out), Op::ReflectedKdeLogPdf, {iq, ic},
                [iq, ic, dq = std::move(dq), dct = std::move(dct)](Tape& tape, std::size_t,
                                                                 const Matrix& g) {
                  if (tape.needs_grad(iq)) {
                    tape.accumulate(iq, (g.col(0).array() * dq.array()).matrix());
                  }
                  if (tape.needs_grad(ic) && dct.size() != 0) {
                    tape.accumulate(ic, dct * g.col(0));
                  }
                });
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Matrix value) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  first_moment_[name] = Matrix::Zero(value.rows(), value.cols());
  second_moment_[name] = Matrix::Zero(value.rows(), value.cols());
  params_[name] = std::move(value);
}

const Matrix& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Matrix& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.size());
  return n;
}

std::map<std::string, Var> ParamStore::bind(Tape& tape) const {
  std::map<std::string, Var> out;
  for (const auto& [name, p] : params_) out.emplace(name, tape.leaf(p, true));
  return out;
}

void ParamStore::adam_step(const std::map<std::string, Var>& bound, const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& [name, p] : params_) {
    auto it = bound.find(name);
    if (it == bound.end()) continue;
    const Matrix& g = it->second.grad();
    if (g.size() == 0) continue;
    Matrix& m = first_moment_[name];
    Matrix& v = second_moment_[name];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.epsilon);
  }
}

void ParamStore::restore(const std::map<std::string, Matrix>& values) {
  for (const auto& [name, v] : values) {
    Matrix& p = get(name);
    if (p.rows() != v.rows() || p.cols() != v.cols()) {
      throw std::invalid_argument("restore: shape mismatch for " + name);
    }
    p = v;
  }
}

// ---------------------------------------------------------------------------
// Finite differences

FiniteDiffResult finite_diff_check(const GraphFn& fn, std::span<const Matrix> points, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Matrix& p : points) leaves.push_back(tape.leaf(p));
    Var out = fn(tape, leaves);
    tape.backward(out);
    for (const Var& l : leaves) analytic.push_back(l.grad());
  }

  auto evaluate = [&](const std::vector<Matrix>& pts) {
    try {
      Tape tape;
      std::vector<Var> leaves;
      for (const Matrix& p : pts) leaves.push_back(tape.constant(p));
      return fn(tape, leaves).scalar();
    } catch (const NonFiniteError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  FiniteDiffResult result;
  std::vector<Matrix> work(points.begin(), points.end());
  for (std::size_t leaf = 0; leaf < work.size(); ++leaf) {
    for (Eigen::Index k = 0; k < work[leaf].size(); ++k) {
      const double orig = work[leaf].data()[k];
      work[leaf].data()[k] = orig + h;
      const double up = evaluate(work);
      work[leaf].data()[k] = orig - h;
      const double down = evaluate(work);
      work[leaf].data()[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[leaf].data()[k];
      double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
      if (err > result.max_rel_error || (leaf == 0 && k == 0)) {
        result = {err, leaf, k, a, numeric};
      }
    }
  }
  return result;
}

FiniteDiffResult finite_diff_check(const std::function<Var(Tape&, Var)>& fn, const Matrix& point,
                                   double h) {
  GraphFn wrapped = [&fn](Tape& t, std::span<const Var> leaves) { return fn(t, leaves[0]); };
  return finite_diff_check(wrapped, std::span<const Matrix>(&point, 1), h);
}

}  // namespace qrt::ad
