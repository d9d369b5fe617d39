#include "qrt/mdn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace qrt {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr char kCheckpointMagic[] = "qrt-mdn-checkpoint";
constexpr int kCheckpointVersion = 1;

double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

const char* activation_name(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw std::runtime_error("checkpoint: unknown activation '" + s + "'");
}

}  // namespace

void MdnConfig::validate() const {
  if (input_dim < 1) throw std::invalid_argument("MdnConfig: input_dim must be >= 1");
  if (hidden_layers < 1) throw std::invalid_argument("MdnConfig: hidden_layers must be >= 1");
  if (width < 1) throw std::invalid_argument("MdnConfig: width must be >= 1");
  if (mixture_size < 1) throw std::invalid_argument("MdnConfig: mixture_size must be >= 1");
}

void MixtureParams::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != scales.size()) {
    throw std::invalid_argument("MixtureParams: arrays must be nonempty and of equal length");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < size(); ++k) {
    if (!(weights[k] >= 0.0) || !(scales[k] > 0.0) || !std::isfinite(means[k])) {
      throw std::invalid_argument("MixtureParams: invalid component");
    }
    total += weights[k];
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("MixtureParams: weights must sum to 1");
}

double log_pdf(const MixtureParams& p, double y) {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double z = (y - p.means[k]) / p.scales[k];
    terms[k] = std::log(p.weights[k]) - 0.5 * z * z - kHalfLog2Pi - std::log(p.scales[k]);
    best = std::max(best, terms[k]);
  }
  if (!std::isfinite(best)) return best;
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

double pdf(const MixtureParams& p, double y) { return std::exp(log_pdf(p, y)); }

double cdf(const MixtureParams& p, double y) {
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p.weights[k] * normal_cdf((y - p.means[k]) / p.scales[k]);
  }
  return std::clamp(acc, 0.0, 1.0);
}

double quantile(const MixtureParams& p, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::domain_error("quantile: level must be in (0, 1)");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < p.size(); ++k) {
    lo = std::min(lo, p.means[k] - 20.0 * p.scales[k]);
    hi = std::max(hi, p.means[k] + 20.0 * p.scales[k]);
  }
  int doublings = 0;
  while (cdf(p, lo) > level || cdf(p, hi) < level) {
    if (++doublings > 60) throw std::runtime_error("quantile: bracket expansion failed");
    const double width = hi - lo;
    if (cdf(p, lo) > level) lo -= width;
    if (cdf(p, hi) < level) hi += width;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double c = cdf(p, mid);
    if (c == level) return mid;
    if (c < level) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  // Both ends straddle the level; return the closer one.
  return std::abs(cdf(p, lo) - level) <= std::abs(cdf(p, hi) - level) ? lo : hi;
}

double mixture_mean(const MixtureParams& p) {
  double m = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) m += p.weights[k] * p.means[k];
  return m;
}

double mixture_variance(const MixtureParams& p) {
  double second = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    second += p.weights[k] * (p.scales[k] * p.scales[k] + p.means[k] * p.means[k]);
  }
  const double m = mixture_mean(p);
  return std::max(0.0, second - m * m);
}

ad::Var mixture_log_pdf(const MixtureGraph& g, ad::Var y) {
  ad::Var z = (y - g.means) / g.scales;
  ad::Var comp = ad::gaussian_log_pdf(z) - ad::log(g.scales);
  return ad::logsumexp(g.log_weights + comp);
}

ad::Var mixture_cdf(const MixtureGraph& g, ad::Var y) {
  ad::Var z = (y - g.means) / g.scales;
  return ad::row_sum(ad::exp(g.log_weights) * ad::gaussian_cdf(z));
}

// ---------------------------------------------------------------------------

std::string MdnModel::weight_name(int layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string MdnModel::bias_name(int layer) { return "layer" + std::to_string(layer) + ".bias"; }

MdnModel::MdnModel(const MdnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  int fan_in = config_.input_dim;
  const int outputs = 3 * config_.mixture_size;
  for (int layer = 0; layer <= config_.hidden_layers; ++layer) {
    const int fan_out = layer == config_.hidden_layers ? outputs : config_.width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(fan_in, fan_out);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    Matrix b(1, fan_out);
    for (Eigen::Index j = 0; j < b.cols(); ++j) b(0, j) = dist(rng);
    params_.add(weight_name(layer), std::move(w));
    params_.add(bias_name(layer), std::move(b));
    fan_in = fan_out;
  }
}

MdnModel::MdnModel(const MdnConfig& config, ad::ParamStore params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  int fan_in = config_.input_dim;
  for (int layer = 0; layer <= config_.hidden_layers; ++layer) {
    const int fan_out = layer == config_.hidden_layers ? 3 * config_.mixture_size : config_.width;
    const Matrix& w = params_.get(weight_name(layer));
    const Matrix& b = params_.get(bias_name(layer));
    if (w.rows() != fan_in || w.cols() != fan_out || b.rows() != 1 || b.cols() != fan_out) {
      throw std::invalid_argument("MdnModel: parameter shapes do not match config");
    }
    fan_in = fan_out;
  }
}

MixtureGraph MdnModel::forward(ad::Tape& tape, const std::map<std::string, ad::Var>& bound,
                               ad::Var x) const {
  (void)tape;
  if (x.cols() != config_.input_dim) throw std::invalid_argument("MdnModel: input dimension mismatch");
  ad::Var h = x;
  for (int layer = 0; layer < config_.hidden_layers; ++layer) {
    h = ad::affine(h, bound.at(weight_name(layer)), bound.at(bias_name(layer)));
    h = config_.activation == Activation::Relu ? ad::relu(h) : ad::tanh(h);
  }
  const int last = config_.hidden_layers;
  ad::Var out = ad::affine(h, bound.at(weight_name(last)), bound.at(bias_name(last)));
  const int k = config_.mixture_size;
  MixtureGraph g;
  g.means = ad::cols(out, 0, k);
  g.scales = ad::clamp_min(ad::softplus(ad::cols(out, k, k)), kScaleFloor);
  ad::Var logits = ad::cols(out, 2 * k, k);
  g.log_weights = logits - ad::logsumexp(logits);
  return g;
}

std::vector<MixtureParams> MdnModel::predict(const Matrix& x) const {
  if (x.cols() != config_.input_dim) throw std::invalid_argument("MdnModel: input dimension mismatch");
  Matrix h = x;
  for (int layer = 0; layer < config_.hidden_layers; ++layer) {
    Matrix next = h * params_.get(weight_name(layer));
    next.rowwise() += params_.get(bias_name(layer)).row(0);
    if (config_.activation == Activation::Relu) {
      h = next.cwiseMax(0.0);
    } else {
      h = next.array().tanh().matrix();
    }
  }
  const int last = config_.hidden_layers;
  Matrix out = h * params_.get(weight_name(last));
  out.rowwise() += params_.get(bias_name(last)).row(0);

  const int k = config_.mixture_size;
  std::vector<MixtureParams> result(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    MixtureParams& p = result[static_cast<std::size_t>(i)];
    p.means.resize(k);
    p.scales.resize(k);
    p.weights.resize(k);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) max_logit = std::max(max_logit, out(i, 2 * k + j));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(out(i, 2 * k + j) - max_logit);
    for (int j = 0; j < k; ++j) {
      p.means[j] = out(i, j);
      p.scales[j] = std::max(softplus(out(i, k + j)), kScaleFloor);
      p.weights[j] = std::exp(out(i, 2 * k + j) - max_logit) / z;
    }
  }
  return result;
}

MixtureParams MdnModel::forward(const Vector& x) const {
  return predict(x.transpose())[0];
}

// ---------------------------------------------------------------------------
// Checkpoint format (text, one token stream):
//   qrt-mdn-checkpoint 1
//   input_dim <int> hidden_layers <int> width <int> mixture_size <int> activation <relu|tanh>
//   params <count>
//   <name> <rows> <cols> <values in row-major order>...
// Values use the shortest decimal form that round-trips to the same double.

void MdnModel::save(std::ostream& os) const {
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "input_dim " << config_.input_dim << " hidden_layers " << config_.hidden_layers
     << " width " << config_.width << " mixture_size " << config_.mixture_size << " activation "
     << activation_name(config_.activation) << '\n';
  os << "params " << params_.params().size() << '\n';
  char buf[64];
  for (const auto& [name, m] : params_.params()) {
    os << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        auto res = std::to_chars(buf, buf + sizeof(buf), m(i, j));
        os << (j ? " " : "") << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
      }
      os << '\n';
    }
  }
}

MdnModel MdnModel::load(std::istream& is) {
  auto expect = [&is](const std::string& word) {
    std::string tok;
    if (!(is >> tok) || tok != word) {
      throw std::runtime_error("checkpoint: expected '" + word + "', got '" + tok + "'");
    }
  };
  expect(kCheckpointMagic);
  int version = 0;
  if (!(is >> version) || version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  MdnConfig cfg;
  std::string act;
  expect("input_dim");
  is >> cfg.input_dim;
  expect("hidden_layers");
  is >> cfg.hidden_layers;
  expect("width");
  is >> cfg.width;
  expect("mixture_size");
  is >> cfg.mixture_size;
  expect("activation");
  is >> act;
  cfg.activation = parse_activation(act);
  expect("params");
  std::size_t count = 0;
  if (!(is >> count)) throw std::runtime_error("checkpoint: bad parameter count");
  ad::ParamStore store;
  for (std::size_t p = 0; p < count; ++p) {
    std::string name;
    Eigen::Index r = 0;
    Eigen::Index c = 0;
    if (!(is >> name >> r >> c) || r < 0 || c < 0) {
      throw std::runtime_error("checkpoint: bad parameter header");
    }
    Matrix m(r, c);
    std::string tok;
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated values for " + name);
        double v = 0.0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
          throw std::runtime_error("checkpoint: bad number '" + tok + "' in " + name);
        }
        m(i, j) = v;
      }
    }
    store.add(name, std::move(m));
  }
  return MdnModel(cfg, std::move(store));
}

void MdnModel::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  save(os);
}

MdnModel MdnModel::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  return load(is);
}

}  // namespace qrt
