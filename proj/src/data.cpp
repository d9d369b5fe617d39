#include "qrt/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace qrt {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, delim)) cells.push_back(cell);
  if (!line.empty() && line.back() == delim) cells.emplace_back();
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_number(const std::string& raw, double& out) {
  const std::string s = trim(raw);
  if (s.empty()) return false;
  const char* begin = s.data();
  if (*begin == '+') ++begin;
  auto res = std::from_chars(begin, s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.name = name;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(r);
    out.y(static_cast<Eigen::Index>(i)) = y(r);
  }
  return out;
}

Dataset load_table(const std::string& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> bad_rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line, options.delimiter);
    std::vector<double> values(cells.size());
    bool ok = true;
    for (std::size_t j = 0; j < cells.size(); ++j) ok = parse_number(cells[j], values[j]) && ok;
    if (first_content) {
      first_content = false;
      width = cells.size();
      const bool header = options.header == HeaderMode::Present ||
                          (options.header == HeaderMode::Auto && !ok);
      if (header) continue;
    }
    if (!ok || cells.size() != width) {
      bad_rows.push_back(line_no);
      continue;
    }
    rows.push_back(std::move(values));
  }
  if (!bad_rows.empty()) {
    std::ostringstream msg;
    msg << path << ": malformed row(s) at line";
    for (std::size_t r : bad_rows) msg << ' ' << r;
    throw DataError(msg.str());
  }
  if (rows.empty()) throw DataError(path + ": no data rows");
  if (width < 2) throw DataError(path + ": need at least one feature column and a target");

  Dataset d;
  d.name = path;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width - 1));
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j + 1 < width; ++j) {
      d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    d.y(static_cast<Eigen::Index>(i)) = rows[i][width - 1];
  }
  return d;
}

void write_table(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write data file: " + path);
  for (Eigen::Index j = 0; j < data.x.cols(); ++j) out << 'x' << j << ',';
  out << "y\n";
  char buf[64];
  auto put = [&](double v) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.write(buf, res.ptr - buf);
  };
  for (Eigen::Index i = 0; i < data.x.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.x.cols(); ++j) {
      put(data.x(i, j));
      out << ',';
    }
    put(data.y(i));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Splits::fit_rows() const {
  std::vector<std::size_t> rows = train;
  if (fold_calibration_into_train) rows.insert(rows.end(), calibration.begin(), calibration.end());
  return rows;
}

Splits split(std::size_t n, std::uint64_t seed) {
  if (n < 20) throw std::invalid_argument("split: need at least 20 rows");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  const auto n_val = static_cast<std::size_t>(std::floor(0.10 * static_cast<double>(n)));
  const auto n_cal = static_cast<std::size_t>(std::floor(0.15 * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(0.10 * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_cal - n_test;

  Splits s;
  s.seed = seed;
  s.n = n;
  auto it = perm.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  it += static_cast<std::ptrdiff_t>(n_train);
  s.validation.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  it += static_cast<std::ptrdiff_t>(n_val);
  s.calibration.assign(it, it + static_cast<std::ptrdiff_t>(n_cal));
  it += static_cast<std::ptrdiff_t>(n_cal);
  s.test.assign(it, perm.end());
  return s;
}

void cap_training_rows(Splits& splits, std::size_t cap) {
  if (splits.train.size() > cap) splits.train.resize(cap);
}

// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const Dataset& data, std::span<const std::size_t> train_rows) {
  if (train_rows.empty()) throw std::invalid_argument("Standardizer: empty training partition");
  const auto d = data.x.cols();
  const double n = static_cast<double>(train_rows.size());
  Standardizer s;
  s.x_mean = Vector::Zero(d);
  s.x_scale = Vector::Ones(d);

  auto moments = [&](auto value_of) {
    double mean = 0.0;
    for (std::size_t r : train_rows) mean += value_of(r);
    mean /= n;
    double var = 0.0;
    for (std::size_t r : train_rows) {
      const double dv = value_of(r) - mean;
      var += dv * dv;
    }
    return std::pair{mean, std::sqrt(var / n)};
  };
  auto constant = [&](auto value_of) {
    const double first = value_of(train_rows[0]);
    return std::all_of(train_rows.begin(), train_rows.end(),
                       [&](std::size_t r) { return value_of(r) == first; });
  };

  for (Eigen::Index j = 0; j < d; ++j) {
    auto col = [&](std::size_t r) { return data.x(static_cast<Eigen::Index>(r), j); };
    if (constant(col)) continue;
    auto [m, sd] = moments(col);
    s.x_mean(j) = m;
    s.x_scale(j) = sd > 0.0 ? sd : 1.0;
  }
  auto target = [&](std::size_t r) { return data.y(static_cast<Eigen::Index>(r)); };
  if (!constant(target)) {
    auto [m, sd] = moments(target);
    s.y_mean = m;
    s.y_scale = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

Matrix Standardizer::transform_x(const Matrix& x) const {
  Matrix out = x;
  out.rowwise() -= x_mean.transpose();
  out.array().rowwise() /= x_scale.transpose().array();
  return out;
}

Vector Standardizer::transform_y(const Vector& y) const {
  return ((y.array() - y_mean) / y_scale).matrix();
}

Vector Standardizer::inverse_y(const Vector& y) const {
  return (y.array() * y_scale + y_mean).matrix();
}

// ---------------------------------------------------------------------------

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::LinearGaussian: return "linear-gaussian";
    case SynthKind::Heteroscedastic: return "heteroscedastic";
    case SynthKind::Bimodal: return "bimodal";
    case SynthKind::Discrete: return "discrete";
  }
  return "?";
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "linear-gaussian") return SynthKind::LinearGaussian;
  if (s == "heteroscedastic") return SynthKind::Heteroscedastic;
  if (s == "bimodal") return SynthKind::Bimodal;
  if (s == "discrete") return SynthKind::Discrete;
  throw std::invalid_argument("unknown synthetic dataset kind '" + s + "'");
}

Dataset synth(SynthKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("synth: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d;
  d.name = to_string(kind);
  const auto rows = static_cast<Eigen::Index>(n);
  switch (kind) {
    case SynthKind::LinearGaussian: {
      d.x.resize(rows, 3);
      d.y.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < 3; ++j) d.x(i, j) = normal(rng);
        d.y(i) = d.x(i, 0) - 0.5 * d.x(i, 1) + 0.25 * d.x(i, 2) + normal(rng);
      }
      break;
    }
    case SynthKind::Heteroscedastic: {
      std::uniform_real_distribution<double> u(-2.0, 2.0);
      d.x.resize(rows, 2);
      d.y.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        d.x(i, 0) = u(rng);
        d.x(i, 1) = u(rng);
        d.y(i) = d.x(i, 0) + 0.5 * d.x(i, 1) + (0.2 + 0.8 * std::abs(d.x(i, 0))) * normal(rng);
      }
      break;
    }
    case SynthKind::Bimodal: {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      std::bernoulli_distribution coin(0.5);
      d.x.resize(rows, 1);
      d.y.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        d.x(i, 0) = u(rng);
        const double sign = coin(rng) ? 1.0 : -1.0;
        d.y(i) = sign * (2.0 + d.x(i, 0)) + 0.3 * normal(rng);
      }
      break;
    }
    case SynthKind::Discrete: {
      d.x.resize(rows, 2);
      d.y.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        d.x(i, 0) = normal(rng);
        d.x(i, 1) = normal(rng);
        const double latent = d.x(i, 0) + 0.5 * d.x(i, 1) + 0.7 * normal(rng);
        d.y(i) = std::clamp(std::round(latent), -2.0, 2.0);
      }
      break;
    }
  }
  return d;
}

}  // namespace qrt
