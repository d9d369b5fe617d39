#include "qrt/stats.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace qrt::stats {

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sum_sq_dev(std::span<const double> v, double m) {
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return acc;
}

// sum over tie groups of (t^3 - t).
double tie_term(std::span<const double> values) {
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j] == s[i]) ++j;
    const double t = static_cast<double>(j - i);
    acc += t * t * t - t;
    i = j;
  }
  return acc;
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("cohens_d: need >= 2 samples each");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  const double dof = static_cast<double>(a.size() + b.size() - 2);
  const double pooled = std::sqrt((sum_sq_dev(a, ma) + sum_sq_dev(b, mb)) / dof);
  const double diff = ma - mb;
  if (pooled == 0.0) {
    if (diff == 0.0) return 0.0;
    return diff > 0.0 ? std::numeric_limits<double>::infinity()
                      : -std::numeric_limits<double>::infinity();
  }
  return diff / pooled;
}

std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

Eigen::MatrixXd rank_rows(const Eigen::MatrixXd& scores, bool lower_is_better) {
  Eigen::MatrixXd ranks(scores.rows(), scores.cols());
  std::vector<double> row(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      row[static_cast<std::size_t>(j)] = lower_is_better ? scores(i, j) : -scores(i, j);
    }
    const auto r = midranks(row);
    for (Eigen::Index j = 0; j < scores.cols(); ++j) ranks(i, j) = r[static_cast<std::size_t>(j)];
  }
  return ranks;
}

Eigen::VectorXd average_ranks(const Eigen::MatrixXd& scores, bool lower_is_better) {
  if (scores.rows() == 0) throw std::invalid_argument("average_ranks: empty matrix");
  return rank_rows(scores, lower_is_better).colwise().mean().transpose();
}

FriedmanResult friedman(const Eigen::MatrixXd& scores, bool lower_is_better) {
  const auto n = static_cast<double>(scores.rows());
  const auto k = static_cast<double>(scores.cols());
  if (scores.rows() < 2 || scores.cols() < 2) {
    throw std::invalid_argument("friedman: need >= 2 datasets and >= 2 methods");
  }
  const Eigen::MatrixXd ranks = rank_rows(scores, lower_is_better);
  const Eigen::VectorXd rank_sums = ranks.colwise().sum().transpose();
  double ties = 0.0;
  std::vector<double> row(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index i = 0; i < ranks.rows(); ++i) {
    for (Eigen::Index j = 0; j < ranks.cols(); ++j) row[static_cast<std::size_t>(j)] = ranks(i, j);
    ties += tie_term(row);
  }
  const double numerator = 12.0 / (n * k * (k + 1.0)) * rank_sums.squaredNorm() - 3.0 * n * (k + 1.0);
  const double denominator = 1.0 - ties / (n * (k * k * k - k));
  FriedmanResult r;
  if (denominator <= 0.0) return r;
  r.statistic = std::max(0.0, numerator / denominator);
  r.p_value = boost::math::gamma_q((k - 1.0) / 2.0, r.statistic / 2.0);
  return r;
}

SignedRankResult wilcoxon_signed_rank(std::span<const double> differences) {
  std::vector<double> nz;
  for (double d : differences) {
    if (d != 0.0) nz.push_back(d);
  }
  SignedRankResult r;
  r.n = nz.size();
  if (nz.empty()) return r;

  std::vector<double> mags(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mags[i] = std::abs(nz[i]);
  const auto ranks = midranks(mags);
  for (std::size_t i = 0; i < nz.size(); ++i) {
    if (nz[i] > 0.0) r.w_plus += ranks[i];
  }
  const double n = static_cast<double>(nz.size());

  if (nz.size() <= kExactSignedRankMax) {
    r.exact = true;
    // Doubled midranks are integers; count sign assignments per doubled sum.
    std::vector<int> r2(nz.size());
    int total = 0;
    for (std::size_t i = 0; i < nz.size(); ++i) {
      r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
      total += r2[i];
    }
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1.0;
    for (int v : r2) {
      for (int s = total; s >= v; --s) count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - v)];
    }
    const int w2 = static_cast<int>(std::lround(2.0 * r.w_plus));
    double lower = 0.0;
    double upper = 0.0;
    for (int s = 0; s <= total; ++s) {
      if (s <= w2) lower += count[static_cast<std::size_t>(s)];
      if (s >= w2) upper += count[static_cast<std::size_t>(s)];
    }
    const double all = std::ldexp(1.0, static_cast<int>(nz.size()));
    r.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    return r;
  }

  const double mu = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term(mags) / 48.0;
  if (var <= 0.0) return r;
  const double z = std::max(0.0, std::abs(r.w_plus - mu) - 0.5) / std::sqrt(var);
  r.p_value = std::min(1.0, 2.0 * normal_sf(z));
  return r;
}

std::vector<bool> holm(std::span<const double> p_values, double alpha) {
  const std::size_t m = p_values.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });
  std::vector<bool> reject(m, false);
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t i = order[step];
    if (p_values[i] <= alpha / static_cast<double>(m - step)) {
      reject[i] = true;
    } else {
      break;
    }
  }
  return reject;
}

std::vector<PairDecision> wilcoxon_holm(const Eigen::MatrixXd& scores, double alpha) {
  std::vector<PairDecision> out;
  const Eigen::Index k = scores.cols();
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = a + 1; b < k; ++b) {
      std::vector<double> d(static_cast<std::size_t>(scores.rows()));
      for (Eigen::Index i = 0; i < scores.rows(); ++i) d[static_cast<std::size_t>(i)] = scores(i, a) - scores(i, b);
      PairDecision pd;
      pd.a = static_cast<std::size_t>(a);
      pd.b = static_cast<std::size_t>(b);
      pd.p_value = wilcoxon_signed_rank(d).p_value;
      out.push_back(pd);
    }
  }
  std::vector<double> p(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) p[i] = out[i].p_value;
  const auto reject = holm(p, alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].significant = reject[i];
  return out;
}

std::vector<std::vector<std::size_t>> cliques(const Eigen::VectorXd& ranks,
                                              std::span<const PairDecision> decisions) {
  const auto k = static_cast<std::size_t>(ranks.size());
  std::vector<std::vector<bool>> sig(k, std::vector<bool>(k, false));
  for (const auto& d : decisions) {
    if (d.a >= k || d.b >= k) throw std::out_of_range("cliques: decision index out of range");
    sig[d.a][d.b] = sig[d.b][d.a] = d.significant;
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return ranks(static_cast<Eigen::Index>(i)) < ranks(static_cast<Eigen::Index>(j)); });

  std::vector<std::vector<std::size_t>> groups;
  std::size_t last_end = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k) {
      bool ok = true;
      for (std::size_t t = i; t <= j && ok; ++t) ok = !sig[order[t]][order[j + 1]];
      if (!ok) break;
      ++j;
    }
    if (j > i && (groups.empty() || j > last_end)) {
      groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                          order.begin() + static_cast<std::ptrdiff_t>(j + 1));
      last_end = j;
    }
  }
  return groups;
}

double quantile(std::span<const double> values, double level) {
  if (values.empty()) throw std::invalid_argument("quantile: empty sample");
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  const double pos = level * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

LetterValues letter_values(std::span<const double> values) {
  return {quantile(values, 0.125), quantile(values, 0.25), quantile(values, 0.5),
          quantile(values, 0.75), quantile(values, 0.875)};
}

double discreteness(std::span<const double> y) {
  if (y.empty()) throw std::invalid_argument("discreteness: empty targets");
  std::map<double, std::size_t> freq;
  for (double v : y) ++freq[v];
  std::vector<std::pair<double, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t mass = 0;
  for (std::size_t i = 0; i < items.size() && i < 10; ++i) mass += items[i].second;
  return static_cast<double>(mass) / static_cast<double>(y.size());
}

}  // namespace qrt::stats
