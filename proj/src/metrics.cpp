#include "qrt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qrt {

namespace {

constexpr double kLevelGuard = 1e-15;

std::vector<double> midpoint_levels(int count) {
  std::vector<double> a(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) a[static_cast<std::size_t>(j)] = (j + 0.5) / count;
  return a;
}

// Levels handed to the base mixture quantile for each outer level.
std::vector<double> inner_levels(const Forecast& f, const std::vector<double>& outer) {
  if (!f.map) return outer;
  std::vector<double> inner(outer.size());
  for (std::size_t j = 0; j < outer.size(); ++j) {
    inner[j] = std::clamp(f.map->inverse(outer[j]), kLevelGuard, 1.0 - kLevelGuard);
  }
  return inner;
}

void check_sizes(const Forecast& f, const Vector& y) {
  if (static_cast<Eigen::Index>(f.base.size()) != y.size()) {
    throw std::invalid_argument("metrics: forecast and target counts differ");
  }
  if (y.size() == 0) throw std::invalid_argument("metrics: empty evaluation set");
}

}  // namespace

std::vector<double> pointwise_nll(const Forecast& f, const Vector& y) {
  check_sizes(f, y);
  std::vector<double> out(f.base.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double yi = y(static_cast<Eigen::Index>(i));
    const double lp = f.map ? recalibrated_log_pdf(*f.map, f.base[i], yi) : log_pdf(f.base[i], yi);
    if (!std::isfinite(lp)) throw std::domain_error("nll: non-finite density");
    out[i] = -lp;
  }
  return out;
}

double nll(const Forecast& f, const Vector& y) {
  const auto per_point = pointwise_nll(f, y);
  double acc = 0.0;
  for (double v : per_point) acc += v;
  return acc / static_cast<double>(per_point.size()) + std::log(f.y_scale);
}

std::vector<double> forecast_pit(const Forecast& f, const Vector& y) {
  check_sizes(f, y);
  std::vector<double> z = pit(f.base, y);
  if (f.map) {
    for (double& v : z) v = f.map->cdf(v);
  }
  return z;
}

double pce_from_pit(std::span<const double> z, int levels) {
  if (levels < 1) throw std::invalid_argument("pce: need at least one level");
  if (z.empty()) throw std::invalid_argument("pce: empty PIT sample");
  std::vector<double> sorted(z.begin(), z.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double acc = 0.0;
  for (int j = 1; j <= levels; ++j) {
    const double a = static_cast<double>(j) / (levels + 1);
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), a) - sorted.begin();
    acc += std::abs(a - static_cast<double>(count) / n);
  }
  return acc / levels;
}

double pce(const Forecast& f, const Vector& y, int levels) {
  return pce_from_pit(forecast_pit(f, y), levels);
}

double crps_single(const MixtureParams& p, double y, int levels) {
  double acc = 0.0;
  for (int j = 0; j < levels; ++j) {
    const double a = (j + 0.5) / levels;
    const double q = quantile(p, a);
    acc += ((y <= q ? 1.0 : 0.0) - a) * (q - y);
  }
  return 2.0 * acc / levels;
}

double crps(const Forecast& f, const Vector& y, int levels) {
  check_sizes(f, y);
  if (levels < 1) throw std::invalid_argument("crps: need at least one level");
  const auto outer = midpoint_levels(levels);
  const auto inner = inner_levels(f, outer);
  double total = 0.0;
  for (std::size_t i = 0; i < f.base.size(); ++i) {
    const double yi = y(static_cast<Eigen::Index>(i));
    double acc = 0.0;
    for (std::size_t j = 0; j < outer.size(); ++j) {
      const double q = quantile(f.base[i], inner[j]);
      acc += ((yi <= q ? 1.0 : 0.0) - outer[j]) * (q - yi);
    }
    total += 2.0 * acc / levels;
  }
  return total / static_cast<double>(f.base.size()) * f.y_scale;
}

double mean_sd(const Forecast& f) {
  if (f.base.empty()) throw std::invalid_argument("mean_sd: empty forecast");
  double total = 0.0;
  if (!f.map) {
    for (const auto& p : f.base) total += std::sqrt(mixture_variance(p));
  } else {
    const auto inner = inner_levels(f, midpoint_levels(kSdGridLevels));
    for (const auto& p : f.base) {
      double s1 = 0.0;
      double s2 = 0.0;
      for (double a : inner) {
        const double q = quantile(p, a);
        s1 += q;
        s2 += q * q;
      }
      const double m = s1 / kSdGridLevels;
      total += std::sqrt(std::max(0.0, s2 / kSdGridLevels - m * m));
    }
  }
  return total / static_cast<double>(f.base.size()) * f.y_scale;
}

MetricReport evaluate(const Forecast& f, const Vector& y) {
  MetricReport r;
  r.nll = nll(f, y);
  r.pce = pce(f, y);
  r.crps = crps(f, y);
  r.sd = mean_sd(f);
  r.n = f.base.size();
  r.levels = kPceLevels;
  return r;
}

}  // namespace qrt
