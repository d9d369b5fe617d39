#include "qrt/calibration_map.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qrt {

namespace {

using Array = Eigen::ArrayXd;

// Innermost level handed to a mixture quantile when the map inverse lands on
// the boundary of [0, 1].
constexpr double kLevelGuard = 1e-15;
constexpr int kInverseIterations = 80;

Array sigmoid(const Array& x) {
  const Array t = (-x.abs()).exp();
  return (x >= 0).select(1.0 / (1.0 + t), t / (1.0 + t));
}

}  // namespace

std::string to_string(MapKind kind) {
  switch (kind) {
    case MapKind::Emp: return "EMP";
    case MapKind::Dcp: return "DCP";
    case MapKind::Kde: return "KDE";
    case MapKind::Trunc: return "TRUNC";
    case MapKind::Refl: return "REFL";
  }
  return "?";
}

MapKind parse_map_kind(const std::string& s) {
  if (s == "EMP") return MapKind::Emp;
  if (s == "DCP") return MapKind::Dcp;
  if (s == "KDE") return MapKind::Kde;
  if (s == "TRUNC") return MapKind::Trunc;
  if (s == "REFL") return MapKind::Refl;
  throw std::invalid_argument("unknown calibration map kind '" + s + "'");
}

bool has_density(MapKind kind) {
  return kind == MapKind::Kde || kind == MapKind::Trunc || kind == MapKind::Refl;
}

double kernel_variance(double bandwidth, std::size_t n) {
  return bandwidth * bandwidth * std::pow(static_cast<double>(n), -0.4);
}

double logistic_scale_for_variance(double variance) { return std::sqrt(3.0 * variance) / M_PI; }

CalibrationMap CalibrationMap::build(MapKind kind, std::vector<double> centers,
                                     std::optional<double> bandwidth) {
  if (centers.empty()) throw std::invalid_argument("calibration map: no centers");
  for (double c : centers) {
    if (!(c >= 0.0 && c <= 1.0)) {
      throw std::invalid_argument("calibration map: center outside [0, 1]");
    }
  }
  CalibrationMap map;
  map.kind_ = kind;
  std::sort(centers.begin(), centers.end());
  map.centers_ = std::move(centers);
  if (!has_density(kind)) return map;

  if (!bandwidth) throw std::invalid_argument("calibration map: bandwidth required for " + to_string(kind));
  if (!(*bandwidth > 0.0)) throw std::invalid_argument("calibration map: bandwidth must be > 0");
  map.bandwidth_ = bandwidth;
  map.variance_ = qrt::kernel_variance(*bandwidth, map.centers_.size());
  map.scale_ = logistic_scale_for_variance(map.variance_);
  if (kind == MapKind::Trunc) {
    map.trunc_low_ = map.raw_cdf(0.0);
    map.trunc_mass_ = map.raw_cdf(1.0) - map.trunc_low_;
  }
  if (kind == MapKind::Refl) {
    const Eigen::Map<const Array> c(map.centers_.data(), static_cast<Eigen::Index>(map.centers_.size()));
    const double outside =
        (sigmoid((-1.0 - c) / map.scale_) + sigmoid((c - 2.0) / map.scale_)).mean();
    map.spread_warning_ = outside > 1e-9;
  }
  return map;
}

// Logistic terms beyond this many scales from the nearest one are below one ulp.
constexpr double kWindow = 50.0;

double CalibrationMap::sigmoid_sum(double q) const {
  const double w = kWindow * scale_;
  const auto lo = std::lower_bound(centers_.begin(), centers_.end(), q - w);
  const auto hi = std::upper_bound(lo, centers_.end(), q + w);
  const Eigen::Map<const Eigen::ArrayXd> c(centers_.data() + (lo - centers_.begin()), hi - lo);
  return static_cast<double>(lo - centers_.begin()) + (1.0 + ((c - q) / scale_).exp()).inverse().sum();
}

double CalibrationMap::log_kernel_sum(std::span<const double> qs) const {
  double nearest = std::numeric_limits<double>::infinity();
  for (double q : qs) {
    const auto it = std::lower_bound(centers_.begin(), centers_.end(), q);
    if (it != centers_.end()) nearest = std::min(nearest, *it - q);
    if (it != centers_.begin()) nearest = std::min(nearest, q - *(it - 1));
  }
  const double m = nearest / scale_;
  const double w = (nearest / scale_ + kWindow) * scale_;
  const double tail_shift = std::exp(-m);
  double acc = 0.0;
  for (double q : qs) {
    const auto lo = std::lower_bound(centers_.begin(), centers_.end(), q - w);
    const auto hi = std::upper_bound(lo, centers_.end(), q + w);
    const Eigen::Map<const Eigen::ArrayXd> c(centers_.data() + (lo - centers_.begin()), hi - lo);
    const Eigen::ArrayXd e = (m - (q - c).abs() / scale_).exp();
    acc += (e / (1.0 + e * tail_shift).square()).sum();
  }
  return -m + std::log(acc);
}

double CalibrationMap::raw_cdf(double x) const {
  return sigmoid_sum(x) / static_cast<double>(centers_.size());
}

double CalibrationMap::raw_log_pdf(double x) const {
  const double q[1] = {x};
  return log_kernel_sum(q) - std::log(static_cast<double>(centers_.size()) * scale_);
}

double CalibrationMap::refl_log_pdf(double x) const {
  const double q[3] = {x, -x, 2.0 - x};
  return log_kernel_sum(q) - std::log(static_cast<double>(centers_.size()) * scale_);
}

double CalibrationMap::cdf(double level) const {
  const double n = static_cast<double>(centers_.size());
  switch (kind_) {
    case MapKind::Emp:
    case MapKind::Dcp: {
      const auto count = std::upper_bound(centers_.begin(), centers_.end(), level) - centers_.begin();
      return static_cast<double>(count) / (kind_ == MapKind::Emp ? n : n + 1.0);
    }
    case MapKind::Kde:
      return raw_cdf(level);
    case MapKind::Trunc:
      if (level <= 0.0) return 0.0;
      if (level >= 1.0) return 1.0;
      return std::clamp((raw_cdf(level) - trunc_low_) / trunc_mass_, 0.0, 1.0);
    case MapKind::Refl: {
      if (level <= 0.0) return 0.0;
      if (level >= 1.0) return 1.0;
      // F(x) - F(-x) + 1 - F(2 - x)
      const double v = (sigmoid_sum(level) - sigmoid_sum(-level) + n - sigmoid_sum(2.0 - level)) / n;
      return std::clamp(v, 0.0, 1.0);
    }
  }
  return 0.0;
}

double CalibrationMap::log_pdf(double level) const {
  switch (kind_) {
    case MapKind::Emp:
    case MapKind::Dcp:
      throw std::logic_error("calibration map " + to_string(kind_) + " has no density");
    case MapKind::Kde:
      return raw_log_pdf(level);
    case MapKind::Trunc:
      if (level < 0.0 || level > 1.0) return -std::numeric_limits<double>::infinity();
      return raw_log_pdf(level) - std::log(trunc_mass_);
    case MapKind::Refl:
      if (level < 0.0 || level > 1.0) return -std::numeric_limits<double>::infinity();
      return refl_log_pdf(level);
  }
  return 0.0;
}

double CalibrationMap::pdf(double level) const { return std::exp(log_pdf(level)); }

double CalibrationMap::inverse(double p) const {
  if (!has_density(kind_)) {
    if (p <= 0.0) return 0.0;
    const auto n = static_cast<long>(centers_.size());
    const double denom = kind_ == MapKind::Emp ? static_cast<double>(n) : static_cast<double>(n + 1);
    long k = static_cast<long>(std::ceil(p * denom));
    k = std::clamp(k, 1L, n + 1);
    while (k > 1 && static_cast<double>(k - 1) / denom >= p) --k;
    while (k <= n && static_cast<double>(k) / denom < p) ++k;
    if (k > n) return 1.0;
    return centers_[static_cast<std::size_t>(k - 1)];
  }
  double lo = 0.0;
  double hi = 1.0;
  for (int it = 0; it < kInverseIterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (cdf(mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::clamp(0.5 * (lo + hi), 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::vector<double> pit(std::span<const MixtureParams> predictions, const Vector& y) {
  if (static_cast<Eigen::Index>(predictions.size()) != y.size()) {
    throw std::invalid_argument("pit: prediction and target counts differ");
  }
  std::vector<double> z(predictions.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = cdf(predictions[i], y(static_cast<Eigen::Index>(i)));
  return z;
}

std::vector<double> pit(const MdnModel& model, const Matrix& x, const Vector& y) {
  const auto preds = model.predict(x);
  return pit(preds, y);
}

double recalibrated_cdf(const CalibrationMap& map, const MixtureParams& p, double y) {
  return map.cdf(cdf(p, y));
}

double recalibrated_log_pdf(const CalibrationMap& map, const MixtureParams& p, double y) {
  return log_pdf(p, y) + map.log_pdf(cdf(p, y));
}

double recalibrated_quantile(const CalibrationMap& map, const MixtureParams& p, double level) {
  const double inner = std::clamp(map.inverse(level), kLevelGuard, 1.0 - kLevelGuard);
  return quantile(p, inner);
}

double RecalibratedCdf::cdf(const Vector& x, double y) const {
  return recalibrated_cdf(map_, model_->forward(x), y);
}

double RecalibratedCdf::log_pdf(const Vector& x, double y) const {
  return recalibrated_log_pdf(map_, model_->forward(x), y);
}

double RecalibratedCdf::quantile(const Vector& x, double level) const {
  return recalibrated_quantile(map_, model_->forward(x), level);
}

}  // namespace qrt
