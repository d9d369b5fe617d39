#pragma once

#include "qrt/mdn.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qrt {

enum class MapKind { Emp, Dcp, Kde, Trunc, Refl };

std::string to_string(MapKind kind);
MapKind parse_map_kind(const std::string& s);
bool has_density(MapKind kind);

// Variance of the logistic kernel under Scott's rule: b^2 n^(-2/5).
double kernel_variance(double bandwidth, std::size_t n);
// Logistic scale with the given variance: sqrt(3 var) / pi.
double logistic_scale_for_variance(double variance);

// Estimate of the PIT distribution, used to recalibrate a predictive CDF.
// Immutable after build().
class CalibrationMap {
 public:
  static CalibrationMap build(MapKind kind, std::vector<double> centers,
                              std::optional<double> bandwidth = std::nullopt);

  MapKind kind() const { return kind_; }
  // Sorted ascending.
  const std::vector<double>& centers() const { return centers_; }
  std::optional<double> bandwidth() const { return bandwidth_; }
  double kernel_variance() const { return variance_; }
  double kernel_scale() const { return scale_; }
  // Kernel mass outside [-1, 2] exceeded 1e-9 at build time (REFL only).
  bool spread_warning() const { return spread_warning_; }

  double cdf(double level) const;
  // Density of the map; EMP and DCP have none and throw std::logic_error.
  double pdf(double level) const;
  double log_pdf(double level) const;
  // Continuous kinds: bisection on [0, 1]. Step kinds: smallest level with
  // cdf(level) >= p, or 1 when no center reaches p.
  double inverse(double p) const;

 private:
  CalibrationMap() = default;

  // Raw (unbounded) KDE cdf and log density.
  double raw_cdf(double x) const;
  double raw_log_pdf(double x) const;
  double refl_log_pdf(double x) const;
  // sum_j sigmoid((q - c_j) / scale), skipping saturated centers.
  double sigmoid_sum(double q) const;
  // log sum over the shifted queries qs of sum_j k((q - c_j) / scale), k the
  // standard logistic density, skipping centers whose terms vanish.
  double log_kernel_sum(std::span<const double> qs) const;

  MapKind kind_ = MapKind::Emp;
  std::vector<double> centers_;
  std::optional<double> bandwidth_;
  double variance_ = 0.0;
  double scale_ = 0.0;
  double trunc_mass_ = 1.0;
  double trunc_low_ = 0.0;
  bool spread_warning_ = false;
};

// Z_i = F(y_i | x_i).
std::vector<double> pit(const MdnModel& model, const Matrix& x, const Vector& y);
std::vector<double> pit(std::span<const MixtureParams> predictions, const Vector& y);

// Phi o F for a single predictive mixture.
double recalibrated_cdf(const CalibrationMap& map, const MixtureParams& p, double y);
double recalibrated_log_pdf(const CalibrationMap& map, const MixtureParams& p, double y);
double recalibrated_quantile(const CalibrationMap& map, const MixtureParams& p, double level);

// Composition of a calibration map over a base model's predictive CDF.
class RecalibratedCdf {
 public:
  RecalibratedCdf(std::shared_ptr<const MdnModel> model, CalibrationMap map)
      : model_(std::move(model)), map_(std::move(map)) {}

  const MdnModel& model() const { return *model_; }
  const CalibrationMap& map() const { return map_; }

  double cdf(const Vector& x, double y) const;
  double log_pdf(const Vector& x, double y) const;
  double quantile(const Vector& x, double level) const;

 private:
  std::shared_ptr<const MdnModel> model_;
  CalibrationMap map_;
};

}  // namespace qrt
