#pragma once

#include "qrt/calibration_map.hpp"
#include "qrt/mdn.hpp"

#include <span>
#include <vector>

namespace qrt {

inline constexpr int kPceLevels = 100;
inline constexpr int kCrpsLevels = 99;
inline constexpr int kSdGridLevels = 512;

struct MetricReport {
  double nll = 0.0;
  double pce = 0.0;
  double crps = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
  int levels = kPceLevels;
};

// A batch of predictive distributions in standardized target units, optionally
// composed with a calibration map. `y_scale` is the training-set target SD used
// to report NLL, CRPS and SD in original units.
struct Forecast {
  std::span<const MixtureParams> base;
  const CalibrationMap* map = nullptr;
  double y_scale = 1.0;
};

// Mean negative log density, with log(y_scale) added back per point.
double nll(const Forecast& f, const Vector& y);
// Per-point -log f (standardized units, no Jacobian).
std::vector<double> pointwise_nll(const Forecast& f, const Vector& y);

// PIT values of the (possibly recalibrated) forecast.
std::vector<double> forecast_pit(const Forecast& f, const Vector& y);

// (1/M) sum_j |a_j - EMP(a_j)| with a_j = j / (M + 1).
double pce_from_pit(std::span<const double> z, int levels = kPceLevels);
double pce(const Forecast& f, const Vector& y, int levels = kPceLevels);

// 2/L sum_j (1{y <= q_j} - a_j)(q_j - y) over midpoint levels a_j = (j - 1/2)/L.
double crps(const Forecast& f, const Vector& y, int levels = kCrpsLevels);
double crps_single(const MixtureParams& p, double y, int levels = kCrpsLevels);

// Closed-form mixture SD for base forecasts; 512-point quantile grid otherwise.
double mean_sd(const Forecast& f);

MetricReport evaluate(const Forecast& f, const Vector& y);

}  // namespace qrt
