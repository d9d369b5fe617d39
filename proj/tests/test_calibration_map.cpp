#include "qrt/calibration_map.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace qrt;

namespace {

double logistic_pdf(double u) {
  const double e = std::exp(-std::abs(u));
  return e / ((1.0 + e) * (1.0 + e));
}

double logistic_cdf(double u) { return 1.0 / (1.0 + std::exp(-u)); }

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  const double h = (b - a) / n;
  double acc = f(a) + f(b);
  for (int i = 1; i < n; ++i) acc += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

MixtureParams standard_normal() { return {{1.0}, {0.0}, {1.0}}; }

}  // namespace

TEST_CASE("scott rule variance and logistic scale") {
  CHECK(kernel_variance(0.1, 32) == doctest::Approx(0.01 * std::pow(32.0, -0.4)).epsilon(1e-15));
  // Logistic variance is pi^2 s^2 / 3.
  const double s = logistic_scale_for_variance(0.04);
  CHECK(M_PI * M_PI * s * s / 3.0 == doctest::Approx(0.04).epsilon(1e-14));
}

TEST_CASE("empirical and conformal step maps") {
  const auto emp = CalibrationMap::build(MapKind::Emp, {0.4, 0.2, 0.8, 0.6});
  const auto dcp = CalibrationMap::build(MapKind::Dcp, {0.4, 0.2, 0.8, 0.6});
  CHECK(emp.centers() == std::vector<double>{0.2, 0.4, 0.6, 0.8});
  CHECK(emp.cdf(0.1) == 0.0);
  CHECK(emp.cdf(0.4) == 0.5);
  CHECK(emp.cdf(0.9) == 1.0);
  CHECK(dcp.cdf(0.4) == 0.4);
  CHECK(dcp.cdf(0.9) == 0.8);
  CHECK(emp.inverse(0.5) == 0.4);
  CHECK(emp.inverse(0.51) == 0.6);
  CHECK(dcp.inverse(0.81) == 1.0);
  CHECK_THROWS_AS(emp.log_pdf(0.5), std::logic_error);
}

TEST_CASE("build rejects bad input") {
  CHECK_THROWS(CalibrationMap::build(MapKind::Emp, {}));
  CHECK_THROWS(CalibrationMap::build(MapKind::Emp, {1.2}));
  CHECK_THROWS(CalibrationMap::build(MapKind::Kde, {0.5}));
  CHECK_THROWS(CalibrationMap::build(MapKind::Refl, {0.5}, 0.0));
  CHECK(parse_map_kind("REFL") == MapKind::Refl);
  CHECK_THROWS(parse_map_kind("refl"));
}

TEST_CASE("kde map matches a direct logistic mixture") {
  const std::vector<double> c = {0.1, 0.35, 0.5, 0.9};
  const auto map = CalibrationMap::build(MapKind::Kde, c, 0.2);
  const double s = map.kernel_scale();
  for (double x : {-0.2, 0.0, 0.3, 0.77, 1.0, 1.3}) {
    double f = 0.0, F = 0.0;
    for (double cj : c) {
      f += logistic_pdf((x - cj) / s) / (4 * s);
      F += logistic_cdf((x - cj) / s) / 4;
    }
    CHECK(map.pdf(x) == doctest::Approx(f).epsilon(1e-12));
    CHECK(map.cdf(x) == doctest::Approx(F).epsilon(1e-12));
  }
}

TEST_CASE("truncated and reflected maps are distributions on the unit interval") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> c(20);
    for (auto& v : c) v = u(rng) * u(rng);
    for (MapKind kind : {MapKind::Trunc, MapKind::Refl}) {
      const auto map = CalibrationMap::build(kind, c, 0.3);
      CHECK(map.cdf(0.0) == 0.0);
      CHECK(map.cdf(1.0) == 1.0);
      CHECK(std::isinf(map.log_pdf(-0.01)));
      // Reflection only folds back [-1, 0) and (1, 2]; the remaining tails are lost.
      double mass = 1.0;
      if (kind == MapKind::Refl) {
        const double s = map.kernel_scale();
        for (double cj : c) mass -= (logistic_cdf((-1.0 - cj) / s) + logistic_cdf((cj - 2.0) / s)) / 20.0;
      }
      CHECK(simpson([&](double x) { return map.pdf(x); }, 0.0, 1.0, 4000) ==
            doctest::Approx(mass).epsilon(1e-10));
      double prev = 0.0;
      for (int i = 1; i <= 50; ++i) {
        const double v = map.cdf(i / 50.0);
        CHECK(v >= prev);
        prev = v;
      }
      for (double p : {0.05, 0.5, 0.95}) CHECK(map.cdf(map.inverse(p)) == doctest::Approx(p).epsilon(1e-9));
    }
  }
}

TEST_CASE("reflected mass is conserved when the kernel is not spread out") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> c(200);
  for (auto& v : c) v = u(rng);
  for (double b : {0.01, 0.05, 0.1, 0.2}) {
    const auto map = CalibrationMap::build(MapKind::Refl, c, b);
    CHECK_FALSE(map.spread_warning());
    CHECK(std::abs(simpson([&](double x) { return map.pdf(x); }, 0.0, 1.0, 20000) - 1.0) <= 1e-6);
  }
  CHECK(CalibrationMap::build(MapKind::Refl, std::vector<double>{0.0}, 0.2).spread_warning());
}

TEST_CASE("reflected cdf is the integral of the reflected density") {
  const auto map = CalibrationMap::build(MapKind::Refl, {0.02, 0.3, 0.31, 0.97}, 0.1);
  for (double x : {0.01, 0.2, 0.5, 0.99}) {
    CHECK(map.cdf(x) == doctest::Approx(simpson([&](double t) { return map.pdf(t); }, 0.0, x, 4000)).epsilon(1e-7));
  }
}

TEST_CASE("windowed evaluation agrees with the full sum for a wide kernel") {
  std::vector<double> c;
  for (int i = 0; i < 50; ++i) c.push_back(i / 49.0);
  const auto map = CalibrationMap::build(MapKind::Refl, c, 5.0);
  CHECK(map.spread_warning());
  const double s = map.kernel_scale();
  const double x = 0.4;
  double f = 0.0;
  for (double cj : c) f += logistic_pdf((x - cj) / s) + logistic_pdf((-x - cj) / s) + logistic_pdf((2 - x - cj) / s);
  CHECK(map.log_pdf(x) == doctest::Approx(std::log(f / (50 * s))).epsilon(1e-12));
}

TEST_CASE("identity map leaves the base forecast unchanged") {
  // A large uniform sample gives a map close to the identity.
  std::vector<double> c;
  for (int i = 0; i < 2000; ++i) c.push_back((i + 0.5) / 2000.0);
  const auto map = CalibrationMap::build(MapKind::Refl, c, 0.05);
  const auto p = standard_normal();
  for (double y : {-1.0, 0.0, 0.7}) {
    CHECK(recalibrated_cdf(map, p, y) == doctest::Approx(cdf(p, y)).epsilon(1e-3));
    CHECK(recalibrated_log_pdf(map, p, y) == doctest::Approx(log_pdf(p, y)).epsilon(1e-2));
  }
  CHECK(recalibrated_quantile(map, p, 0.5) == doctest::Approx(0.0).epsilon(1e-3));
}

TEST_CASE("recalibrated quantile inverts the recalibrated cdf") {
  const auto map = CalibrationMap::build(MapKind::Refl, {0.1, 0.2, 0.25, 0.6, 0.9}, 0.2);
  const MixtureParams p{{0.3, 0.7}, {-1.0, 2.0}, {0.5, 1.5}};
  for (double level : {0.01, 0.3, 0.5, 0.8, 0.99}) {
    const double q = recalibrated_quantile(map, p, level);
    CHECK(recalibrated_cdf(map, p, q) == doctest::Approx(level).epsilon(1e-8));
  }
  CHECK(std::isfinite(recalibrated_quantile(map, p, 0.0)));
  CHECK(std::isfinite(recalibrated_quantile(map, p, 1.0)));
}

TEST_CASE("pit is the predictive cdf at the target") {
  const std::vector<MixtureParams> preds = {standard_normal(), {{1.0}, {1.0}, {2.0}}};
  Vector y(2);
  y << 0.0, 1.0;
  const auto z = pit(preds, y);
  CHECK(z[0] == doctest::Approx(0.5));
  CHECK(z[1] == doctest::Approx(0.5));
  CHECK_THROWS(pit(preds, Vector::Zero(3)));
}
