#include "qrt/metrics.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace qrt;

namespace {

double gaussian_crps(double mu, double sigma, double y) {
  const double z = (y - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI);
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return sigma * (z * (2 * cdf - 1) + 2 * pdf - 1 / std::sqrt(M_PI));
}

}  // namespace

TEST_CASE("pce against a hand count") {
  const std::vector<double> z = {0.2, 0.5, 0.5, 0.9};
  double ref = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double a = j / 101.0;
    double emp = 0.0;
    for (double v : z) emp += v <= a ? 0.25 : 0.0;
    ref += std::abs(a - emp);
  }
  CHECK(pce_from_pit(z) == doctest::Approx(ref / 100).epsilon(1e-14));
  CHECK(pce_from_pit(z, 3) == doctest::Approx(0.25 / 3).epsilon(1e-14));
}

TEST_CASE("pce is near zero for an exactly uniform sample") {
  std::vector<double> z;
  for (int i = 0; i < 10000; ++i) z.push_back((i + 0.5) / 10000.0);
  CHECK(pce_from_pit(z) < 1e-4);
}

TEST_CASE("crps matches the gaussian closed form") {
  for (double sigma : {0.1, 1.0, 10.0}) {
    for (double k : {-3.0, -1.0, 0.0, 0.5, 3.0}) {
      const MixtureParams p{{1.0}, {0.0}, {sigma}};
      const double ref = gaussian_crps(0.0, sigma, k * sigma);
      CHECK(crps_single(p, k * sigma) == doctest::Approx(ref).epsilon(0.01));
    }
  }
}

TEST_CASE("nll adds the log of the target scale") {
  const std::vector<MixtureParams> preds = {{{1.0}, {0.0}, {1.0}}};
  Vector y(1);
  y << 0.0;
  Forecast f{preds, nullptr, 1.0};
  const double base = nll(f, y);
  CHECK(base == doctest::Approx(0.5 * std::log(2 * M_PI)).epsilon(1e-14));
  f.y_scale = 3.0;
  CHECK(nll(f, y) == doctest::Approx(base + std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("sd closed form and quantile grid agree") {
  const std::vector<MixtureParams> preds = {{{0.4, 0.6}, {-1.0, 1.0}, {0.5, 0.8}}};
  const double var = 0.4 * (0.25 + 1) + 0.6 * (0.64 + 1) - std::pow(0.4 * -1 + 0.6 * 1, 2);
  Forecast f{preds, nullptr, 2.0};
  CHECK(mean_sd(f) == doctest::Approx(2.0 * std::sqrt(var)).epsilon(1e-12));

  std::vector<double> c;
  for (int i = 0; i < 4000; ++i) c.push_back((i + 0.5) / 4000.0);
  const auto identity = CalibrationMap::build(MapKind::Refl, c, 0.01);
  f.map = &identity;
  CHECK(mean_sd(f) == doctest::Approx(2.0 * std::sqrt(var)).epsilon(0.02));
}

TEST_CASE("evaluate bundles the four metrics") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  std::vector<MixtureParams> preds;
  Vector y(400);
  for (int i = 0; i < 400; ++i) {
    preds.push_back({{1.0}, {0.0}, {1.0}});
    y(i) = n01(rng);
  }
  const auto r = evaluate(Forecast{preds, nullptr, 1.0}, y);
  CHECK(r.n == 400);
  CHECK(r.pce < 0.05);
  CHECK(r.sd == doctest::Approx(1.0));
  CHECK(r.crps == doctest::Approx(crps(Forecast{preds, nullptr, 1.0}, y)));
  CHECK(r.nll == doctest::Approx(nll(Forecast{preds, nullptr, 1.0}, y)));
}
