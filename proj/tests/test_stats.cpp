#include "qrt/stats.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace qrt::stats;

namespace {

// Two-sided p from all 2^n sign flips of the midranks.
double enumerated_p(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double v : d) {
    if (v != 0.0) nz.push_back(v);
  }
  std::vector<double> mags;
  for (double v : nz) mags.push_back(std::abs(v));
  const auto r = midranks(mags);
  double w = 0.0, total = 0.0;
  for (std::size_t i = 0; i < nz.size(); ++i) {
    total += r[i];
    if (nz[i] > 0) w += r[i];
  }
  const double mid = total / 2.0;
  const std::size_t n = nz.size();
  double extreme = 0.0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) s += r[i];
    }
    if (std::abs(s - mid) >= std::abs(w - mid) - 1e-9) extreme += 1.0;
  }
  return std::min(1.0, extreme / std::ldexp(1.0, static_cast<int>(n)));
}

}  // namespace

TEST_CASE("midranks average tied positions") {
  CHECK(midranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
}

TEST_CASE("cohens d reference value") {
  const std::vector<double> a = {1, 2, 3, 4};
  const std::vector<double> b = {2, 4, 6, 8};
  // pooled SD = sqrt((5 + 20) / 6)
  CHECK(cohens_d(a, b) == doctest::Approx(-2.5 / std::sqrt(25.0 / 6.0)).epsilon(1e-14));
  CHECK(cohens_d(std::vector<double>{1, 1}, std::vector<double>{1, 1}) == 0.0);
  CHECK(std::isinf(cohens_d(std::vector<double>{2, 2}, std::vector<double>{1, 1})));
}

TEST_CASE("friedman against a hand computation") {
  Eigen::MatrixXd s(4, 3);
  s << 1, 2, 3,
       1, 3, 2,
       1, 2, 3,
       2, 1, 3;
  // rank sums 5, 8, 11; chi2 = 12/(4*3*4) * (25+64+121) - 3*4*4 = 4.5
  const auto r = friedman(s);
  CHECK(r.statistic == doctest::Approx(4.5).epsilon(1e-12));
  CHECK(r.p_value == doctest::Approx(std::exp(-4.5 / 2)).epsilon(1e-12));
  const auto avg = average_ranks(s);
  CHECK(avg(0) == doctest::Approx(1.25));
  CHECK(avg(2) == doctest::Approx(2.75));

  Eigen::MatrixXd tied(2, 2);
  tied << 1, 1, 1, 1;
  CHECK(friedman(tied).p_value == 1.0);
}

TEST_CASE("wilcoxon exact p-values against enumeration") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.3, 1.0);
  for (int n = 1; n <= 12; ++n) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> d(static_cast<std::size_t>(n));
      for (auto& v : d) v = std::round(g(rng) * 4.0) / 4.0;
      const auto r = wilcoxon_signed_rank(d);
      CHECK(r.p_value == doctest::Approx(enumerated_p(d)).epsilon(1e-12));
    }
  }
}

TEST_CASE("wilcoxon normal approximation") {
  std::vector<double> d;
  for (int i = 1; i <= 30; ++i) d.push_back(i % 3 == 0 ? -i : i);
  const auto r = wilcoxon_signed_rank(d);
  CHECK_FALSE(r.exact);
  CHECK(r.n == 30);
  // W+ = 465 - (3+6+...+30) = 300; mu = 232.5; var = 30*31*61/24
  const double z = (300 - 232.5 - 0.5) / std::sqrt(30.0 * 31 * 61 / 24);
  CHECK(r.p_value == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(std::vector<double>{0, 0}).p_value == 1.0);
}

TEST_CASE("holm step-down") {
  CHECK(holm(std::vector<double>{0.01, 0.04, 0.03, 0.005}) == std::vector<bool>{true, false, false, true});
  CHECK(holm(std::vector<double>{0.001, 0.02, 0.03}) == std::vector<bool>{true, true, true});
  CHECK(holm(std::vector<double>{0.2, 0.001}) == std::vector<bool>{false, true});
}

TEST_CASE("cliques are maximal contiguous groups") {
  Eigen::VectorXd ranks(4);
  ranks << 1.0, 2.0, 3.0, 4.0;
  std::vector<PairDecision> d = {{0, 1, 0.5, false}, {0, 2, 0.5, false}, {0, 3, 0.01, true},
                                 {1, 2, 0.5, false}, {1, 3, 0.5, false}, {2, 3, 0.5, false}};
  const auto c = cliques(ranks, d);
  REQUIRE(c.size() == 2);
  CHECK(c[0] == std::vector<std::size_t>{0, 1, 2});
  CHECK(c[1] == std::vector<std::size_t>{1, 2, 3});
}

TEST_CASE("type 7 quantiles and letter values") {
  const std::vector<double> v = {4, 1, 3, 2};
  CHECK(quantile(v, 0.5) == 2.5);
  CHECK(quantile(v, 0.25) == 1.75);
  const auto lv = letter_values(v);
  CHECK(lv.q125 == doctest::Approx(1.375));
  CHECK(lv.q875 == doctest::Approx(3.625));
}

TEST_CASE("discreteness") {
  std::vector<double> y;
  for (int i = 0; i < 12; ++i) y.push_back(i);
  y.push_back(0);
  // 12 distinct values, one doubled: top ten hold 11 of 13 rows.
  CHECK(discreteness(y) == doctest::Approx(11.0 / 13.0));
  CHECK(discreteness(std::vector<double>{1, 1, 1}) == 1.0);
}
