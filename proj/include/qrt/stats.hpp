#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

namespace qrt::stats {

// (mean_a - mean_b) / pooled SD (n - 1 denominators). Zero pooled SD gives 0
// for equal means and a signed infinity otherwise.
double cohens_d(std::span<const double> a, std::span<const double> b);

// Midranks (1-based) of `values`, ascending.
std::vector<double> midranks(std::span<const double> values);

// Per-row ranks of a (datasets x methods) score matrix; 1 = best.
Eigen::MatrixXd rank_rows(const Eigen::MatrixXd& scores, bool lower_is_better = true);
Eigen::VectorXd average_ranks(const Eigen::MatrixXd& scores, bool lower_is_better = true);

struct FriedmanResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Tie-corrected Friedman chi-square over a (datasets x methods) matrix of
// ranks or scores (ranked per row).
FriedmanResult friedman(const Eigen::MatrixXd& scores, bool lower_is_better = true);

struct SignedRankResult {
  double w_plus = 0.0;
  std::size_t n = 0;  // nonzero differences
  double p_value = 1.0;
  bool exact = false;
};

inline constexpr std::size_t kExactSignedRankMax = 20;

// Two-sided Wilcoxon signed-rank test on paired differences. Zeros dropped,
// ties midranked; exact null distribution for n <= 20, normal approximation
// with tie and continuity correction above.
SignedRankResult wilcoxon_signed_rank(std::span<const double> differences);

// Holm step-down: reject[i] for each raw p-value.
std::vector<bool> holm(std::span<const double> p_values, double alpha = 0.05);

struct PairDecision {
  std::size_t a = 0;
  std::size_t b = 0;
  double p_value = 1.0;
  bool significant = false;
};

// Wilcoxon on every method pair of a (datasets x methods) matrix, Holm over all pairs.
std::vector<PairDecision> wilcoxon_holm(const Eigen::MatrixXd& scores, double alpha = 0.05);

// Maximal groups of methods, contiguous in average-rank order, with no
// significant pair inside.
std::vector<std::vector<std::size_t>> cliques(const Eigen::VectorXd& ranks,
                                              std::span<const PairDecision> decisions);

struct LetterValues {
  double q125 = 0.0;
  double q25 = 0.0;
  double q50 = 0.0;
  double q75 = 0.0;
  double q875 = 0.0;
};

// Linear-interpolation quantile (type 7).
double quantile(std::span<const double> values, double level);
LetterValues letter_values(std::span<const double> values);

// Frequency mass of the 10 most frequent distinct values. Among values tied at
// the cut, smaller values are taken first.
double discreteness(std::span<const double> y);

}  // namespace qrt::stats
