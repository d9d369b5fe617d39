#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string name;
  Matrix x;
  Vector y;

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }
  Dataset subset(std::span<const std::size_t> rows) const;
};

enum class HeaderMode { Auto, Present, Absent };

struct LoadOptions {
  char delimiter = ',';
  HeaderMode header = HeaderMode::Auto;
};

// Delimited numeric table; the last column is the target.
Dataset load_table(const std::string& path, const LoadOptions& options = {});
void write_table(const std::string& path, const Dataset& data);

inline constexpr std::size_t kDefaultTrainCap = 53164;

struct Splits {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> calibration;
  std::vector<std::size_t> test;
  bool fold_calibration_into_train = false;

  // Training rows actually used for fitting (train, plus calibration when folded).
  std::vector<std::size_t> fit_rows() const;
};

// Seeded permutation sliced into train/validation/calibration/test at
// 65/10/15/10 percent. Held-out sizes are floor(p n); the remainder goes to train.
Splits split(std::size_t n, std::uint64_t seed);
// Keeps at most `cap` training rows (in permutation order).
void cap_training_rows(Splits& splits, std::size_t cap = kDefaultTrainCap);

// z-scoring with statistics from the training partition only. Constant
// columns keep shift 0 and scale 1 so they pass through unchanged.
struct Standardizer {
  Vector x_mean;
  Vector x_scale;
  double y_mean = 0.0;
  double y_scale = 1.0;

  static Standardizer fit(const Dataset& data, std::span<const std::size_t> train_rows);
  Matrix transform_x(const Matrix& x) const;
  Vector transform_y(const Vector& y) const;
  double transform_y(double y) const { return (y - y_mean) / y_scale; }
  Vector inverse_y(const Vector& y) const;
  double inverse_y(double y) const { return y * y_scale + y_mean; }
};

enum class SynthKind { LinearGaussian, Heteroscedastic, Bimodal, Discrete };

std::string to_string(SynthKind kind);
SynthKind parse_synth_kind(const std::string& s);

// Generative forms (eps ~ N(0, 1) independent of x):
//   linear-gaussian: x ~ N(0, I_3), y = x . (1, -0.5, 0.25) + eps
//   heteroscedastic: x ~ U(-2, 2)^2, y = x1 + 0.5 x2 + (0.2 + 0.8 |x1|) eps
//   bimodal:         x ~ U(-1, 1),   y = s (2 + x) + 0.3 eps, s = +-1 equiprobable
//   discrete:        x ~ N(0, I_2),  y = clamp(round(x1 + 0.5 x2 + 0.7 eps), -2, 2)
Dataset synth(SynthKind kind, std::size_t n, std::uint64_t seed);

}  // namespace qrt
