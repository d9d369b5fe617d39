#pragma once

#include "qrt/autodiff.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace qrt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Relu, Tanh };

struct MdnConfig {
  int input_dim = 1;
  int hidden_layers = 3;
  int width = 128;
  int mixture_size = 3;
  Activation activation = Activation::Relu;

  void validate() const;
};

// Gaussian mixture predictive distribution for one input.
struct MixtureParams {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> scales;

  std::size_t size() const { return weights.size(); }
  void validate() const;
};

double log_pdf(const MixtureParams& p, double y);
double pdf(const MixtureParams& p, double y);
double cdf(const MixtureParams& p, double y);
// Bracketed bisection; |cdf(result) - level| <= 1e-10.
double quantile(const MixtureParams& p, double level);
double mixture_mean(const MixtureParams& p);
double mixture_variance(const MixtureParams& p);

// Tape nodes describing a batch of mixtures, one row per input.
struct MixtureGraph {
  ad::Var means;       // n x K
  ad::Var scales;      // n x K
  ad::Var log_weights; // n x K
};

// log f(y_i | x_i), n x 1.
ad::Var mixture_log_pdf(const MixtureGraph& g, ad::Var y);
// F(y_i | x_i), n x 1.
ad::Var mixture_cdf(const MixtureGraph& g, ad::Var y);

inline constexpr double kScaleFloor = 1e-6;

// MLP hypernetwork: x -> (mu, rho, logits), sigma = max(softplus(rho), floor),
// w = softmax(logits).
class MdnModel {
 public:
  MdnModel(const MdnConfig& config, std::uint64_t seed);
  MdnModel(const MdnConfig& config, ad::ParamStore params);

  const MdnConfig& config() const { return config_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  MixtureGraph forward(ad::Tape& tape, const std::map<std::string, ad::Var>& bound,
                       ad::Var x) const;
  MixtureParams forward(const Vector& x) const;
  std::vector<MixtureParams> predict(const Matrix& x) const;

  void save(std::ostream& os) const;
  static MdnModel load(std::istream& is);
  void save(const std::string& path) const;
  static MdnModel load(const std::string& path);

  static std::string weight_name(int layer);
  static std::string bias_name(int layer);

 private:
  MdnConfig config_;
  ad::ParamStore params_;
};

}  // namespace qrt
