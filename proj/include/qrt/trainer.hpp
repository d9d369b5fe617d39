#pragma once

#include "qrt/autodiff.hpp"
#include "qrt/calibration_map.hpp"
#include "qrt/mdn.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrt {

enum class AblationMode { None, FrozenInit, StopGrad, LearnedCenters };
enum class Regularizer { MapEntropy, Vasicek };
enum class CenterSource { Batch, Sampled };

std::string to_string(AblationMode m);
AblationMode parse_ablation_mode(const std::string& s);
std::string to_string(Regularizer r);
Regularizer parse_regularizer(const std::string& s);

inline const std::vector<double> kDefaultBandwidths = {0.01, 0.05, 0.1, 0.2};
inline const std::vector<double> kDefaultLambdas = {0.0, 0.01, 0.05, 0.2, 1.0, 5.0};
inline constexpr char kLearnedCentersName[] = "calib.centers";

// One row of the method table plus optimizer and stopping settings.
//   BASE  alpha=0               C=false  (calibration split folded into train)
//   QRC   alpha=0               C=true
//   QREG  alpha=-lambda, tuned  C=false
//   QREGC alpha=-lambda, tuned  C=true
//   QRT   alpha=1               C=false
//   QRTC  alpha=1               C=true
//   QRIC / QRGC / QRLC: QRTC with frozen-init / stop-grad / learned-centers.
struct MethodSpec {
  std::string name;
  double alpha = 0.0;
  bool posthoc = false;
  // Training-time bandwidth candidates (alpha > 0 or map-entropy QREG).
  std::vector<double> bandwidths = kDefaultBandwidths;
  // Candidates for the post-hoc map bandwidth.
  std::vector<double> posthoc_bandwidths = kDefaultBandwidths;
  // Non-empty for QREG-style methods; alpha is then -lambda (map entropy) or
  // the Vasicek penalty weight is lambda.
  std::vector<double> lambdas;
  Regularizer regularizer = Regularizer::MapEntropy;
  AblationMode ablation = AblationMode::None;
  CenterSource center_source = CenterSource::Batch;
  std::size_t sample_size = 0;  // M for CenterSource::Sampled
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  int max_epochs = 1000;
  int patience = 30;
  bool drop_last_when_mapped = true;
  bool fold_calibration_into_train = false;

  bool tunes_lambda() const { return !lambdas.empty(); }
  // Whether the loss depends on a batch-derived map or spacing statistic.
  bool uses_pit_term(double lambda) const;
  void validate() const;

  static MethodSpec preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

// ---------------------------------------------------------------------------
// Loss

struct LossOptions {
  double alpha = 0.0;
  double bandwidth = 0.1;
  AblationMode mode = AblationMode::None;
  // Vasicek penalty weight; the loss gets -lambda * statistic.
  double vasicek_lambda = 0.0;
  int vasicek_window = 0;  // 0 -> ceil(sqrt(B))
  // FrozenInit: fixed center values (n x 1).
  const Matrix* frozen_centers = nullptr;
  // Sampled source: map centers come from the PITs of these rows instead of
  // the batch.
  const Matrix* sample_x = nullptr;
  const Vector* sample_y = nullptr;
};

struct LossTerms {
  ad::Var loss;
  ad::Var base_nll;   // -(1/B) sum log f
  ad::Var map_term;   // -(1/B) sum log phi(Z); unset when alpha == 0
  ad::Var pit;        // B x 1
  std::size_t model_evaluations = 0;
  std::uint64_t kernel_evaluations = 0;
  bool spacing_floored = false;
};

LossTerms qrt_loss(ad::Tape& tape, const MdnModel& model,
                   const std::map<std::string, ad::Var>& bound, const Matrix& x, const Vector& y,
                   const LossOptions& options);

// Minimum spacing before taking logs.
inline constexpr double kSpacingFloor = 1e-12;

struct VasicekResult {
  double value = 0.0;
  bool floored = false;
};

// (1/(N-k)) sum_{i=1}^{N-k} log[(N+1)/k (Z_(i+k) - Z_(i))].
VasicekResult vasicek_entropy(std::span<const double> z, int k);
int default_vasicek_window(std::size_t n);
ad::Var vasicek_entropy(ad::Var z, int k, bool* floored = nullptr);

// ---------------------------------------------------------------------------
// Center sampling (sampled calibration map)

class SampledCenterSource {
 public:
  SampledCenterSource(std::size_t dataset_size, std::size_t m);
  std::size_t sample_size() const { return m_; }
  // Indices drawn without replacement.
  std::vector<std::size_t> draw(std::mt19937_64& rng) const;

 private:
  std::size_t n_;
  std::size_t m_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double val_pce = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int selected_epoch = -1;
  bool early_stopped = false;
  std::size_t steps = 0;
  std::uint64_t kernel_evaluations = 0;
  std::uint64_t model_evaluations = 0;
  // Kernel evaluations of the loss map term, per step with a map term.
  std::uint64_t kernel_per_step_min = 0;
  std::uint64_t kernel_per_step_max = 0;
  std::size_t mapped_steps = 0;
  bool spacing_floored = false;
  std::size_t parameter_count = 0;
  double total_seconds = 0.0;

  double mean_epoch_seconds() const;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  // Returns true when `value` improves on the best so far (strictly).
  bool update(int epoch, double value);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_value() const { return best_; }

 private:
  int patience_;
  int best_epoch_ = -1;
  double best_;
  int since_best_ = 0;
};

// Standardized training and validation arrays.
struct TrainData {
  Matrix x_train;
  Vector y_train;
  Matrix x_val;
  Vector y_val;
};

struct TrainSettings {
  double alpha = 0.0;
  double bandwidth = 0.1;
  double vasicek_lambda = 0.0;
  AblationMode mode = AblationMode::None;
  CenterSource center_source = CenterSource::Batch;
  std::size_t sample_size = 0;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  int max_epochs = 1000;
  int patience = 30;
  bool drop_last_when_mapped = true;
  std::uint64_t seed = 0;
  // Replaces the validation NLL (e.g. for tests of the stopping rule).
  std::function<double(const MdnModel&, int epoch)> validation_override;
};

struct TrainResult {
  std::shared_ptr<MdnModel> model;
  TrainHistory history;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainHistory history)
      : std::runtime_error(what), history(std::move(history)) {}
  TrainHistory history;
};

TrainResult train(const MdnConfig& config, const TrainSettings& settings, const TrainData& data);

// Validation NLL used for early stopping: base NLL, or for alpha > 0 the NLL
// of the model recalibrated with a REFL map built from all training PITs.
double validation_nll(const MdnModel& model, const TrainData& data, double alpha,
                      double bandwidth, double* pce_out = nullptr);

// ---------------------------------------------------------------------------
// Post-hoc recalibration and selection

RecalibratedCdf posthoc_recalibrate(std::shared_ptr<const MdnModel> model, const Matrix& x_cal,
                                    const Vector& y_cal, MapKind kind,
                                    std::optional<double> bandwidth);

// argmin of `score`; ties go to the smaller bandwidth.
double select_bandwidth(std::span<const double> candidates,
                        const std::function<double(double)>& score);
// REFL map on the calibration PITs, scored by validation NLL.
double select_bandwidth(std::span<const double> candidates, std::span<const double> cal_pit,
                        std::span<const MixtureParams> val_pred, const Vector& y_val);

struct LambdaCandidate {
  double lambda = 0.0;
  double crps = 0.0;
  double pce = 0.0;
};

// Minimum PCE among candidates with CRPS <= 1.10 x CRPS(lambda = 0); falls
// back to lambda = 0. A candidate with lambda == 0 must be present.
double select_lambda(std::span<const LambdaCandidate> candidates);

}  // namespace qrt
