#include "qrt/trainer.hpp"

#include "qrt/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace qrt {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

Vector gather(const Vector& y, std::span<const std::size_t> idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

double kde_scale(double bandwidth, std::size_t n) {
  return logistic_scale_for_variance(kernel_variance(bandwidth, n));
}

}  // namespace

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::None: return "none";
    case AblationMode::FrozenInit: return "frozen-init";
    case AblationMode::StopGrad: return "stop-grad";
    case AblationMode::LearnedCenters: return "learned-centers";
  }
  return "?";
}

AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "none") return AblationMode::None;
  if (s == "frozen-init") return AblationMode::FrozenInit;
  if (s == "stop-grad") return AblationMode::StopGrad;
  if (s == "learned-centers") return AblationMode::LearnedCenters;
  throw std::invalid_argument("unknown ablation mode '" + s + "'");
}

std::string to_string(Regularizer r) {
  return r == Regularizer::MapEntropy ? "map-entropy" : "vasicek";
}

Regularizer parse_regularizer(const std::string& s) {
  if (s == "map-entropy") return Regularizer::MapEntropy;
  if (s == "vasicek") return Regularizer::Vasicek;
  throw std::invalid_argument("unknown regularizer '" + s + "'");
}

bool MethodSpec::uses_pit_term(double lambda) const {
  return alpha != 0.0 || (tunes_lambda() && lambda != 0.0);
}

void MethodSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("method: empty name");
  auto positive_set = [&](const std::vector<double>& v, const char* what) {
    if (v.empty()) throw std::invalid_argument("method " + name + ": empty " + what);
    for (double b : v) {
      if (!(b > 0.0)) throw std::invalid_argument("method " + name + ": " + what + " must be > 0");
    }
  };
  positive_set(bandwidths, "bandwidths");
  if (posthoc) positive_set(posthoc_bandwidths, "posthoc bandwidths");
  if (tunes_lambda()) {
    if (std::find(lambdas.begin(), lambdas.end(), 0.0) == lambdas.end()) {
      throw std::invalid_argument("method " + name + ": lambda set must contain 0");
    }
    if (alpha != 0.0) throw std::invalid_argument("method " + name + ": lambda tuning requires alpha = 0");
  }
  if (batch_size < 2) throw std::invalid_argument("method " + name + ": batch size must be >= 2");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("method " + name + ": learning rate must be > 0");
  if (max_epochs < 1) throw std::invalid_argument("method " + name + ": max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("method " + name + ": patience must be >= 1");
  if (center_source == CenterSource::Sampled && sample_size < 2) {
    throw std::invalid_argument("method " + name + ": sampled centers need M >= 2");
  }
}

std::vector<std::string> MethodSpec::preset_names() {
  return {"BASE", "QRC", "QREG", "QREGC", "QRT", "QRTC", "QRIC", "QRGC", "QRLC"};
}

MethodSpec MethodSpec::preset(const std::string& name) {
  MethodSpec s;
  s.name = name;
  if (name == "BASE") {
    s.fold_calibration_into_train = true;
  } else if (name == "QRC") {
    s.posthoc = true;
  } else if (name == "QREG" || name == "QREGC") {
    s.lambdas = kDefaultLambdas;
    s.regularizer = Regularizer::Vasicek;
    s.posthoc = name == "QREGC";
  } else if (name == "QRT" || name == "QRTC") {
    s.alpha = 1.0;
    s.posthoc = name == "QRTC";
  } else if (name == "QRIC" || name == "QRGC" || name == "QRLC") {
    s.alpha = 1.0;
    s.posthoc = true;
    s.ablation = name == "QRIC"   ? AblationMode::FrozenInit
                 : name == "QRGC" ? AblationMode::StopGrad
                                  : AblationMode::LearnedCenters;
  } else {
    throw std::invalid_argument("unknown method preset '" + name + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------

LossTerms qrt_loss(ad::Tape& tape, const MdnModel& model,
                   const std::map<std::string, ad::Var>& bound, const Matrix& x, const Vector& y,
                   const LossOptions& opt) {
  const auto b = static_cast<std::size_t>(x.rows());
  if (b < 2) throw std::invalid_argument("qrt_loss: batch needs at least 2 rows");
  if (static_cast<Eigen::Index>(b) != y.size()) throw std::invalid_argument("qrt_loss: x/y size mismatch");

  LossTerms out;
  ad::Var xv = tape.constant(x);
  ad::Var yv = tape.constant(Matrix(y));
  MixtureGraph g = model.forward(tape, bound, xv);
  out.model_evaluations = b;
  ad::Var log_f = mixture_log_pdf(g, yv);
  out.pit = mixture_cdf(g, yv);
  out.base_nll = -ad::mean(log_f);
  out.loss = out.base_nll;

  if (opt.alpha != 0.0) {
    if (!(opt.bandwidth > 0.0)) throw std::invalid_argument("qrt_loss: bandwidth must be > 0");
    ad::Var centers;
    switch (opt.mode) {
      case AblationMode::FrozenInit:
        if (!opt.frozen_centers) throw std::invalid_argument("qrt_loss: frozen-init needs centers");
        centers = tape.constant(*opt.frozen_centers);
        break;
      case AblationMode::LearnedCenters:
        centers = bound.at(kLearnedCentersName);
        break;
      case AblationMode::None:
      case AblationMode::StopGrad:
        if (opt.sample_x) {
          MixtureGraph gs = model.forward(tape, bound, tape.constant(*opt.sample_x));
          centers = mixture_cdf(gs, tape.constant(Matrix(*opt.sample_y)));
          out.model_evaluations += static_cast<std::size_t>(opt.sample_x->rows());
        } else {
          centers = out.pit;
        }
        if (opt.mode == AblationMode::StopGrad) centers = ad::detach(centers);
        break;
    }
    const auto n = static_cast<std::size_t>(centers.rows());
    const std::uint64_t before = tape.kernel_evaluations();
    ad::Var log_phi = ad::reflected_kde_log_pdf(out.pit, centers, kde_scale(opt.bandwidth, n));
    out.kernel_evaluations = tape.kernel_evaluations() - before;
    out.map_term = -ad::mean(log_phi);
    out.loss = out.loss + opt.alpha * out.map_term;
  }

  if (opt.vasicek_lambda != 0.0) {
    const int k = opt.vasicek_window > 0 ? opt.vasicek_window : default_vasicek_window(b);
    bool floored = false;
    ad::Var stat = vasicek_entropy(out.pit, k, &floored);
    out.spacing_floored = floored;
    out.loss = out.loss - opt.vasicek_lambda * stat;
  }
  return out;
}

int default_vasicek_window(std::size_t n) {
  return std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))));
}

VasicekResult vasicek_entropy(std::span<const double> z, int k) {
  const auto n = static_cast<long>(z.size());
  if (k < 1 || k > n - 1) throw std::invalid_argument("vasicek_entropy: need 1 <= k <= N - 1");
  std::vector<double> s(z.begin(), z.end());
  std::sort(s.begin(), s.end());
  VasicekResult r;
  const double factor = std::log(static_cast<double>(n + 1) / k);
  double acc = 0.0;
  for (long i = 0; i + k < n; ++i) {
    double gap = s[static_cast<std::size_t>(i + k)] - s[static_cast<std::size_t>(i)];
    if (gap < kSpacingFloor) {
      gap = kSpacingFloor;
      r.floored = true;
    }
    acc += std::log(gap) + factor;
  }
  r.value = acc / static_cast<double>(n - k);
  return r;
}

ad::Var vasicek_entropy(ad::Var z, int k, bool* floored) {
  const Eigen::Index n = z.value().size();
  if (k < 1 || k > n - 1) throw std::invalid_argument("vasicek_entropy: need 1 <= k <= N - 1");
  ad::Var sorted = ad::sort(z);
  if (sorted.cols() != 1) throw std::invalid_argument("vasicek_entropy: expects a column vector");
  ad::Var gaps = ad::rows(sorted, k, n - k) - ad::rows(sorted, 0, n - k);
  if (floored) *floored = (gaps.value().array() < kSpacingFloor).any();
  ad::Var logs = ad::log(ad::clamp_min(gaps, kSpacingFloor));
  return ad::mean(logs) + std::log(static_cast<double>(n + 1) / k);
}

// ---------------------------------------------------------------------------

SampledCenterSource::SampledCenterSource(std::size_t dataset_size, std::size_t m)
    : n_(dataset_size), m_(std::min(m, dataset_size)) {
  if (m < 2) throw std::invalid_argument("sampled map: M must be >= 2");
  if (dataset_size < 2) throw std::invalid_argument("sampled map: dataset too small");
}

std::vector<std::size_t> SampledCenterSource::draw(std::mt19937_64& rng) const {
  std::vector<std::size_t> idx(n_);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < m_; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_ - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m_);
  return idx;
}

// ---------------------------------------------------------------------------

double TrainHistory::mean_epoch_seconds() const {
  if (epochs.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& e : epochs) acc += e.seconds;
  return acc / static_cast<double>(epochs.size());
}

EarlyStopping::EarlyStopping(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw std::invalid_argument("early stopping: patience must be >= 1");
}

bool EarlyStopping::update(int epoch, double value) {
  if (std::isfinite(value) && (best_epoch_ < 0 || value < best_)) {
    best_ = value;
    best_epoch_ = epoch;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

double validation_nll(const MdnModel& model, const TrainData& data, double alpha,
                      double bandwidth, double* pce_out) {
  const auto preds = model.predict(data.x_val);
  std::vector<double> z = pit(preds, data.y_val);
  double acc = 0.0;
  if (alpha > 0.0) {
    auto map = CalibrationMap::build(MapKind::Refl, pit(model, data.x_train, data.y_train), bandwidth);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      acc -= log_pdf(preds[i], data.y_val(static_cast<Eigen::Index>(i))) + map.log_pdf(z[i]);
      z[i] = map.cdf(z[i]);
    }
  } else {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      acc -= log_pdf(preds[i], data.y_val(static_cast<Eigen::Index>(i)));
    }
  }
  if (pce_out) *pce_out = pce_from_pit(z);
  return acc / static_cast<double>(preds.size());
}

TrainResult train(const MdnConfig& config, const TrainSettings& s, const TrainData& data) {
  const auto n = static_cast<std::size_t>(data.x_train.rows());
  if (n < 2 || data.x_val.rows() == 0) throw std::invalid_argument("train: empty train or validation set");
  if (data.y_train.size() != data.x_train.rows() || data.y_val.size() != data.x_val.rows()) {
    throw std::invalid_argument("train: x/y size mismatch");
  }
  const auto t_start = Clock::now();
  std::mt19937_64 rng(s.seed);
  auto model = std::make_shared<MdnModel>(config, rng());

  const std::size_t batch = std::min(s.batch_size, n);
  const bool mapped = s.alpha != 0.0 || s.vasicek_lambda != 0.0;
  if (s.alpha != 0.0 && !(s.bandwidth > 0.0)) throw std::invalid_argument("train: bandwidth must be > 0");

  if (s.alpha != 0.0 && s.mode == AblationMode::LearnedCenters) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix c(static_cast<Eigen::Index>(batch), 1);
    for (Eigen::Index i = 0; i < c.rows(); ++i) c(i, 0) = u(rng);
    model->params().add(kLearnedCentersName, std::move(c));
  }
  std::optional<SampledCenterSource> sampler;
  if (s.alpha != 0.0 && s.center_source == CenterSource::Sampled) sampler.emplace(n, s.sample_size);

  ad::ParamStore::AdamConfig adam;
  adam.learning_rate = s.learning_rate;

  TrainHistory h;
  h.parameter_count = model->params().parameter_count();
  EarlyStopping stopper(s.patience);
  auto best = model->params().snapshot();
  Matrix frozen;
  bool frozen_ready = false;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < s.max_epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double nll_sum = 0.0;
    std::size_t rows_seen = 0;

    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t size = std::min(batch, n - start);
      if (size < batch && mapped && s.drop_last_when_mapped) break;
      if (size < 2) break;
      const std::span<const std::size_t> idx(order.data() + start, size);
      const Matrix xb = gather_rows(data.x_train, idx);
      const Vector yb = gather(data.y_train, idx);

      LossOptions opt;
      opt.alpha = s.alpha;
      opt.bandwidth = s.bandwidth;
      opt.mode = s.mode;
      opt.vasicek_lambda = s.vasicek_lambda;
      if (s.alpha != 0.0 && s.mode == AblationMode::FrozenInit) {
        if (!frozen_ready) {
          const auto z0 = pit(*model, xb, yb);
          frozen = Eigen::Map<const Vector>(z0.data(), static_cast<Eigen::Index>(z0.size()));
          frozen_ready = true;
        }
        opt.frozen_centers = &frozen;
      }
      Matrix xs;
      Vector ys;
      if (sampler && s.mode != AblationMode::FrozenInit && s.mode != AblationMode::LearnedCenters) {
        const auto sidx = sampler->draw(rng);
        xs = gather_rows(data.x_train, sidx);
        ys = gather(data.y_train, sidx);
        opt.sample_x = &xs;
        opt.sample_y = &ys;
      }

      ad::Tape tape;
      auto bound = model->params().bind(tape);
      LossTerms terms;
      try {
        terms = qrt_loss(tape, *model, bound, xb, yb, opt);
      } catch (const ad::NonFiniteError& e) {
        h.total_seconds = seconds_since(t_start);
        throw DivergenceError(std::string("training diverged: ") + e.what(), h);
      }
      const double loss = terms.loss.scalar();
      if (!std::isfinite(loss)) {
        h.total_seconds = seconds_since(t_start);
        throw DivergenceError("training diverged: non-finite loss", h);
      }
      tape.backward(terms.loss);
      model->params().adam_step(bound, adam);
      if (s.mode == AblationMode::LearnedCenters && s.alpha != 0.0) {
        Matrix& c = model->params().get(kLearnedCentersName);
        c = c.cwiseMax(0.0).cwiseMin(1.0);
      }

      ++h.steps;
      h.model_evaluations += terms.model_evaluations;
      h.kernel_evaluations += terms.kernel_evaluations;
      h.spacing_floored = h.spacing_floored || terms.spacing_floored;
      if (s.alpha != 0.0) {
        h.kernel_per_step_min = h.mapped_steps == 0
                                    ? terms.kernel_evaluations
                                    : std::min(h.kernel_per_step_min, terms.kernel_evaluations);
        h.kernel_per_step_max = std::max(h.kernel_per_step_max, terms.kernel_evaluations);
        ++h.mapped_steps;
      }
      loss_sum += loss * static_cast<double>(size);
      nll_sum += terms.base_nll.scalar() * static_cast<double>(size);
      rows_seen += size;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = rows_seen ? loss_sum / static_cast<double>(rows_seen) : 0.0;
    rec.train_nll = rows_seen ? nll_sum / static_cast<double>(rows_seen) : 0.0;
    if (s.validation_override) {
      rec.val_nll = s.validation_override(*model, epoch);
      rec.val_pce = std::numeric_limits<double>::quiet_NaN();
    } else {
      rec.val_nll = validation_nll(*model, data, s.alpha, s.bandwidth, &rec.val_pce);
    }
    rec.seconds = seconds_since(t_epoch);
    h.epochs.push_back(rec);

    if (stopper.update(epoch, rec.val_nll)) best = model->params().snapshot();
    if (stopper.should_stop()) {
      h.early_stopped = true;
      break;
    }
  }

  h.total_seconds = seconds_since(t_start);
  if (stopper.best_epoch() < 0) throw DivergenceError("training diverged: no finite validation NLL", h);
  h.selected_epoch = stopper.best_epoch();
  model->params().restore(best);
  return {model, std::move(h)};
}

// ---------------------------------------------------------------------------

RecalibratedCdf posthoc_recalibrate(std::shared_ptr<const MdnModel> model, const Matrix& x_cal,
                                    const Vector& y_cal, MapKind kind,
                                    std::optional<double> bandwidth) {
  if (x_cal.rows() == 0) throw std::invalid_argument("posthoc_recalibrate: empty calibration split");
  auto z = pit(*model, x_cal, y_cal);
  auto map = CalibrationMap::build(kind, std::move(z), has_density(kind) ? bandwidth : std::nullopt);
  return RecalibratedCdf(std::move(model), std::move(map));
}

double select_bandwidth(std::span<const double> candidates,
                        const std::function<double(double)>& score) {
  if (candidates.empty()) throw std::invalid_argument("select_bandwidth: no candidates");
  std::vector<double> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  double best_b = sorted.front();
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (double b : sorted) {
    const double v = score(b);
    if (std::isfinite(v) && (!any || v < best)) {
      best = v;
      best_b = b;
      any = true;
    }
  }
  return best_b;
}

double select_bandwidth(std::span<const double> candidates, std::span<const double> cal_pit,
                        std::span<const MixtureParams> val_pred, const Vector& y_val) {
  std::vector<double> z_val(val_pred.size());
  for (std::size_t i = 0; i < val_pred.size(); ++i) z_val[i] = cdf(val_pred[i], y_val(static_cast<Eigen::Index>(i)));
  return select_bandwidth(candidates, [&](double b) {
    const auto map = CalibrationMap::build(MapKind::Refl, {cal_pit.begin(), cal_pit.end()}, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < val_pred.size(); ++i) {
      acc -= log_pdf(val_pred[i], y_val(static_cast<Eigen::Index>(i))) + map.log_pdf(z_val[i]);
    }
    return acc / static_cast<double>(val_pred.size());
  });
}

double select_lambda(std::span<const LambdaCandidate> candidates) {
  const auto zero = std::find_if(candidates.begin(), candidates.end(),
                                 [](const LambdaCandidate& c) { return c.lambda == 0.0; });
  if (zero == candidates.end()) throw std::invalid_argument("select_lambda: lambda = 0 candidate missing");
  const double cap = 1.10 * zero->crps;
  const LambdaCandidate* best = &*zero;
  for (const auto& c : candidates) {
    if (!(c.crps <= cap)) continue;
    if (c.pce < best->pce || (c.pce == best->pce && c.lambda < best->lambda)) best = &c;
  }
  return best->lambda;
}

}  // namespace qrt
