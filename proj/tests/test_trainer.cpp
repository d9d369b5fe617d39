#include "qrt/calibration_map.hpp"
#include "qrt/data.hpp"
#include "qrt/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

using namespace qrt;

namespace {

MdnConfig small_config(int input_dim) {
  MdnConfig c;
  c.input_dim = input_dim;
  c.hidden_layers = 2;
  c.width = 4;
  c.mixture_size = 2;
  return c;
}

struct Batch {
  Matrix x;
  Vector y;
};

Batch random_batch(std::mt19937_64& rng, int b, int d) {
  std::normal_distribution<double> g;
  Batch out{Matrix(b, d), Vector(b)};
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < d; ++j) out.x(i, j) = g(rng);
    out.y(i) = g(rng);
  }
  return out;
}

TrainData toy_data(std::size_t n, std::uint64_t seed) {
  const auto d = synth(SynthKind::LinearGaussian, n, seed);
  const std::size_t nt = n * 4 / 5;
  TrainData t;
  t.x_train = d.x.topRows(static_cast<Eigen::Index>(nt));
  t.y_train = d.y.head(static_cast<Eigen::Index>(nt));
  t.x_val = d.x.bottomRows(static_cast<Eigen::Index>(n - nt));
  t.y_val = d.y.tail(static_cast<Eigen::Index>(n - nt));
  return t;
}

}  // namespace

TEST_CASE("vasicek estimator reference values") {
  // Spacings of an evenly spread sample: k/(N+1) each, so the estimate is 0.
  std::vector<double> z;
  for (int i = 1; i <= 99; ++i) z.push_back(i / 100.0);
  CHECK(vasicek_entropy(z, 10).value == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(default_vasicek_window(99) == 10);
  CHECK(default_vasicek_window(100) == 10);
  CHECK(default_vasicek_window(101) == 11);

  // Halving every spacing lowers the estimate by log 2.
  std::vector<double> half;
  for (double v : z) half.push_back(v / 2);
  CHECK(vasicek_entropy(half, 10).value == doctest::Approx(-std::log(2.0)).epsilon(1e-12));

  const auto tied = vasicek_entropy(std::vector<double>{0.5, 0.5, 0.5, 0.9}, 1);
  CHECK(tied.floored);
  CHECK(std::isfinite(tied.value));
  CHECK_THROWS(vasicek_entropy(std::vector<double>{0.1, 0.2}, 2));
}

TEST_CASE("tape vasicek matches the plain version and differentiates") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Matrix z(30, 1);
  for (int i = 0; i < 30; ++i) z(i, 0) = u(rng);
  ad::Tape t;
  const auto v = vasicek_entropy(t.leaf(z), 6);
  const std::vector<double> zs(z.data(), z.data() + 30);
  CHECK(v.scalar() == doctest::Approx(vasicek_entropy(zs, 6).value).epsilon(1e-13));
  const auto r = ad::finite_diff_check([](ad::Tape&, ad::Var x) { return vasicek_entropy(x, 6); }, z, 1e-8);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("loss terms decompose and count kernel evaluations") {
  std::mt19937_64 rng(2);
  const MdnModel model(small_config(3), 9);
  const auto b = random_batch(rng, 16, 3);
  ad::Tape t;
  const auto bound = model.params().bind(t);
  LossOptions opt;
  opt.alpha = 0.7;
  opt.bandwidth = 0.1;
  const auto terms = qrt_loss(t, model, bound, b.x, b.y, opt);
  CHECK(terms.loss.scalar() == doctest::Approx(terms.base_nll.scalar() + 0.7 * terms.map_term.scalar()).epsilon(1e-14));
  CHECK(terms.kernel_evaluations == 3u * 16u * 16u);
  CHECK(terms.model_evaluations == 16);

  const auto preds = model.predict(b.x);
  double nll = 0.0;
  for (int i = 0; i < 16; ++i) nll -= log_pdf(preds[static_cast<std::size_t>(i)], b.y(i));
  CHECK(terms.base_nll.scalar() == doctest::Approx(nll / 16).epsilon(1e-12));

  const auto z = pit(preds, b.y);
  const auto map = CalibrationMap::build(MapKind::Refl, z, 0.1);
  double m = 0.0;
  for (double v : z) m -= map.log_pdf(v);
  CHECK(terms.map_term.scalar() == doctest::Approx(m / 16).epsilon(1e-10));
}

TEST_CASE("vasicek penalty enters with a negative sign") {
  std::mt19937_64 rng(3);
  const MdnModel model(small_config(2), 1);
  const auto b = random_batch(rng, 25, 2);
  ad::Tape t;
  const auto bound = model.params().bind(t);
  LossOptions opt;
  opt.vasicek_lambda = 0.5;
  const auto terms = qrt_loss(t, model, bound, b.x, b.y, opt);
  const auto z = pit(model, b.x, b.y);
  const double h = vasicek_entropy(z, 5).value;
  CHECK(terms.loss.scalar() == doctest::Approx(terms.base_nll.scalar() - 0.5 * h).epsilon(1e-12));
  CHECK(terms.kernel_evaluations == 0);
}

TEST_CASE("sampled center source draws distinct rows") {
  const SampledCenterSource src(50, 20);
  std::mt19937_64 rng(0);
  const auto idx = src.draw(rng);
  CHECK(idx.size() == 20);
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 20);
  CHECK(*std::max_element(idx.begin(), idx.end()) < 50);
  CHECK(SampledCenterSource(5, 20).sample_size() == 5);
  CHECK_THROWS(SampledCenterSource(10, 1));
}

TEST_CASE("sampled centers cover the training rows evenly") {
  const SampledCenterSource src(50, 20);
  std::mt19937_64 rng(11);
  std::vector<int> hits(50, 0);
  for (int d = 0; d < 1000; ++d) {
    for (auto i : src.draw(rng)) ++hits[i];
  }
  const double p = 20.0 / 50.0;
  const double se = std::sqrt(1000 * p * (1 - p));
  for (int h : hits) CHECK(std::abs(h - 1000 * p) <= 3 * se);
}

TEST_CASE("early stopping counts strictly non-improving epochs") {
  EarlyStopping es(3);
  CHECK(es.update(0, 1.0));
  CHECK_FALSE(es.update(1, 1.0));
  CHECK_FALSE(es.update(2, 2.0));
  CHECK_FALSE(es.should_stop());
  CHECK(es.update(3, 0.5));
  for (int e = 4; e < 7; ++e) es.update(e, 0.6);
  CHECK(es.should_stop());
  CHECK(es.best_epoch() == 3);
  CHECK(es.best_value() == 0.5);
  CHECK_FALSE(EarlyStopping(2).update(0, std::nan("")));
}

TEST_CASE("training restores the best epoch and drops the last partial batch") {
  const auto data = toy_data(250, 1);
  TrainSettings s;
  s.alpha = 1.0;
  s.batch_size = 64;  // 200 rows: three full batches, one dropped
  s.max_epochs = 8;
  s.patience = 3;
  s.seed = 5;
  const std::vector<double> val = {3.0, 2.0, 2.5, 1.0, 1.5, 1.2, 1.1, 4.0};
  std::vector<std::map<std::string, Matrix>> snaps;
  s.validation_override = [&](const MdnModel& m, int epoch) {
    snaps.push_back(m.params().snapshot());
    return val[static_cast<std::size_t>(epoch)];
  };
  const auto r = train(small_config(3), s, data);
  CHECK(r.history.selected_epoch == 3);
  CHECK(r.history.early_stopped);
  CHECK(r.history.epochs.size() == 7);
  CHECK(r.history.steps == 7 * 3);
  CHECK(r.history.kernel_per_step_min == 3u * 64u * 64u);
  CHECK(r.history.kernel_per_step_max == 3u * 64u * 64u);
  CHECK(r.model->params().snapshot() == snaps[3]);
}

TEST_CASE("base training keeps the partial batch and improves validation nll") {
  const auto data = toy_data(600, 2);
  TrainSettings s;
  s.batch_size = 128;
  s.max_epochs = 40;
  s.learning_rate = 1e-2;
  const auto cfg = small_config(3);
  const auto r = train(cfg, s, data);
  CHECK(r.history.steps == r.history.epochs.size() * 4);
  CHECK(r.history.kernel_evaluations == 0);
  const MdnModel init(cfg, std::mt19937_64(0)());
  CHECK(validation_nll(*r.model, data, 0.0, 0.1) < validation_nll(init, data, 0.0, 0.1));
  CHECK(r.history.epochs.back().val_nll >= r.history.epochs[static_cast<std::size_t>(r.history.selected_epoch)].val_nll);
}

TEST_CASE("learned centers stay inside the unit interval") {
  const auto data = toy_data(200, 3);
  TrainSettings s;
  s.alpha = 1.0;
  s.mode = AblationMode::LearnedCenters;
  s.batch_size = 32;
  s.max_epochs = 5;
  s.learning_rate = 0.2;
  const auto r = train(small_config(3), s, data);
  const Matrix& c = r.model->params().get(kLearnedCentersName);
  CHECK(c.rows() == 32);
  CHECK(c.minCoeff() >= 0.0);
  CHECK(c.maxCoeff() <= 1.0);
}

TEST_CASE("learned centers add exactly one parameter per batch row") {
  const auto data = toy_data(200, 3);
  TrainSettings s;
  s.alpha = 1.0;
  s.batch_size = 32;
  s.max_epochs = 1;
  const auto plain = train(small_config(3), s, data).history.parameter_count;
  s.mode = AblationMode::LearnedCenters;
  CHECK(train(small_config(3), s, data).history.parameter_count == plain + 32);
}

TEST_CASE("frozen-init and sampled sources train") {
  const auto data = toy_data(200, 4);
  TrainSettings s;
  s.alpha = 1.0;
  s.batch_size = 32;
  s.max_epochs = 3;
  s.mode = AblationMode::FrozenInit;
  CHECK(train(small_config(3), s, data).history.kernel_per_step_max == 3u * 32u * 32u);
  s.mode = AblationMode::None;
  s.center_source = CenterSource::Sampled;
  s.sample_size = 50;
  const auto r = train(small_config(3), s, data);
  CHECK(r.history.kernel_per_step_max == 3u * 32u * 50u);
  CHECK(r.history.model_evaluations == r.history.steps * (32 + 50));
}

TEST_CASE("bandwidth selection prefers the smaller value on ties") {
  const std::vector<double> cands = {0.2, 0.05, 0.1};
  CHECK(select_bandwidth(cands, [](double b) { return std::abs(b - 0.1); }) == 0.1);
  CHECK(select_bandwidth(cands, [](double) { return 1.0; }) == 0.05);
  CHECK(select_bandwidth(cands, [](double b) { return b < 0.15 ? std::nan("") : 1.0; }) == 0.2);
}

TEST_CASE("lambda selection respects the crps cap") {
  const std::vector<LambdaCandidate> c = {
      {0.0, 1.00, 0.10}, {0.1, 1.10, 0.05}, {1.0, 1.11, 0.01}, {5.0, 1.05, 0.05}};
  CHECK(select_lambda(c) == 0.1);
  const std::vector<LambdaCandidate> none = {{0.0, 1.0, 0.1}, {1.0, 2.0, 0.0}};
  CHECK(select_lambda(none) == 0.0);
  CHECK_THROWS(select_lambda(std::vector<LambdaCandidate>{{1.0, 1.0, 0.0}}));
}

TEST_CASE("method presets") {
  CHECK(MethodSpec::preset("BASE").fold_calibration_into_train);
  CHECK(MethodSpec::preset("QRTC").alpha == 1.0);
  CHECK(MethodSpec::preset("QRTC").posthoc);
  CHECK(MethodSpec::preset("QREGC").tunes_lambda());
  CHECK(MethodSpec::preset("QRLC").ablation == AblationMode::LearnedCenters);
  for (const auto& name : MethodSpec::preset_names()) CHECK_NOTHROW(MethodSpec::preset(name).validate());
  CHECK_THROWS(MethodSpec::preset("QRX"));
}
