#include "qrt/experiment.hpp"

#include "qrt/metrics.hpp"
#include "qrt/stats.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace qrt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kResultSchema[] = "qrt-result-1";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
};

struct Section {
  std::string name;
  int line = 0;
  std::vector<Entry> entries;
};

class Context {
 public:
  Context(std::string source) : source_(std::move(source)) {}
  [[noreturn]] void fail(int line, const std::string& msg) const {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": " + msg);
  }
  double real(const Entry& e) const {
    double v = 0.0;
    const auto* end = e.value.data() + e.value.size();
    auto r = std::from_chars(e.value.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end || !std::isfinite(v)) {
      fail(e.line, "'" + e.key + "' expects a number, got '" + e.value + "'");
    }
    return v;
  }
  long long integer(const Entry& e, long long min) const {
    long long v = 0;
    const auto* end = e.value.data() + e.value.size();
    auto r = std::from_chars(e.value.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end) fail(e.line, "'" + e.key + "' expects an integer, got '" + e.value + "'");
    if (v < min) fail(e.line, "'" + e.key + "' must be >= " + std::to_string(min));
    return v;
  }
  bool boolean(const Entry& e) const {
    if (e.value == "true" || e.value == "yes" || e.value == "1") return true;
    if (e.value == "false" || e.value == "no" || e.value == "0") return false;
    fail(e.line, "'" + e.key + "' expects true/false, got '" + e.value + "'");
  }
  std::vector<double> reals(const Entry& e) const {
    std::vector<double> out;
    for (const auto& item : split_list(e.value)) out.push_back(real({e.key, item, e.line}));
    if (out.empty()) fail(e.line, "'" + e.key + "' expects a non-empty list");
    return out;
  }

 private:
  std::string source_;
};

// Keys shared by the global section (as defaults) and method sections.
bool apply_method_key(MethodSpec& m, const Entry& e, const Context& ctx) {
  try {
    if (e.key == "alpha") {
      m.alpha = ctx.real(e);
    } else if (e.key == "posthoc") {
      m.posthoc = ctx.boolean(e);
    } else if (e.key == "bandwidths") {
      m.bandwidths = ctx.reals(e);
    } else if (e.key == "posthoc_bandwidths") {
      m.posthoc_bandwidths = ctx.reals(e);
    } else if (e.key == "lambdas") {
      if (m.tunes_lambda()) m.lambdas = ctx.reals(e);
    } else if (e.key == "regularizer") {
      m.regularizer = parse_regularizer(e.value);
    } else if (e.key == "ablation") {
      m.ablation = parse_ablation_mode(e.value);
    } else if (e.key == "centers") {
      if (e.value == "batch") {
        m.center_source = CenterSource::Batch;
      } else if (e.value.rfind("sampled:", 0) == 0) {
        m.center_source = CenterSource::Sampled;
        m.sample_size = static_cast<std::size_t>(ctx.integer({e.key, e.value.substr(8), e.line}, 2));
      } else {
        ctx.fail(e.line, "'centers' expects batch or sampled:<M>");
      }
    } else if (e.key == "batch_size") {
      m.batch_size = static_cast<std::size_t>(ctx.integer(e, 2));
    } else if (e.key == "learning_rate") {
      m.learning_rate = ctx.real(e);
    } else if (e.key == "max_epochs") {
      m.max_epochs = static_cast<int>(ctx.integer(e, 1));
    } else if (e.key == "patience") {
      m.patience = static_cast<int>(ctx.integer(e, 1));
    } else if (e.key == "drop_last") {
      m.drop_last_when_mapped = ctx.boolean(e);
    } else if (e.key == "fold_calibration") {
      m.fold_calibration_into_train = ctx.boolean(e);
    } else {
      return false;
    }
  } catch (const std::invalid_argument& ex) {
    ctx.fail(e.line, ex.what());
  }
  return true;
}

const std::set<std::string> kGlobalOnlyMethodKeys = {"batch_size", "learning_rate", "max_epochs",
                                                     "patience", "bandwidths", "posthoc_bandwidths",
                                                     "lambdas", "drop_last", "regularizer"};

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

json history_to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_nll", e.train_nll},
                      {"val_nll", e.val_nll},
                      {"val_pce", e.val_pce},
                      {"seconds", e.seconds}});
  }
  return {{"epochs", epochs}, {"selected_epoch", h.selected_epoch}, {"early_stopped", h.early_stopped}};
}

json metrics_to_json(const MetricReport& r, bool crps, bool sd) {
  return {{"nll", r.nll},
          {"pce", r.pce},
          {"crps", crps ? json(r.crps) : json(nullptr)},
          {"sd", sd ? json(r.sd) : json(nullptr)},
          {"n", r.n},
          {"levels", r.levels}};
}

json optional_number(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

// Standardized arrays for one (split, fold) variant.
struct Prepared {
  Splits splits;
  Standardizer st;
  TrainData td;
  Matrix x_cal;
  Vector y_cal;
  Matrix x_test;
  Vector y_test;
};

Prepared prepare(const Dataset& d, const Splits& base, bool fold, std::size_t cap) {
  Prepared p;
  p.splits = base;
  cap_training_rows(p.splits, cap);
  p.splits.fold_calibration_into_train = fold;
  const auto rows = p.splits.fit_rows();
  p.st = Standardizer::fit(d, rows);
  auto take = [&](const std::vector<std::size_t>& idx, Matrix& x, Vector& y) {
    const Dataset s = d.subset(idx);
    x = p.st.transform_x(s.x);
    y = p.st.transform_y(s.y);
  };
  take(rows, p.td.x_train, p.td.y_train);
  take(p.splits.validation, p.td.x_val, p.td.y_val);
  take(p.splits.calibration, p.x_cal, p.y_cal);
  take(p.splits.test, p.x_test, p.y_test);
  return p;
}

struct Trained {
  TrainResult result;
  std::vector<MixtureParams> val;
  std::vector<MixtureParams> test;
  std::vector<double> cal_pit;
  std::string key;
};

struct TrainingChoice {
  double alpha = 0.0;
  double vasicek_lambda = 0.0;
  std::optional<double> bandwidth;
  std::optional<double> lambda;
};

struct Candidate {
  const Trained* trained = nullptr;
  TrainingChoice choice;
  std::optional<CalibrationMap> map;
  std::optional<double> posthoc_bandwidth;
  double val_nll = 0.0;
  double val_pce = 0.0;
  double val_crps = std::numeric_limits<double>::quiet_NaN();
};

class GroupRunner {
 public:
  GroupRunner(const ExperimentConfig& cfg, const DatasetSpec& spec, const Dataset& data,
              std::uint64_t seed, int k)
      : cfg_(cfg), spec_(spec), data_(data), seed_(seed), k_(k) {
    split_seed_ = derive_seed(cfg.master_seed, "split|" + spec.name + "|" + std::to_string(seed));
    base_splits_ = split(data.size(), split_seed_);
    std::vector<double> y(data.y.data(), data.y.data() + data.y.size());
    discreteness_ = stats::discreteness(y);
  }

  json run(const MethodSpec& m) {
    m.validate();
    const Prepared& prep = prepared(m.fold_calibration_into_train);

    std::vector<double> lambdas = m.tunes_lambda() ? m.lambdas : std::vector<double>{0.0};
    std::vector<Candidate> per_lambda;
    json candidates_json = json::array();
    for (double lambda : lambdas) {
      TrainingChoice base_choice;
      if (m.tunes_lambda()) {
        base_choice.lambda = lambda;
        if (m.regularizer == Regularizer::MapEntropy) {
          base_choice.alpha = -lambda;
        } else {
          base_choice.vasicek_lambda = lambda;
        }
      } else {
        base_choice.alpha = m.alpha;
      }
      std::vector<std::optional<double>> bws{std::nullopt};
      if (base_choice.alpha != 0.0) bws.assign(m.bandwidths.begin(), m.bandwidths.end());
      std::sort(bws.begin(), bws.end());

      std::optional<Candidate> best;
      for (const auto& b : bws) {
        TrainingChoice c = base_choice;
        c.bandwidth = b;
        Candidate cand = score(m, prep, c);
        candidates_json.push_back({{"bandwidth", optional_number(c.bandwidth)},
                                   {"lambda", optional_number(c.lambda)},
                                   {"posthoc_bandwidth", optional_number(cand.posthoc_bandwidth)},
                                   {"val_nll", cand.val_nll},
                                   {"val_pce", cand.val_pce}});
        if (!best || cand.val_nll < best->val_nll) best = std::move(cand);
      }
      per_lambda.push_back(std::move(*best));
    }

    const Candidate* chosen = &per_lambda.front();
    if (m.tunes_lambda()) {
      std::vector<LambdaCandidate> lc;
      for (auto& c : per_lambda) {
        Forecast f{c.trained->val, c.map ? &*c.map : nullptr, 1.0};
        c.val_crps = crps(f, prep.td.y_val);
        lc.push_back({*c.choice.lambda, c.val_crps, c.val_pce});
      }
      const double lambda = select_lambda(lc);
      for (const auto& c : per_lambda) {
        if (*c.choice.lambda == lambda) chosen = &c;
      }
      for (auto& cj : candidates_json) {
        for (const auto& c : per_lambda) {
          if (cj["lambda"] == *c.choice.lambda && cj["bandwidth"] == optional_number(c.choice.bandwidth)) {
            cj["val_crps"] = c.val_crps;
          }
        }
      }
    }

    const Trained& t = *chosen->trained;
    const double y_scale = prep.st.y_scale;
    const CalibrationMap* map = chosen->map ? &*chosen->map : nullptr;
    MetricReport test = evaluate_forecast({t.test, map, y_scale}, prep.y_test);

    json record;
    record["schema"] = kResultSchema;
    record["dataset"] = spec_.name;
    record["mixture_size"] = k_;
    record["seed"] = seed_;
    record["method"] = m.name;
    record["spec"] = method_to_json(m);
    record["model"] = {{"input_dim", data_.x.cols()},
                       {"hidden_layers", cfg_.model.hidden_layers},
                       {"width", cfg_.model.width},
                       {"mixture_size", k_},
                       {"activation", cfg_.model.activation == Activation::Relu ? "relu" : "tanh"}};
    record["optimizer"] = {{"name", "adam"},
                           {"learning_rate", m.learning_rate},
                           {"beta1", 0.9},
                           {"beta2", 0.999},
                           {"epsilon", 1e-8}};
    const auto& sp = prep.splits;
    record["split"] = {{"seed", sp.seed},
                       {"n", sp.n},
                       {"train", sp.train.size()},
                       {"validation", sp.validation.size()},
                       {"calibration", sp.calibration.size()},
                       {"test", sp.test.size()},
                       {"boundaries", {sp.train.size(), sp.train.size() + sp.validation.size(),
                                       sp.train.size() + sp.validation.size() + sp.calibration.size(), sp.n}},
                       {"fold_calibration_into_train", sp.fold_calibration_into_train}};
    record["standardization"] = {{"y_mean", prep.st.y_mean}, {"y_scale", prep.st.y_scale}};
    record["selected"] = {{"bandwidth", optional_number(chosen->choice.bandwidth)},
                          {"lambda", optional_number(chosen->choice.lambda)},
                          {"posthoc_bandwidth", optional_number(chosen->posthoc_bandwidth)}};
    record["candidates"] = candidates_json;
    record["history"] = history_to_json(t.result.history);
    const auto& h = t.result.history;
    record["counters"] = {{"steps", h.steps},
                          {"kernel_evaluations", h.kernel_evaluations},
                          {"model_evaluations", h.model_evaluations},
                          {"mapped_steps", h.mapped_steps},
                          {"kernel_per_step_min", h.kernel_per_step_min},
                          {"kernel_per_step_max", h.kernel_per_step_max},
                          {"batch_size", std::min(m.batch_size, static_cast<std::size_t>(prep.td.x_train.rows()))},
                          {"parameter_count", h.parameter_count},
                          {"spacing_floored", h.spacing_floored}};
    record["timing"] = {{"train_seconds", h.total_seconds}, {"mean_epoch_seconds", h.mean_epoch_seconds()}};
    record["metrics"] = metrics_to_json(test, cfg_.compute_crps, cfg_.compute_sd);
    if (map) {
      MetricReport base = evaluate_forecast({t.test, nullptr, y_scale}, prep.y_test);
      record["base_metrics"] = metrics_to_json(base, cfg_.compute_crps, cfg_.compute_sd);
      record["posthoc"] = {{"map", {{"kind", to_string(map->kind())},
                                    {"bandwidth", optional_number(map->bandwidth())},
                                    {"centers", map->centers()}}},
                           {"spread_warning", map->spread_warning()}};
    }
    record["discreteness"] = discreteness_;
    return record;
  }

 private:
  MetricReport evaluate_forecast(const Forecast& f, const Vector& y) const {
    MetricReport r;
    r.nll = nll(f, y);
    r.pce = pce(f, y);
    r.crps = cfg_.compute_crps ? crps(f, y) : 0.0;
    r.sd = cfg_.compute_sd ? mean_sd(f) : 0.0;
    r.n = f.base.size();
    return r;
  }

  const Prepared& prepared(bool fold) {
    auto& slot = fold ? folded_ : unfolded_;
    if (!slot) slot = prepare(data_, base_splits_, fold, cfg_.train_cap);
    return *slot;
  }

  Candidate score(const MethodSpec& m, const Prepared& prep, const TrainingChoice& c) {
    Candidate cand;
    cand.choice = c;
    cand.trained = &trained(m, prep, c);
    const Trained& t = *cand.trained;
    if (m.posthoc) {
      const double pb = select_bandwidth(m.posthoc_bandwidths, t.cal_pit, t.val, prep.td.y_val);
      cand.posthoc_bandwidth = pb;
      cand.map = CalibrationMap::build(MapKind::Refl, t.cal_pit, pb);
    }
    Forecast f{t.val, cand.map ? &*cand.map : nullptr, 1.0};
    cand.val_nll = nll(f, prep.td.y_val);
    cand.val_pce = pce(f, prep.td.y_val);
    return cand;
  }

  const Trained& trained(const MethodSpec& m, const Prepared& prep, const TrainingChoice& c) {
    TrainSettings s;
    s.alpha = c.alpha;
    s.bandwidth = c.bandwidth.value_or(0.1);
    s.vasicek_lambda = c.vasicek_lambda;
    s.mode = m.ablation;
    s.center_source = m.center_source;
    s.sample_size = m.sample_size;
    s.batch_size = m.batch_size;
    s.learning_rate = m.learning_rate;
    s.max_epochs = m.max_epochs;
    s.patience = m.patience;
    s.drop_last_when_mapped = m.drop_last_when_mapped;

    std::ostringstream key;
    key << "fold=" << prep.splits.fold_calibration_into_train << ";alpha=" << format_number(s.alpha)
        << ";vasicek=" << format_number(s.vasicek_lambda);
    if (s.alpha != 0.0) {
      key << ";b=" << format_number(s.bandwidth) << ";mode=" << to_string(s.mode) << ";centers="
          << (s.center_source == CenterSource::Batch ? std::string("batch") : "sampled:" + std::to_string(s.sample_size));
    }
    key << ";B=" << s.batch_size << ";lr=" << format_number(s.learning_rate) << ";epochs=" << s.max_epochs
        << ";patience=" << s.patience;
    if (s.alpha != 0.0 || s.vasicek_lambda != 0.0) key << ";drop_last=" << s.drop_last_when_mapped;
    const std::string k = key.str();

    auto it = cache_.find(k);
    if (it != cache_.end()) return *it->second;

    s.seed = derive_seed(cfg_.master_seed, "train|" + spec_.name + "|" + std::to_string(seed_) + "|K" +
                                               std::to_string(k_) + "|" + k);
    MdnConfig mc = cfg_.model;
    mc.input_dim = static_cast<int>(data_.x.cols());
    mc.mixture_size = k_;
    auto t = std::make_unique<Trained>();
    t->key = k;
    t->result = train(mc, s, prep.td);
    t->val = t->result.model->predict(prep.td.x_val);
    t->test = t->result.model->predict(prep.x_test);
    t->cal_pit = pit(*t->result.model, prep.x_cal, prep.y_cal);
    return *cache_.emplace(k, std::move(t)).first->second;
  }

  const ExperimentConfig& cfg_;
  const DatasetSpec& spec_;
  const Dataset& data_;
  std::uint64_t seed_;
  int k_;
  std::uint64_t split_seed_ = 0;
  Splits base_splits_;
  double discreteness_ = 0.0;
  std::optional<Prepared> folded_;
  std::optional<Prepared> unfolded_;
  std::map<std::string, std::unique_ptr<Trained>> cache_;
};

}  // namespace

// ---------------------------------------------------------------------------

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h ^ (master + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const MethodSpec& ExperimentConfig::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.name == name) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

DatasetSpec parse_dataset_spec(const std::string& s, std::size_t default_n, std::uint64_t synth_seed) {
  DatasetSpec d;
  if (s.rfind("synth:", 0) == 0) {
    const std::string rest = s.substr(6);
    const auto colon = rest.find(':');
    const std::string kind = rest.substr(0, colon);
    d.synth = parse_synth_kind(kind);
    d.synth_n = default_n;
    if (colon != std::string::npos) {
      const std::string n = rest.substr(colon + 1);
      std::size_t v = 0;
      auto r = std::from_chars(n.data(), n.data() + n.size(), v);
      if (r.ec != std::errc() || r.ptr != n.data() + n.size() || v < 20) {
        throw std::invalid_argument("bad synthetic size in '" + s + "'");
      }
      d.synth_n = v;
    }
    d.synth_seed = synth_seed;
    d.name = kind;
  } else {
    d.path = s;
    d.name = fs::path(s).stem().string();
  }
  return d;
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  Context ctx(source);
  std::vector<Entry> globals;
  std::vector<Section> sections;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') ctx.fail(line_no, "unterminated section header");
      const std::string inner = trim(std::string_view(line).substr(1, line.size() - 2));
      if (inner.rfind("method", 0) != 0) ctx.fail(line_no, "unknown section '" + inner + "'");
      const std::string name = trim(std::string_view(inner).substr(6));
      if (name.empty()) ctx.fail(line_no, "method section needs a name");
      for (const auto& s : sections) {
        if (s.name == name) ctx.fail(line_no, "duplicate method section '" + name + "'");
      }
      sections.push_back({name, line_no, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) ctx.fail(line_no, "expected 'key = value'");
    Entry e{trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)), line_no};
    if (e.key.empty()) ctx.fail(line_no, "empty key");
    if (e.value.empty()) ctx.fail(line_no, "empty value for '" + e.key + "'");
    (sections.empty() ? globals : sections.back().entries).push_back(std::move(e));
  }

  ExperimentConfig cfg;
  std::vector<std::string> method_names;
  std::vector<Entry> method_defaults;
  std::vector<Entry> dataset_entries;
  std::size_t synth_n = 5000;
  std::uint64_t synth_seed = 0;
  for (const auto& e : globals) {
    if (e.key == "datasets" || e.key == "dataset") {
      dataset_entries.push_back(e);
    } else if (e.key == "seeds") {
      cfg.seeds.clear();
      for (const auto& s : split_list(e.value)) {
        cfg.seeds.push_back(static_cast<std::uint64_t>(ctx.integer({e.key, s, e.line}, 0)));
      }
      if (cfg.seeds.empty()) ctx.fail(e.line, "at least one seed required");
    } else if (e.key == "methods") {
      method_names = split_list(e.value);
    } else if (e.key == "mixture_size" || e.key == "mixture_sizes") {
      cfg.mixture_sizes.clear();
      for (const auto& s : split_list(e.value)) {
        cfg.mixture_sizes.push_back(static_cast<int>(ctx.integer({e.key, s, e.line}, 1)));
      }
    } else if (e.key == "hidden_layers") {
      cfg.model.hidden_layers = static_cast<int>(ctx.integer(e, 1));
    } else if (e.key == "width") {
      cfg.model.width = static_cast<int>(ctx.integer(e, 1));
    } else if (e.key == "activation") {
      if (e.value == "relu") {
        cfg.model.activation = Activation::Relu;
      } else if (e.value == "tanh") {
        cfg.model.activation = Activation::Tanh;
      } else {
        ctx.fail(e.line, "activation must be relu or tanh");
      }
    } else if (e.key == "output") {
      cfg.output_dir = e.value;
    } else if (e.key == "train_cap") {
      cfg.train_cap = static_cast<std::size_t>(ctx.integer(e, 1));
    } else if (e.key == "master_seed") {
      cfg.master_seed = static_cast<std::uint64_t>(ctx.integer(e, 0));
    } else if (e.key == "synth_n") {
      synth_n = static_cast<std::size_t>(ctx.integer(e, 20));
    } else if (e.key == "synth_seed") {
      synth_seed = static_cast<std::uint64_t>(ctx.integer(e, 0));
    } else if (e.key == "delimiter") {
      if (e.value == "tab" || e.value == "\\t") {
        cfg.load.delimiter = '\t';
      } else if (e.value.size() == 1) {
        cfg.load.delimiter = e.value[0];
      } else {
        ctx.fail(e.line, "delimiter must be a single character or 'tab'");
      }
    } else if (e.key == "header") {
      if (e.value == "auto") {
        cfg.load.header = HeaderMode::Auto;
      } else {
        cfg.load.header = ctx.boolean(e) ? HeaderMode::Present : HeaderMode::Absent;
      }
    } else if (e.key == "metrics") {
      cfg.compute_crps = false;
      cfg.compute_sd = false;
      for (const auto& metric : split_list(e.value)) {
        if (metric == "crps") {
          cfg.compute_crps = true;
        } else if (metric == "sd") {
          cfg.compute_sd = true;
        } else if (metric != "nll" && metric != "pce") {
          ctx.fail(e.line, "unknown metric '" + metric + "'");
        }
      }
    } else if (kGlobalOnlyMethodKeys.count(e.key)) {
      method_defaults.push_back(e);
    } else {
      ctx.fail(e.line, "unknown key '" + e.key + "'");
    }
  }
  for (const auto& e : dataset_entries) {
    for (const auto& item : split_list(e.value)) {
      try {
        cfg.datasets.push_back(parse_dataset_spec(item, synth_n, synth_seed));
      } catch (const std::invalid_argument& ex) {
        ctx.fail(e.line, ex.what());
      }
    }
  }
  if (cfg.datasets.empty()) ctx.fail(line_no, "no datasets given");
  for (int k : cfg.mixture_sizes) {
    if (k != 1 && k != 3 && k != 10) ctx.fail(line_no, "mixture sizes must be in {1, 3, 10}");
  }
  if (cfg.mixture_sizes.empty()) ctx.fail(line_no, "at least one mixture size required");

  for (const auto& s : sections) {
    if (std::find(method_names.begin(), method_names.end(), s.name) == method_names.end()) {
      method_names.push_back(s.name);
    }
  }
  if (method_names.empty()) ctx.fail(line_no, "no methods given");
  std::set<std::string> seen;
  for (const auto& name : method_names) {
    if (!seen.insert(name).second) ctx.fail(line_no, "duplicate method '" + name + "'");
    const Section* sec = nullptr;
    for (const auto& s : sections) {
      if (s.name == name) sec = &s;
    }
    std::string base = name;
    int base_line = sec ? sec->line : line_no;
    if (sec) {
      for (const auto& e : sec->entries) {
        if (e.key == "base") {
          base = e.value;
          base_line = e.line;
        }
      }
    }
    MethodSpec m;
    try {
      m = MethodSpec::preset(base);
    } catch (const std::invalid_argument& ex) {
      ctx.fail(base_line, ex.what());
    }
    m.name = name;
    for (const auto& e : method_defaults) apply_method_key(m, e, ctx);
    if (sec) {
      for (const auto& e : sec->entries) {
        if (e.key == "base") continue;
        if (e.key == "lambdas" && !m.tunes_lambda()) {
          m.lambdas = ctx.reals(e);
          continue;
        }
        if (!apply_method_key(m, e, ctx)) ctx.fail(e.line, "unknown method key '" + e.key + "'");
      }
    }
    try {
      m.validate();
    } catch (const std::invalid_argument& ex) {
      ctx.fail(base_line, ex.what());
    }
    cfg.methods.push_back(std::move(m));
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = parse_config(ss.str(), path);
  // Relative dataset paths resolve against the config file's directory.
  const fs::path dir = fs::path(path).parent_path();
  for (auto& d : cfg.datasets) {
    if (!d.synth && fs::path(d.path).is_relative() && !fs::exists(d.path)) d.path = (dir / d.path).string();
  }
  return cfg;
}

Dataset materialize(const DatasetSpec& spec, const LoadOptions& load) {
  Dataset d = spec.synth ? synth(*spec.synth, spec.synth_n, spec.synth_seed) : load_table(spec.path, load);
  d.name = spec.name;
  return d;
}

json method_to_json(const MethodSpec& m) {
  return {{"name", m.name},
          {"alpha", m.alpha},
          {"posthoc", m.posthoc},
          {"bandwidths", m.bandwidths},
          {"posthoc_bandwidths", m.posthoc_bandwidths},
          {"lambdas", m.lambdas},
          {"regularizer", to_string(m.regularizer)},
          {"ablation", to_string(m.ablation)},
          {"centers", m.center_source == CenterSource::Batch ? std::string("batch")
                                                             : "sampled:" + std::to_string(m.sample_size)},
          {"batch_size", m.batch_size},
          {"learning_rate", m.learning_rate},
          {"max_epochs", m.max_epochs},
          {"patience", m.patience},
          {"drop_last_when_mapped", m.drop_last_when_mapped},
          {"fold_calibration_into_train", m.fold_calibration_into_train}};
}

std::vector<json> run_group(const ExperimentConfig& config, const DatasetSpec& spec, const Dataset& data,
                            std::uint64_t seed, int mixture_size, const std::vector<MethodSpec>& methods) {
  GroupRunner runner(config, spec, data, seed, mixture_size);
  std::vector<json> out;
  for (const auto& m : methods) out.push_back(runner.run(m));
  return out;
}

std::string dataset_key(const json& record) {
  return record.at("dataset").get<std::string>() + "/K" + std::to_string(record.at("mixture_size").get<int>());
}

std::string result_filename(const json& record) {
  return sanitize(record.at("dataset").get<std::string>()) + "__K" +
         std::to_string(record.at("mixture_size").get<int>()) + "__" +
         sanitize(record.at("method").get<std::string>()) + "__seed" +
         std::to_string(record.at("seed").get<std::uint64_t>()) + ".json";
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

void write_json_atomic(const std::string& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

std::vector<json> load_results(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<json> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("malformed JSON: " + f.string());
    if (j.is_object() && j.value("schema", "") == kResultSchema) out.push_back(std::move(j));
  }
  return out;
}

std::vector<json> run_sweep(const ExperimentConfig& config, const SweepOptions& options) {
  std::vector<Dataset> data;
  for (const auto& d : config.datasets) data.push_back(materialize(d, config.load));

  struct Job {
    std::size_t dataset;
    std::uint64_t seed;
    int k;
  };
  std::vector<Job> jobs;
  for (std::size_t d = 0; d < config.datasets.size(); ++d) {
    for (int k : config.mixture_sizes) {
      for (auto s : config.seeds) jobs.push_back({d, s, k});
    }
  }
  std::vector<std::vector<json>> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      {
        std::lock_guard lock(log_mutex);
        if (error) return;
      }
      const Job& job = jobs[i];
      try {
        results[i] = run_group(config, config.datasets[job.dataset], data[job.dataset], job.seed, job.k, config.methods);
        if (options.write_files) {
          for (const auto& r : results[i]) write_json_atomic((fs::path(config.output_dir) / result_filename(r)).string(), r);
        }
        if (options.log) {
          std::lock_guard lock(log_mutex);
          options.log(config.datasets[job.dataset].name + " K=" + std::to_string(job.k) + " seed=" +
                      std::to_string(job.seed) + " done");
        }
      } catch (...) {
        std::lock_guard lock(log_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(options.jobs, static_cast<int>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  std::vector<json> flat;
  for (auto& r : results) {
    for (auto& j : r) flat.push_back(std::move(j));
  }
  return flat;
}

// ---------------------------------------------------------------------------

json compare(const std::vector<json>& records, const CompareOptions& opt, ComparisonTables* tables) {
  std::vector<std::string> methods;
  std::set<std::string> dataset_set;
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (const auto& r : records) {
    const std::string ds = dataset_key(r);
    const std::string m = r.at("method").get<std::string>();
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    dataset_set.insert(ds);
    const auto& v = r.at("metrics").at(opt.metric);
    if (!v.is_number()) throw std::runtime_error("compare: metric '" + opt.metric + "' missing in " + ds + "/" + m);
    cells[{ds, m}].push_back(v.get<double>());
  }
  const std::vector<std::string> datasets(dataset_set.begin(), dataset_set.end());
  std::vector<std::string> missing;
  for (const auto& d : datasets) {
    for (const auto& m : methods) {
      if (!cells.count({d, m})) missing.push_back(d + "/" + m);
    }
  }
  if (!missing.empty()) {
    std::string msg = "compare: missing result cells:";
    for (const auto& c : missing) msg += " " + c;
    throw std::runtime_error(msg);
  }
  if (methods.size() < 2 || datasets.size() < 2) {
    throw std::runtime_error("compare: need at least 2 methods and 2 datasets");
  }
  if (std::find(methods.begin(), methods.end(), opt.baseline) == methods.end()) {
    throw std::runtime_error("compare: baseline method '" + opt.baseline + "' not in results");
  }

  const auto D = static_cast<Eigen::Index>(datasets.size());
  const auto M = static_cast<Eigen::Index>(methods.size());
  Eigen::MatrixXd means(D, M);
  json mean_json = json::object();
  json d_json = json::object();
  std::map<std::string, std::vector<double>> d_by_method;
  for (Eigen::Index i = 0; i < D; ++i) {
    const auto& ds = datasets[static_cast<std::size_t>(i)];
    const auto& base = cells.at({ds, opt.baseline});
    for (Eigen::Index j = 0; j < M; ++j) {
      const auto& m = methods[static_cast<std::size_t>(j)];
      const auto& v = cells.at({ds, m});
      means(i, j) = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      mean_json[ds][m] = means(i, j);
      double d = std::numeric_limits<double>::quiet_NaN();
      if (v.size() >= 2 && base.size() >= 2) d = stats::cohens_d(v, base);
      d_json[ds][m] = std::isfinite(d) ? json(d) : json(nullptr);
      if (std::isfinite(d)) d_by_method[m].push_back(d);
      if (tables) tables->cohens_d.push_back({ds, m, format_number(d)});
    }
  }
  const Eigen::VectorXd ranks = stats::average_ranks(means);
  const auto fr = stats::friedman(means);
  const auto pairs = stats::wilcoxon_holm(means, opt.alpha);
  const auto groups = stats::cliques(ranks, pairs);

  json rank_json = json::object();
  json lv_json = json::object();
  for (Eigen::Index j = 0; j < M; ++j) {
    const auto& m = methods[static_cast<std::size_t>(j)];
    rank_json[m] = ranks(j);
    csv::Row row{m, format_number(ranks(j))};
    if (d_by_method.count(m)) {
      const auto lv = stats::letter_values(d_by_method[m]);
      lv_json[m] = {{"q0.125", lv.q125}, {"q0.25", lv.q25}, {"q0.5", lv.q50}, {"q0.75", lv.q75}, {"q0.875", lv.q875}};
      for (double q : {lv.q125, lv.q25, lv.q50, lv.q75, lv.q875}) row.push_back(format_number(q));
    } else {
      lv_json[m] = nullptr;
      for (int q = 0; q < 5; ++q) row.push_back("nan");
    }
    if (tables) tables->ranks.push_back(std::move(row));
  }
  json pair_json = json::array();
  for (const auto& p : pairs) {
    pair_json.push_back({{"a", methods[p.a]}, {"b", methods[p.b]}, {"p_value", p.p_value}, {"significant", p.significant}});
    if (tables) {
      tables->pairwise.push_back({methods[p.a], methods[p.b], format_number(p.p_value), p.significant ? "true" : "false"});
    }
  }
  json clique_json = json::array();
  for (const auto& g : groups) {
    json names = json::array();
    for (auto idx : g) names.push_back(methods[idx]);
    clique_json.push_back(names);
  }
  if (tables) {
    tables->cohens_d.insert(tables->cohens_d.begin(), {"dataset", "method", "cohens_d"});
    tables->ranks.insert(tables->ranks.begin(), {"method", "average_rank", "d_q0.125", "d_q0.25", "d_q0.5", "d_q0.75", "d_q0.875"});
    tables->pairwise.insert(tables->pairwise.begin(), {"method_a", "method_b", "p_value", "significant"});
  }
  return {{"metric", opt.metric},
          {"baseline", opt.baseline},
          {"alpha", opt.alpha},
          {"methods", methods},
          {"datasets", datasets},
          {"mean_scores", mean_json},
          {"cohens_d", d_json},
          {"cohens_d_letter_values", lv_json},
          {"average_ranks", rank_json},
          {"friedman", {{"statistic", fr.statistic}, {"p_value", fr.p_value}}},
          {"pairwise", pair_json},
          {"cliques", clique_json}};
}

std::vector<csv::Row> curves(const std::vector<json>& records, const std::string& dataset,
                             const std::vector<std::string>& methods) {
  std::vector<const json*> chosen;
  std::set<int> ks;
  for (const auto& r : records) {
    const bool match = dataset_key(r) == dataset || r.at("dataset").get<std::string>() == dataset;
    if (!match) continue;
    const std::string m = r.at("method").get<std::string>();
    if (!methods.empty() && std::find(methods.begin(), methods.end(), m) == methods.end()) continue;
    chosen.push_back(&r);
    ks.insert(r.at("mixture_size").get<int>());
  }
  if (ks.size() > 1) throw std::runtime_error("curves: '" + dataset + "' spans several mixture sizes; use name/K<k>");
  std::stable_sort(chosen.begin(), chosen.end(), [](const json* a, const json* b) {
    const auto ma = a->at("method").get<std::string>();
    const auto mb = b->at("method").get<std::string>();
    if (ma != mb) return ma < mb;
    return a->at("seed").get<std::uint64_t>() < b->at("seed").get<std::uint64_t>();
  });
  std::vector<csv::Row> rows{{"epoch", "seed", "method", "metric", "value"}};
  auto num = [](const json& v) {
    return v.is_number() ? format_number(v.get<double>()) : std::string("nan");
  };
  for (const json* r : chosen) {
    const std::string m = r->at("method").get<std::string>();
    const std::string seed = std::to_string(r->at("seed").get<std::uint64_t>());
    const auto& h = r->at("history");
    for (const auto& e : h.at("epochs")) {
      const std::string ep = std::to_string(e.at("epoch").get<int>());
      for (const char* metric : {"train_nll", "val_nll", "val_pce"}) rows.push_back({ep, seed, m, metric, num(e.at(metric))});
    }
    const int sel = h.at("selected_epoch").get<int>();
    std::string value = "nan";
    for (const auto& e : h.at("epochs")) {
      if (e.at("epoch").get<int>() == sel) value = num(e.at("val_nll"));
    }
    rows.push_back({std::to_string(sel), seed, m, "selected_epoch", value});
  }
  return rows;
}

}  // namespace qrt
