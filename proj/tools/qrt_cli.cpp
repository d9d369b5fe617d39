// qrt: train, sweep, compare, curves, synth.
#include "qrt/csv.hpp"
#include "qrt/data.hpp"
#include "qrt/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kRuntime = 4 };

namespace fs = std::filesystem;

int run_train(const std::string& config_path, const std::string& method, std::uint64_t seed,
              const std::string& dataset, int mixture_size, const std::string& out) {
  const auto cfg = qrt::load_config(config_path);
  const qrt::MethodSpec& m = cfg.method(method);
  const qrt::DatasetSpec* spec = &cfg.datasets.front();
  if (!dataset.empty()) {
    spec = nullptr;
    for (const auto& d : cfg.datasets) {
      if (d.name == dataset) spec = &d;
    }
    if (!spec) throw qrt::ConfigError("dataset '" + dataset + "' not in config");
  }
  const int k = mixture_size > 0 ? mixture_size : cfg.mixture_sizes.front();
  const auto data = qrt::materialize(*spec, cfg.load);
  const auto records = qrt::run_group(cfg, *spec, data, seed, k, {m});
  const std::string path = out.empty() ? (fs::path(cfg.output_dir) / qrt::result_filename(records[0])).string() : out;
  qrt::write_json_atomic(path, records[0]);
  std::cout << path << "\n";
  return kOk;
}

int run_sweep(const std::string& config_path, int jobs) {
  const auto cfg = qrt::load_config(config_path);
  qrt::SweepOptions opt;
  opt.jobs = jobs;
  opt.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
  const auto records = qrt::run_sweep(cfg, opt);
  std::cout << records.size() << " result records written to " << cfg.output_dir << "\n";
  return kOk;
}

int run_compare(const std::string& dir, const std::string& out, const qrt::CompareOptions& opt) {
  const auto records = qrt::load_results(dir);
  qrt::ComparisonTables tables;
  const auto report = qrt::compare(records, opt, &tables);
  const fs::path out_dir = out.empty() ? fs::path(dir) / "comparison" : fs::path(out);
  qrt::write_json_atomic((out_dir / ("report_" + opt.metric + ".json")).string(), report);
  qrt::write_text_atomic((out_dir / ("cohens_d_" + opt.metric + ".csv")).string(), qrt::csv::format(tables.cohens_d));
  qrt::write_text_atomic((out_dir / ("ranks_" + opt.metric + ".csv")).string(), qrt::csv::format(tables.ranks));
  qrt::write_text_atomic((out_dir / ("pairwise_" + opt.metric + ".csv")).string(), qrt::csv::format(tables.pairwise));
  std::cout << "friedman statistic " << report["friedman"]["statistic"].get<double>() << ", p = "
            << report["friedman"]["p_value"].get<double>() << "\n";
  for (const auto& [m, r] : report["average_ranks"].items()) std::cout << "  " << m << " rank " << r.get<double>() << "\n";
  std::cout << "written to " << out_dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantile recalibration training toolkit"};
  app.require_subcommand(1);

  std::string config;
  std::string method;
  std::string dataset;
  std::string out;
  std::uint64_t seed = 0;
  int mixture_size = 0;
  int jobs = 1;

  auto* train = app.add_subcommand("train", "Run one method for one seed");
  train->add_option("-c,--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  train->add_option("-m,--method", method, "Method name")->required();
  train->add_option("-s,--seed", seed, "Split seed");
  train->add_option("-d,--dataset", dataset, "Dataset name (default: first in config)");
  train->add_option("-k,--mixture-size", mixture_size, "Mixture size (default: first in config)");
  train->add_option("-o,--out", out, "Result file (default: <output>/<auto name>.json)");

  auto* sweep = app.add_subcommand("sweep", "Run every dataset x mixture size x seed x method");
  sweep->add_option("-c,--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("-j,--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

  std::string results;
  qrt::CompareOptions cmp;
  auto* compare = app.add_subcommand("compare", "Cross-dataset comparison of result records");
  compare->add_option("-r,--results", results, "Result directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--metric", cmp.metric, "nll, pce, crps or sd")->check(CLI::IsMember({"nll", "pce", "crps", "sd"}));
  compare->add_option("--baseline", cmp.baseline, "Baseline method for Cohen's d");
  compare->add_option("--alpha", cmp.alpha, "Significance level");
  compare->add_option("-o,--out", out, "Output directory (default: <results>/comparison)");

  std::vector<std::string> methods;
  auto* curves = app.add_subcommand("curves", "Per-epoch curves as tidy CSV");
  curves->add_option("-r,--results", results, "Result directory")->required()->check(CLI::ExistingDirectory);
  curves->add_option("-d,--dataset", dataset, "Dataset name or name/K<k>")->required();
  curves->add_option("-m,--methods", methods, "Methods (default: all)")->delimiter(',');
  curves->add_option("-o,--out", out, "CSV file (default: stdout)");

  std::string kind;
  std::size_t n = 5000;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset as CSV");
  synth->add_option("--kind", kind, "linear-gaussian, heteroscedastic, bimodal or discrete")->required();
  synth->add_option("-n", n, "Rows")->check(CLI::PositiveNumber);
  synth->add_option("-s,--seed", seed, "Generator seed");
  synth->add_option("-o,--out", out, "CSV file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return run_train(config, method, seed, dataset, mixture_size, out);
    if (*sweep) return run_sweep(config, jobs);
    if (*compare) return run_compare(results, out, cmp);
    if (*curves) {
      const auto rows = qrt::curves(qrt::load_results(results), dataset, methods);
      if (out.empty()) {
        std::cout << qrt::csv::format(rows);
      } else {
        qrt::write_text_atomic(out, qrt::csv::format(rows));
      }
      return kOk;
    }
    if (*synth) {
      qrt::write_table(out, qrt::synth(qrt::parse_synth_kind(kind), n, seed));
      return kOk;
    }
  } catch (const qrt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const qrt::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
