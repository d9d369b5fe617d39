#pragma once

#include "qrt/csv.hpp"
#include "qrt/data.hpp"
#include "qrt/mdn.hpp"
#include "qrt/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qrt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string name;
  std::string path;                 // empty for synthetic
  std::optional<SynthKind> synth;
  std::size_t synth_n = 5000;
  std::uint64_t synth_seed = 0;
};

// Parses "synth:<kind>[:<n>]" or a file path.
DatasetSpec parse_dataset_spec(const std::string& s, std::size_t default_n, std::uint64_t synth_seed);

struct ExperimentConfig {
  std::vector<DatasetSpec> datasets;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<int> mixture_sizes = {3};
  MdnConfig model;
  std::string output_dir = "results";
  std::size_t train_cap = kDefaultTrainCap;
  std::uint64_t master_seed = 0;
  LoadOptions load;
  bool compute_crps = true;
  bool compute_sd = true;

  const MethodSpec& method(const std::string& name) const;
};

// Key/value text format:
//
//   # comment
//   datasets = synth:bimodal:5000, data/power.csv
//   seeds = 0, 1, 2
//   methods = BASE, QRTC
//   max_epochs = 200            (applies to every method)
//
//   [method QRT_wide]
//   base = QRT
//   bandwidths = 0.2
//
// Errors carry "<source>:<line>:" context.
ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::string& path);

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

Dataset materialize(const DatasetSpec& spec, const LoadOptions& load);

struct SweepOptions {
  int jobs = 1;
  bool write_files = true;
  std::function<void(const std::string&)> log;
};

// One JSON record per (dataset, mixture size, seed, method).
std::vector<nlohmann::json> run_sweep(const ExperimentConfig& config, const SweepOptions& options);

// Runs the given methods for one dataset / seed / mixture size, sharing
// trainings between methods whose training settings coincide.
std::vector<nlohmann::json> run_group(const ExperimentConfig& config, const DatasetSpec& spec,
                                      const Dataset& data, std::uint64_t seed, int mixture_size,
                                      const std::vector<MethodSpec>& methods);

std::string result_filename(const nlohmann::json& record);
std::string dataset_key(const nlohmann::json& record);
void write_text_atomic(const std::string& path, const std::string& text);
void write_json_atomic(const std::string& path, const nlohmann::json& j);
std::vector<nlohmann::json> load_results(const std::string& dir);

nlohmann::json method_to_json(const MethodSpec& spec);

struct CompareOptions {
  std::string metric = "nll";
  std::string baseline = "BASE";
  double alpha = 0.05;
};

struct ComparisonTables {
  std::vector<csv::Row> cohens_d;
  std::vector<csv::Row> ranks;
  std::vector<csv::Row> pairwise;
};

// Throws std::runtime_error listing missing (dataset, method) cells.
nlohmann::json compare(const std::vector<nlohmann::json>& records, const CompareOptions& options,
                       ComparisonTables* tables = nullptr);

// Tidy rows: epoch, seed, method, metric, value; plus one "selected_epoch"
// row per (method, seed). `dataset` is a dataset key ("name/K3") or a bare
// name when it matches a single mixture size.
std::vector<csv::Row> curves(const std::vector<nlohmann::json>& records, const std::string& dataset,
                             const std::vector<std::string>& methods);

std::string format_number(double v);

}  // namespace qrt
