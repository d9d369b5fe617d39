#include "qrt/csv.hpp"
#include "qrt/experiment.hpp"

#include <doctest.h>

#include <filesystem>

using namespace qrt;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
# tiny run
datasets = synth:bimodal:300
seeds = 0
mixture_size = 1
hidden_layers = 1
width = 8
max_epochs = 3
patience = 2
batch_size = 64
methods = BASE, QRC, QRTC, QREGC

[method QRTC]
base = QRTC
bandwidths = 0.1, 0.2
posthoc_bandwidths = 0.2

[method QREGC]
base = QREGC
lambdas = 0, 1
)";

json fake_record(const std::string& ds, const std::string& method, int seed, double nll) {
  return {{"schema", "qrt-result-1"}, {"dataset", ds}, {"mixture_size", 3}, {"seed", seed},
          {"method", method},         {"metrics", {{"nll", nll}, {"pce", 0.1}}},
          {"history", {{"selected_epoch", 1},
                       {"epochs", json::array({{{"epoch", 0}, {"train_nll", 2.0}, {"val_nll", 2.5}, {"val_pce", nullptr}},
                                               {{"epoch", 1}, {"train_nll", 1.5}, {"val_nll", 2.0}, {"val_pce", 0.1}}})}}}};
}

}  // namespace

TEST_CASE("csv quoting round trip") {
  const std::vector<csv::Row> rows = {{"a", "b,c", "say \"hi\""}, {"", "line\nbreak", "x"}};
  const std::string text = csv::format(rows);
  CHECK(text.find("\"b,c\"") != std::string::npos);
  CHECK(text.find("\"say \"\"hi\"\"\"") != std::string::npos);
  CHECK(csv::parse(text) == rows);
  CHECK(csv::parse("a,b\r\nc,d\r\n") == std::vector<csv::Row>{{"a", "b"}, {"c", "d"}});
  CHECK_THROWS(csv::parse("\"open"));
}

TEST_CASE("config parsing") {
  const auto cfg = parse_config(kTinyConfig);
  REQUIRE(cfg.methods.size() == 4);
  CHECK(cfg.datasets[0].synth == SynthKind::Bimodal);
  CHECK(cfg.datasets[0].synth_n == 300);
  CHECK(cfg.method("QRTC").bandwidths == std::vector<double>{0.1, 0.2});
  CHECK(cfg.method("BASE").max_epochs == 3);
  CHECK(cfg.method("QREGC").lambdas == std::vector<double>{0, 1});
  CHECK_THROWS_AS(cfg.method("nope"), ConfigError);
}

TEST_CASE("config errors name the line") {
  try {
    parse_config("datasets = synth:bimodal\nmethods = BASE\nwidth = wide\n", "x.ini");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("x.ini:3:", 0) == 0);
  }
  CHECK_THROWS_AS(parse_config("methods = BASE\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("datasets = synth:bimodal\nmethods = NOPE\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("datasets = synth:bimodal\nmethods = BASE\nmixture_size = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("datasets = synth:bimodal\nmethods = BASE\n[section x]\n"), ConfigError);
}

TEST_CASE("derived seeds are stable and stream specific") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}

TEST_CASE("run group produces one record per method") {
  const auto cfg = parse_config(kTinyConfig);
  const auto data = materialize(cfg.datasets[0], cfg.load);
  const auto recs = run_group(cfg, cfg.datasets[0], data, 0, 1, cfg.methods);
  REQUIRE(recs.size() == 4);
  for (const auto& r : recs) {
    CHECK(r.at("schema") == "qrt-result-1");
    CHECK(std::isfinite(r.at("metrics").at("nll").get<double>()));
    CHECK(r.at("split").at("test").get<int>() == 30);
  }
  const auto& base = recs[0];
  CHECK(base.at("split").at("train").get<int>() == 195);
  CHECK(base.at("split").at("fold_calibration_into_train").get<bool>());
  CHECK_FALSE(base.contains("posthoc"));
  const auto& qrc = recs[1];
  CHECK(qrc.at("posthoc").at("map").at("kind") == "REFL");
  CHECK(qrc.at("posthoc").at("map").at("centers").size() == 45);
  CHECK(qrc.contains("base_metrics"));
  const auto& qrtc = recs[2];
  CHECK(qrtc.at("selected").at("posthoc_bandwidth").get<double>() == 0.2);
  const double b = qrtc.at("selected").at("bandwidth").get<double>();
  CHECK((b == 0.1 || b == 0.2));
  CHECK(qrtc.at("counters").at("kernel_per_step_max").get<std::uint64_t>() == 3u * 64u * 64u);
  const double lam = recs[3].at("selected").at("lambda").get<double>();
  CHECK((lam == 0.0 || lam == 1.0));
  CHECK(result_filename(qrtc) == "bimodal__K1__QRTC__seed0.json");
}

TEST_CASE("results round trip through the output directory") {
  const fs::path dir = fs::temp_directory_path() / "qrt_test_results";
  fs::remove_all(dir);
  const auto r = fake_record("a", "BASE", 0, 1.0);
  write_json_atomic((dir / result_filename(r)).string(), r);
  write_text_atomic((dir / "notes.json").string(), "{\"other\": 1}\n");
  const auto back = load_results(dir.string());
  REQUIRE(back.size() == 1);
  CHECK(back[0] == r);
}

TEST_CASE("compare builds ranks and flags missing cells") {
  std::vector<json> recs;
  const std::vector<std::string> ds = {"a", "b", "c", "d", "e", "f"};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int s = 0; s < 2; ++s) {
      recs.push_back(fake_record(ds[i], "BASE", s, 2.0 + 0.1 * i + 0.01 * s));
      recs.push_back(fake_record(ds[i], "QRTC", s, 1.0 + 0.1 * i + 0.02 * s));
    }
  }
  ComparisonTables t;
  const auto rep = compare(recs, {}, &t);
  CHECK(rep.at("average_ranks").at("QRTC").get<double>() == 1.0);
  CHECK(rep.at("average_ranks").at("BASE").get<double>() == 2.0);
  CHECK(rep.at("pairwise").size() == 1);
  CHECK(rep.at("pairwise")[0].at("p_value").get<double>() == doctest::Approx(2.0 / 64.0));
  CHECK(rep.at("cohens_d").at("a/K3").at("BASE").get<double>() == 0.0);
  CHECK(rep.at("cohens_d").at("a/K3").at("QRTC").get<double>() < 0.0);
  CHECK(t.ranks.size() == 3);
  CHECK(t.cohens_d.size() == 13);

  std::erase_if(recs, [](const json& r) { return r.at("dataset") == "f" && r.at("method") == "QRTC"; });
  try {
    compare(recs, {});
    FAIL("expected missing cells");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("f/K3/QRTC") != std::string::npos);
  }
}

TEST_CASE("curves emit tidy rows and the selected epoch") {
  const std::vector<json> recs = {fake_record("a", "BASE", 0, 1.0), fake_record("b", "BASE", 0, 1.0)};
  const auto rows = curves(recs, "a", {});
  REQUIRE(rows.size() == 1 + 6 + 1);
  CHECK(rows[0] == csv::Row{"epoch", "seed", "method", "metric", "value"});
  CHECK(rows[3] == csv::Row{"0", "0", "BASE", "val_pce", "nan"});
  CHECK(rows.back() == csv::Row{"1", "0", "BASE", "selected_epoch", "2"});
}

TEST_CASE("number formatting") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(std::nan("")) == "nan");
  CHECK(format_number(-INFINITY) == "-inf");
}
