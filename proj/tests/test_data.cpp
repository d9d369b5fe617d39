#include "qrt/data.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace qrt;

namespace {

std::string temp_file(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / ("qrt_test_" + name);
  std::ofstream(path) << text;
  return path.string();
}

}  // namespace

TEST_CASE("split sizes and disjointness") {
  const auto s = split(1000, 3);
  CHECK(s.validation.size() == 100);
  CHECK(s.calibration.size() == 150);
  CHECK(s.test.size() == 100);
  CHECK(s.train.size() == 650);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.validation, &s.calibration, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 1000);
  CHECK(*all.rbegin() == 999);

  const auto odd = split(37, 1);
  CHECK(odd.validation.size() == 3);
  CHECK(odd.calibration.size() == 5);
  CHECK(odd.test.size() == 3);
  CHECK(odd.train.size() == 26);
  CHECK_THROWS(split(19, 0));
}

TEST_CASE("split is a pure function of the seed") {
  CHECK(split(500, 9).train == split(500, 9).train);
  CHECK(split(500, 9).train != split(500, 10).train);
}

TEST_CASE("folding calibration rows into training") {
  auto s = split(200, 0);
  CHECK(s.fit_rows() == s.train);
  s.fold_calibration_into_train = true;
  CHECK(s.fit_rows().size() == s.train.size() + s.calibration.size());
}

TEST_CASE("training cap keeps the first rows") {
  auto s = split(1000, 0);
  const auto head = std::vector<std::size_t>(s.train.begin(), s.train.begin() + 10);
  cap_training_rows(s, 10);
  CHECK(s.train == head);
  CHECK(s.test.size() == 100);
}

TEST_CASE("standardizer uses training rows with population variance") {
  Dataset d;
  d.x.resize(4, 2);
  d.x << 1, 5, 2, 5, 3, 5, 100, 7;
  d.y.resize(4);
  d.y << 0, 2, 4, 1000;
  const std::vector<std::size_t> rows = {0, 1, 2};
  const auto st = Standardizer::fit(d, rows);
  CHECK(st.x_mean(0) == doctest::Approx(2.0));
  CHECK(st.x_scale(0) == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK(st.x_mean(1) == 0.0);
  CHECK(st.x_scale(1) == 1.0);
  CHECK(st.y_mean == doctest::Approx(2.0));
  CHECK(st.y_scale == doctest::Approx(std::sqrt(8.0 / 3.0)));
  CHECK(st.transform_x(d.x)(3, 1) == 7.0);
  CHECK(st.inverse_y(st.transform_y(3.5)) == doctest::Approx(3.5));
}

TEST_CASE("table loading with and without a header") {
  const auto with = load_table(temp_file("h.csv", "a,b,y\n1,2,3\n4,5,6\n"));
  CHECK(with.size() == 2);
  CHECK(with.x.cols() == 2);
  CHECK(with.y(1) == 6.0);
  const auto without = load_table(temp_file("n.csv", "1;2\n3;4\n"), {';', HeaderMode::Absent});
  CHECK(without.x(1, 0) == 3.0);
  CHECK_THROWS_AS(load_table(temp_file("bad.csv", "1,2\n3\n4,x\n")), DataError);
  CHECK_THROWS_AS(load_table("/nonexistent/file.csv"), DataError);
  try {
    load_table(temp_file("bad2.csv", "1,2\n3\n4,x\n"));
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('2') != std::string::npos);
    CHECK(msg.find('3') != std::string::npos);
  }
}

TEST_CASE("write then load round-trips exactly") {
  const auto d = synth(SynthKind::Heteroscedastic, 50, 4);
  const auto path = temp_file("rt.csv", "");
  write_table(path, d);
  const auto back = load_table(path);
  CHECK(back.x == d.x);
  CHECK(back.y == d.y);
}

TEST_CASE("synthetic generators") {
  for (auto kind : {SynthKind::LinearGaussian, SynthKind::Heteroscedastic, SynthKind::Bimodal, SynthKind::Discrete}) {
    const auto d = synth(kind, 300, 1);
    CHECK(d.size() == 300);
    CHECK(parse_synth_kind(to_string(kind)) == kind);
    CHECK(d.y.allFinite());
    const auto again = synth(kind, 300, 1);
    CHECK(again.y == d.y);
  }
  const auto disc = synth(SynthKind::Discrete, 1000, 2);
  CHECK(disc.y.minCoeff() >= -2.0);
  CHECK(disc.y.maxCoeff() <= 2.0);
  CHECK((disc.y.array() == disc.y.array().round()).all());
  const auto bi = synth(SynthKind::Bimodal, 1000, 2);
  CHECK((bi.y.array().abs() > 0.3).count() > 900);
  CHECK_THROWS(parse_synth_kind("gaussian"));
}
