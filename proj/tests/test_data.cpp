#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "puda/data.hpp"

using namespace puda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() /
             ("puda_data_" + std::to_string(::getpid()) + "_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

data::SyntheticSpec small_spec() {
  data::SyntheticSpec s;
  s.classes = {"sphere", "cube", "torus"};
  s.n_points = 64;
  s.train_per_class = 10;
  s.test_per_class = 4;
  s.seed = 21;
  return s;
}

double norm(const Point3& p) { return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]); }

PointCloud labeled(int label) {
  return PointCloud{{{0.0, 0.0, static_cast<double>(label)}}, label};
}

}  // namespace

TEST_CASE("every analytic shape samples the requested count") {
  Rng rng(1);
  for (auto name : data::known_shapes()) {
    const auto pts = data::sample_shape(std::string(name), 100, rng);
    CHECK(pts.size() == 100);
    for (const auto& p : pts) CHECK(std::isfinite(p[0] + p[1] + p[2]));
  }
  CHECK_THROWS_AS(data::sample_shape("teapot", 10, rng), ConfigError);
}

TEST_CASE("sphere samples lie on the unit sphere") {
  Rng rng(2);
  for (const auto& p : data::sample_shape("sphere", 500, rng)) {
    CHECK(std::abs(norm(p) - 1.0) < 1e-9);
  }
}

TEST_CASE("zero density bias reproduces plain sampling") {
  Rng a(3), b(3);
  CHECK(data::sample_shape_biased("cone", 50, 0.0, a) == data::sample_shape("cone", 50, b));
}

TEST_CASE("synthetic domains are deterministic and normalized") {
  const auto spec = small_spec();
  const auto a = data::gen_synthetic_domain(spec);
  const auto b = data::gen_synthetic_domain(spec);
  CHECK(a == b);
  CHECK(a.class_names == spec.classes);
  CHECK(a.train.size() + a.val.size() == 30);
  CHECK(a.test.size() == 12);
  for (const auto* split : {&a.train, &a.val, &a.test}) {
    for (const auto& c : *split) {
      CHECK(c.size() == 64);
      REQUIRE(c.label.has_value());
      double max_norm = 0.0;
      Point3 centroid{0, 0, 0};
      for (const auto& p : c.points) {
        max_norm = std::max(max_norm, norm(p));
        for (int k = 0; k < 3; ++k) centroid[k] += p[k] / 64.0;
      }
      CHECK(max_norm == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(norm(centroid) < 1e-12);
    }
  }
  auto other = spec;
  other.seed = 22;
  CHECK_FALSE(data::gen_synthetic_domain(other) == a);
}

TEST_CASE("cropped domains keep floor(retain * n) points") {
  auto spec = small_spec();
  spec.n_points = 256;
  spec.crop_retain = 0.8;
  const auto ds = data::gen_synthetic_domain(spec);
  for (const auto& c : ds.train) CHECK(c.size() == 204);
  CHECK(ds.nominal_n == 256);
}

TEST_CASE("synthetic classes are separable by their shape statistics") {
  // Nearest-centroid on the sorted radial profile separates the clean
  // domain well above chance; the generator is not degenerate.
  auto spec = small_spec();
  spec.classes = {"sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid",
                  "capsule"};
  spec.n_points = 128;
  const auto ds = data::gen_synthetic_domain(spec);
  auto profile = [](const PointCloud& c) {
    std::vector<double> r;
    for (const auto& p : c.points) r.push_back(norm(p));
    std::sort(r.begin(), r.end());
    std::vector<double> f;
    for (std::size_t q = 1; q < 16; ++q) f.push_back(r[q * r.size() / 16]);
    return f;
  };
  const std::size_t k = spec.classes.size();
  std::vector<std::vector<double>> centroid(k, std::vector<double>(15, 0.0));
  std::vector<double> count(k, 0.0);
  for (const auto& c : ds.train) {
    const auto f = profile(c);
    for (std::size_t j = 0; j < f.size(); ++j) centroid[*c.label][j] += f[j];
    count[*c.label] += 1.0;
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (auto& v : centroid[i]) v /= count[i];
  }
  std::size_t correct = 0;
  for (const auto& c : ds.test) {
    const auto f = profile(c);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < k; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) d += (f[j] - centroid[i][j]) * (f[j] - centroid[i][j]);
      if (d < best_d) best_d = d, best = i;
    }
    correct += best == static_cast<std::size_t>(*c.label);
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(ds.test.size()) > 2.0 / k);
}

TEST_CASE("train/val split is stratified, disjoint and seed-deterministic") {
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 100; ++i) clouds.push_back(PointCloud{{{double(i), 0, 0}}, i % 4});
  const auto [tr, va] = data::split_train_val(clouds, 0.8, 5);
  CHECK(tr.size() == 80);
  CHECK(va.size() == 20);
  for (int l = 0; l < 4; ++l) {
    CHECK(std::count_if(va.begin(), va.end(), [&](const auto& c) { return *c.label == l; }) ==
          5);
  }
  std::set<double> ids;
  for (const auto& c : tr) ids.insert(c.points[0][0]);
  for (const auto& c : va) CHECK(ids.insert(c.points[0][0]).second);
  CHECK(ids.size() == 100);

  const auto again = data::split_train_val(clouds, 0.8, 5);
  CHECK(again.first == tr);
  CHECK(again.second == va);
  CHECK_FALSE(data::split_train_val(clouds, 0.8, 6).second == va);

  std::vector<PointCloud> lonely{labeled(0), labeled(0), labeled(0), labeled(0), labeled(1)};
  CHECK_THROWS_AS(data::split_train_val(lonely, 0.8, 1), std::invalid_argument);
}

TEST_CASE("xyz text round trips exactly") {
  Rng rng(4);
  PointCloud c;
  for (int i = 0; i < 50; ++i) {
    c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1e-8, 1e-8), rng.uniform(-1e6, 1e6)});
  }
  CHECK(data::parse_xyz(data::format_xyz(c)) == c);
  TempDir dir("xyz");
  data::write_xyz(dir.path / "a.xyz", c);
  CHECK(data::read_xyz(dir.path / "a.xyz") == c);
}

TEST_CASE("xyz parser accepts CRLF and blank lines, rejects malformed input") {
  const auto c = data::parse_xyz("1 2 3\r\n\r\n  4\t5 6\n");
  CHECK(c.points == std::vector<Point3>{{1, 2, 3}, {4, 5, 6}});

  try {
    data::parse_xyz("1 2\n", "f.xyz");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("f.xyz:1") != std::string::npos);
  }
  try {
    data::parse_xyz("1 2 3\n1 2 3 4\n", "g.xyz");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("g.xyz:2") != std::string::npos);
  }
  CHECK_THROWS_AS(data::parse_xyz("1 nan 3\n"), FormatError);
  CHECK_THROWS_AS(data::parse_xyz("1 inf 3\n"), FormatError);
  CHECK_THROWS_AS(data::parse_xyz("\n\n"), FormatError);
}

TEST_CASE("directory and packed datasets round trip") {
  const auto ds = data::gen_synthetic_domain(small_spec());
  TempDir dir("ds");
  data::write_dataset(dir.path / "tree", ds);
  data::write_packed(dir.path / "one.pcds", ds);
  CHECK(data::read_dataset(dir.path / "tree") == ds);
  CHECK(data::read_packed(dir.path / "one.pcds") == ds);
  CHECK(data::load_dataset(dir.path / "tree") == ds);
  CHECK(data::load_dataset(dir.path / "one.pcds") == ds);

  SUBCASE("hashes are stable and content sensitive") {
    const auto h = data::dataset_hash(dir.path / "tree");
    CHECK(h.size() == 40);
    CHECK(data::dataset_hash(dir.path / "tree") == h);
    data::write_dataset(dir.path / "tree2", ds);
    CHECK(data::dataset_hash(dir.path / "tree2") == h);
    auto changed = ds;
    changed.test[0].points[0][0] += 1e-3;
    data::write_dataset(dir.path / "tree3", changed);
    CHECK(data::dataset_hash(dir.path / "tree3") != h);
    CHECK(data::sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  }
  SUBCASE("missing cloud files are an integrity error") {
    for (const auto& e : fs::recursive_directory_iterator(dir.path / "tree")) {
      if (e.path().extension() == ".xyz") {
        fs::remove(e.path());
        break;
      }
    }
    CHECK_THROWS_AS(data::read_dataset(dir.path / "tree"), IntegrityError);
  }
  SUBCASE("missing manifest is an integrity error") {
    fs::remove(dir.path / "tree" / "manifest.json");
    CHECK_THROWS_AS(data::read_dataset(dir.path / "tree"), IntegrityError);
  }
  SUBCASE("corrupt packed files are format errors") {
    {
      std::fstream f(dir.path / "one.pcds", std::ios::in | std::ios::out | std::ios::binary);
      f.write("NOPE", 4);
    }
    CHECK_THROWS_AS(data::read_packed(dir.path / "one.pcds"), FormatError);
    data::write_packed(dir.path / "two.pcds", ds);
    fs::resize_file(dir.path / "two.pcds", fs::file_size(dir.path / "two.pcds") - 9);
    CHECK_THROWS_AS(data::read_packed(dir.path / "two.pcds"), FormatError);
  }
}

TEST_CASE("labels outside the vocabulary are rejected") {
  data::DomainDataset ds;
  ds.class_names = {"a", "b"};
  ds.train.push_back(labeled(1));
  CHECK_NOTHROW(ds.validate());
  ds.train.push_back(labeled(2));
  CHECK_THROWS_AS(ds.validate(), FormatError);
  CHECK_THROWS_AS(ds.split("holdout"), std::invalid_argument);
}

TEST_CASE("unlabeled strips labels only") {
  const std::vector<PointCloud> c{labeled(1), labeled(0)};
  const auto u = data::unlabeled(c);
  REQUIRE(u.size() == 2);
  CHECK_FALSE(u[0].label.has_value());
  CHECK(u[0].points == c[0].points);
}
