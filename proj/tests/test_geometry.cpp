#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "puda/geometry.hpp"
#include "puda/gradcheck.hpp"
#include "puda/selfcheck.hpp"

using namespace puda;

namespace {

PointCloud cloud(std::vector<Point3> pts) { return PointCloud{std::move(pts), {}}; }

}  // namespace

TEST_CASE("chamfer distance examples") {
  const auto a = cloud({{0, 0, 0}});
  const auto b = cloud({{1, 0, 0}});
  CHECK(chamfer_distance(a, b) == 2.0);
  CHECK(chamfer_distance(a, a) == 0.0);

  const auto two = cloud({{0, 0, 0}, {2, 0, 0}});
  // a->two: 0; two->a: (0 + 4) / 2
  CHECK(chamfer_distance(a, two) == 2.0);
  CHECK(chamfer_distance(two, a) == 2.0);
  CHECK_THROWS_AS(chamfer_distance(a, cloud({})), EmptyCloudError);
}

TEST_CASE("chamfer distance agrees with the quadratic oracle") {
  CHECK(check::chamfer_oracle_gap(200, 5) <= 1e-12);
}

TEST_CASE("chamfer distance is invariant to point order") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto a = check::random_cloud(1 + rng.index(100), rng);
    const auto b = check::random_cloud(1 + rng.index(100), rng);
    auto p = a;
    rng.shuffle(p.points);
    CHECK(std::abs(chamfer_distance(a, b) - chamfer_distance(p, b)) < 1e-12);
    CHECK(chamfer_distance(a, a) == 0.0);
  }
}

TEST_CASE("kd-tree matches brute force, including duplicates") {
  Rng rng(11);
  for (int t = 0; t < 30; ++t) {
    auto c = check::random_cloud(1 + rng.index(300), rng);
    // Snap to a coarse grid so exact ties occur.
    for (auto& p : c.points) {
      for (auto& v : p) v = std::round(v * 3.0) / 3.0;
    }
    const KdTree tree(c.points);
    for (int q = 0; q < 20; ++q) {
      Point3 probe{std::round(rng.uniform(-3, 3)) / 3.0, std::round(rng.uniform(-3, 3)) / 3.0,
                   rng.uniform(-1, 1)};
      const auto hit = tree.nearest(probe);
      CHECK(hit.index == check::naive_nearest(c.points, probe));
      CHECK(hit.sq_dist == squared_distance(c.points[hit.index], probe));
    }
  }
}

TEST_CASE("knn equals full sort on (distance, index)") {
  Rng rng(12);
  for (int t = 0; t < 30; ++t) {
    auto c = check::random_cloud(1 + rng.index(200), rng);
    if (t % 2) {
      for (auto& p : c.points) p[0] = std::round(p[0] * 2.0);
    }
    const auto q = rng.index(c.size());
    const auto k = 1 + rng.index(c.size());
    CHECK(knn(c.points, q, k) == check::naive_knn(c.points, q, k));
  }
  const auto c = cloud({{0, 0, 0}, {1, 0, 0}});
  CHECK_THROWS_AS(knn(c.points, 0, 3), RangeError);
  CHECK_THROWS_AS(knn(c.points, 0, 0), RangeError);
}

TEST_CASE("region masks select exactly k points around the seed") {
  Rng rng(13);
  const auto c = check::random_cloud(64, rng);
  const auto m = region_from_seed(c.points, 5, 20);
  CHECK(m.k == 20);
  CHECK(m.seed_index == 5);
  CHECK(std::count(m.selected.begin(), m.selected.end(), 1) == 20);
  CHECK(m.selected[5] == 1);
  const auto nn = check::naive_knn(c.points, 5, 20);
  for (auto i : nn) CHECK(m.selected[i] == 1);

  Rng r1(3), r2(3);
  const auto s1 = select_region(c, 10, r1);
  const auto s2 = select_region(c, 10, r2);
  CHECK(s1.selected == s2.selected);
}

TEST_CASE("plane crop keeps floor(r n) points in original order") {
  Rng rng(14);
  auto c = check::random_cloud(256, rng);
  c.label = 3;
  CHECK(crop_count(0.8, 256) == 204);
  CHECK(crop_count(0.7, 10) == 7);
  const auto out = random_plane_crop(c, 0.8, rng);
  CHECK(out.size() == 204);
  CHECK(out.label == 3);
  std::size_t j = 0;
  for (const auto& p : c.points) {
    if (j < out.size() && p == out.points[j]) ++j;
  }
  CHECK(j == out.size());

  const auto half = plane_crop(cloud({{0, 0, 3}, {0, 0, 1}, {0, 0, 2}, {0, 0, 0}}), 0.5,
                               Point3{0, 0, 1});
  CHECK(half.points == std::vector<Point3>{{0, 0, 1}, {0, 0, 0}});
  CHECK_THROWS_AS(random_plane_crop(c, 0.0, rng), RangeError);
  CHECK_THROWS_AS(random_plane_crop(c, 1.5, rng), RangeError);
}

TEST_CASE("random unit vectors have unit norm") {
  Rng rng(15);
  for (int i = 0; i < 100; ++i) {
    const auto v = random_unit_vector(rng);
    CHECK(std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) == doctest::Approx(1.0));
  }
}

TEST_CASE("rotation about z keeps z and norms") {
  Rng rng(16);
  const auto c = check::random_cloud(50, rng);
  const auto r = rotate_z(c, 1.234);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(r.points[i][2] == c.points[i][2]);
    CHECK(std::hypot(r.points[i][0], r.points[i][1]) ==
          doctest::Approx(std::hypot(c.points[i][0], c.points[i][1])).epsilon(1e-12));
  }
  const auto q = rotate_z(cloud({{1, 0, 0}}), std::acos(-1.0) / 2);
  CHECK(q.points[0][0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(q.points[0][1] == doctest::Approx(1.0));
}

TEST_CASE("jitter is clipped and rotation-free augmentation only jitters") {
  Rng rng(17);
  const auto c = check::random_cloud(500, rng);
  AugmentOptions o;
  o.rotate = false;
  const auto a = augment(c, rng, o);
  double worst = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(a.points[i][k] - c.points[i][k]));
  }
  CHECK(worst <= 0.02 + 1e-15);
  CHECK(worst > 0.01);
  o.jitter = false;
  CHECK(augment(c, rng, o) == c);
}

TEST_CASE("normalize centres and scales to unit max norm") {
  Rng rng(18);
  auto c = check::random_cloud(100, rng);
  for (auto& p : c.points) {
    p[0] = p[0] * 5 + 3;
    p[2] -= 7;
  }
  const auto n = normalize(c);
  Point3 centroid{0, 0, 0};
  double max_norm = 0.0;
  for (const auto& p : n.points) {
    for (int k = 0; k < 3; ++k) centroid[k] += p[k] / 100.0;
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  for (double v : centroid) CHECK(std::abs(v) < 1e-12);
  CHECK(max_norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(normalize(cloud({{1, 1, 1}, {1, 1, 1}})));
  CHECK_THROWS_AS(normalize(cloud({})), EmptyCloudError);
}

TEST_CASE("differentiable chamfer matches the plain value") {
  Rng rng(19);
  const auto a = check::random_cloud(30, rng);
  const auto b = check::random_cloud(25, rng);
  ad::Tape tape;
  auto cd = chamfer_distance(tape.leaf(to_tensor(a)), tape.constant(to_tensor(b)));
  CHECK(cd.value().item() == doctest::Approx(chamfer_distance(a, b)).epsilon(1e-14));
  CHECK(from_tensor(to_tensor(a)) == a);
}
