#include <algorithm>

#include "doctest.h"
#include "puda/optim.hpp"
#include "puda/selfcheck.hpp"
#include "puda/ssl.hpp"

using namespace puda;

namespace {

std::vector<PointCloud> clouds(std::size_t count, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(check::random_cloud(n, rng));
  return out;
}

double mean_adv_cd(nn::Model& m, std::span<const PointCloud> cs, const ssl::SslOptions& o,
                   std::uint64_t seed) {
  ad::Tape tape;
  Rng rng(seed);
  const auto items = ssl::build_ssl_batch(tape, m, cs, o, rng, ad::Mode::eval);
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& it : items) {
    for (const auto& v : it.variants) {
      s += chamfer_distance(from_tensor(v.cloud.value()), it.original);
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

}  // namespace

TEST_CASE("region size is floor(fraction * n), at least one point") {
  CHECK(ssl::region_size(0.5, 256) == 128);
  CHECK(ssl::region_size(0.5, 7) == 3);
  CHECK(ssl::region_size(0.3, 10) == 3);
  CHECK(ssl::region_size(0.01, 10) == 1);
  CHECK(ssl::region_size(1.0, 10) == 10);
  CHECK_THROWS_AS(ssl::region_size(0.0, 10), RangeError);
  CHECK_THROWS_AS(ssl::region_size(1.1, 10), RangeError);
}

TEST_CASE("variants use distinct region seeds and only move their region") {
  nn::Model m(check::tiny_network(), 1);
  const auto cs = clouds(3, 16, 2);
  ssl::SslOptions o;
  o.variants = 4;
  o.alpha = 0.5;
  ad::Tape tape;
  Rng rng(3);
  const auto items = ssl::build_ssl_batch(tape, m, cs, o, rng, ad::Mode::train);
  REQUIRE(items.size() == 3);
  for (const auto& it : items) {
    REQUIRE(it.variants.size() == 4);
    std::vector<std::size_t> seeds;
    for (const auto& v : it.variants) {
      seeds.push_back(v.mask.seed_index);
      CHECK(v.mask.k == 8);
      const auto moved = from_tensor(v.cloud.value());
      for (std::size_t r = 0; r < moved.size(); ++r) {
        if (!v.mask.selected[r]) CHECK(moved.points[r] == it.original.points[r]);
      }
    }
    std::sort(seeds.begin(), seeds.end());
    CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());
  }

  ssl::SslOptions too_many;
  too_many.variants = 20;
  CHECK_THROWS_AS(ssl::build_ssl_batch(tape, m, cs, too_many, rng, ad::Mode::train),
                  RangeError);
}

TEST_CASE("total loss is the weighted reconstruction minus the weighted destruction") {
  nn::Model m(check::tiny_network(), 4);
  const auto cs = clouds(4, 12, 5);
  ssl::SslOptions o;
  o.lambda1 = 2.0;
  o.lambda2 = 7.0;
  o.alpha = 0.3;
  ad::Tape tape;
  Rng rng(6);
  const auto items = ssl::build_ssl_batch(tape, m, cs, o, rng, ad::Mode::train);
  const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train);
  CHECK(parts.value() == doctest::Approx(parts.recon() - parts.adv()).epsilon(1e-14));

  // The adversarial term averages lambda2 * CD(x', x) over variants and items.
  double adv = 0.0;
  for (const auto& it : items) {
    double s = 0.0;
    for (const auto& v : it.variants) {
      s += chamfer_distance(from_tensor(v.cloud.value()), it.original);
    }
    adv += s / static_cast<double>(it.variants.size());
  }
  adv *= o.lambda2 / static_cast<double>(items.size());
  CHECK(parts.adv() == doctest::Approx(adv).epsilon(1e-12));
}

TEST_CASE("detaching the reconstruction leaves only the adversarial gradient on phi") {
  const auto cs = clouds(3, 10, 7);
  ssl::SslOptions o;
  o.alpha = 0.4;
  o.detach_recon_from_transform = true;

  auto transform_grad = [&](bool recon_only) {
    nn::Model m(check::tiny_network(), 8);
    ad::Tape tape;
    Rng rng(9);
    const auto items = ssl::build_ssl_batch(tape, m, cs, o, rng, ad::Mode::train);
    const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train);
    auto params = m.transform.point_mlp.parameters();
    ad::zero_grads(params);
    tape.backward(recon_only ? parts.recon_term : parts.total);
    double norm = 0.0;
    for (auto* p : params) {
      for (double g : p->grad.values()) norm += g * g;
    }
    return norm;
  };
  CHECK(transform_grad(true) == 0.0);
  CHECK(transform_grad(false) > 0.0);
}

TEST_CASE("transform-only steps push x' away from x") {
  nn::Model m(check::tiny_network(), 10);
  const auto cs = clouds(4, 16, 11);
  ssl::SslOptions o;
  const double before = mean_adv_cd(m, cs, o, 12);
  const nn::Group g[] = {nn::Group::transform};
  const auto params = m.parameters(g);
  Rng rng(13);
  for (int step = 0; step < 30; ++step) {
    ad::Tape tape;
    const auto items = ssl::build_ssl_batch(tape, m, cs, o, rng, ad::Mode::train);
    const auto parts = ssl::ssl_loss(tape, m, items, o, ad::Mode::train);
    ad::zero_grads(params);
    tape.backward(parts.total);
    // The joint objective is minimised; the transform net maximises CD(x', x).
    ad::adam_step(params, 1e-2);
  }
  CHECK(mean_adv_cd(m, cs, o, 12) > before);
}

TEST_CASE("quarter turns about x are exact and compose") {
  Rng rng(14);
  const auto c = check::random_cloud(20, rng);
  const auto r1 = ssl::rotate_x_quarter(c, 1);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(r1.points[i][0] == c.points[i][0]);
    CHECK(r1.points[i][1] == -c.points[i][2]);
    CHECK(r1.points[i][2] == c.points[i][1]);
  }
  CHECK(ssl::rotate_x_quarter(c, 0) == c);
  CHECK(ssl::rotate_x_quarter(ssl::rotate_x_quarter(c, 3), 1) == c);
  CHECK(ssl::rotate_x_quarter(c, -1) == ssl::rotate_x_quarter(c, 3));

  const auto [rot, label] = ssl::rotation_task(c, rng);
  CHECK(label >= 0);
  CHECK(label < 4);
  CHECK(rot == ssl::rotate_x_quarter(c, label));
}

TEST_CASE("rotation loss checks logit width") {
  ad::Tape tape;
  const int labels[] = {0, 3};
  CHECK_NOTHROW(ssl::rotation_loss(tape.constant(ad::Tensor(ad::Shape{2, 4})), labels));
  CHECK_THROWS_AS(ssl::rotation_loss(tape.constant(ad::Tensor(ad::Shape{2, 3})), labels),
                  DimensionError);
}
