#include "puda/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numeric>

#include <unistd.h>

#include "puda/ops.hpp"
#include "puda/ssl.hpp"

namespace puda::check {

namespace fs = std::filesystem;
using ad::Tensor;
using ad::Var;

nn::NetworkConfig tiny_network(std::size_t num_classes, std::size_t recon_points) {
  nn::NetworkConfig c;
  c.encoder_widths = {8, 12};
  c.transform_point_widths = {8, 12};
  c.transform_out_widths = {10};
  c.main_hidden = {10};
  c.recon_hidden = {12};
  c.rotation_hidden = {8};
  c.num_classes = num_classes;
  c.recon_points = recon_points;
  return c;
}

PointCloud random_cloud(std::size_t n, Rng& rng, std::optional<int> label) {
  PointCloud c;
  c.label = label;
  c.points.resize(n);
  for (auto& p : c.points) {
    for (auto& v : p) v = rng.uniform(-1.0, 1.0);
  }
  return c;
}

namespace {

Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU kinks stay outside the probe.
Tensor kink_free_tensor(ad::Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    const double mag = rng.uniform(0.05, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

// Fixed random projection to a scalar, so every output entry carries a
// distinct weight in the checked loss.
Var project(ad::Tape& tape, Var v, std::uint64_t seed) {
  Rng rng(seed ^ 0xABCDEFull);
  const std::size_t size = v.value().size();
  Var flat = ad::reshape(v, {1, size});
  Var w = tape.constant(random_tensor({size, 1}, rng));
  Var b = tape.constant(Tensor({1}, 0.0));
  return ad::reduce_sum(ad::linear(flat, w, b));
}

std::vector<PointCloud> random_batch(std::size_t count, std::size_t n, std::size_t classes,
                                     Rng& rng) {
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(random_cloud(n + i, rng, static_cast<int>(i % classes)));
  }
  return out;
}

GradCheckResult check_model_loss(std::uint64_t seed, const std::vector<nn::Group>& groups,
                                 const std::function<Var(ad::Tape&, nn::Model&,
                                                         std::span<const PointCloud>)>& loss) {
  Rng rng(seed);
  nn::Model model(tiny_network(), seed);
  const auto clouds = random_batch(3, 6, 3, rng);
  auto params = model.parameters(groups);
  auto f = [&](ad::Tape& tape, std::span<const Var>) { return loss(tape, model, clouds); };
  return check_gradients(f, {}, params, {.max_coords = 24, .seed = seed});
}

}  // namespace

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto simple = [&](std::string name, std::vector<ad::Shape> shapes, bool kink_free,
                    std::function<Var(ad::Tape&, std::span<const Var>, std::uint64_t)> body) {
    cases.push_back({std::move(name), [shapes, kink_free, body](std::uint64_t seed) {
                       Rng rng(seed);
                       std::vector<Tensor> inputs;
                       for (const auto& s : shapes) {
                         inputs.push_back(kink_free ? kink_free_tensor(s, rng)
                                                    : random_tensor(s, rng));
                       }
                       auto f = [&](ad::Tape& tape, std::span<const Var> in) {
                         return body(tape, in, seed);
                       };
                       return check_gradients(f, inputs, {}, {.seed = seed});
                     }});
  };

  simple("linear", {{5, 4}, {4, 3}, {3}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    return project(t, ad::linear(in[0], in[1], in[2]), s);
  });
  simple("relu", {{6, 4}}, true, [](ad::Tape& t, auto in, std::uint64_t s) {
    return project(t, ad::relu(in[0]), s);
  });
  simple("batchnorm", {{7, 4}, {4}, {4}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    ad::BatchNormState st(4);
    return project(t, ad::batchnorm(in[0], in[1], in[2], st, ad::Mode::train), s);
  });
  simple("maxpool_segments", {{9, 3}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    const std::size_t offsets[] = {0, 4, 9};
    return project(t, ad::maxpool_segments(in[0], offsets).values, s);
  });
  simple("maxpool_points", {{2, 5, 3}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    return project(t, ad::maxpool_points(in[0]).values, s);
  });
  simple("softmax_cross_entropy", {{4, 5}}, false, [](ad::Tape&, auto in, std::uint64_t) {
    const int labels[] = {0, 3, 4, 1};
    return ad::softmax_cross_entropy(in[0], labels);
  });
  simple("concat", {{3, 2}, {3, 4}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    return project(t, ad::concat(in[0], in[1]), s);
  });
  simple("reduce_mean", {{3, 4}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    return ad::add(ad::reduce_mean(in[0]), ad::scale(project(t, in[0], s), 0.5));
  });
  simple("scale_add", {{5, 3}, {5, 3}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    return project(t, ad::scale_add(in[0], in[1], 0.3), s);
  });
  simple("masked_scale_add", {{6, 3}, {6, 3}}, false,
         [](ad::Tape& t, auto in, std::uint64_t s) {
           const std::uint8_t mask[] = {1, 0, 1, 1, 0, 0};
           return project(t, ad::masked_scale_add(in[0], in[1], mask, 0.05), s);
         });
  simple("gather_slice_concat_rows", {{5, 3}, {2, 3}}, false,
         [](ad::Tape& t, auto in, std::uint64_t s) {
           Var g = ad::gather_rows(in[0], {4, 0, 0, 2});
           Var parts[] = {g, ad::slice_rows(in[0], 1, 3), in[1]};
           return project(t, ad::concat_rows(parts), s);
         });
  simple("add_sub_scale", {{2, 3}, {2, 3}}, false, [](ad::Tape& t, auto in, std::uint64_t s) {
    Var terms[] = {ad::add(in[0], in[1]), ad::sub(in[0], ad::scale(in[1], -2.5))};
    return project(t, ad::add_n(terms), s);
  });
  simple("chamfer_distance", {{7, 3}, {5, 3}}, false, [](ad::Tape&, auto in, std::uint64_t) {
    return chamfer_distance(in[0], in[1]);
  });

  using G = nn::Group;
  cases.push_back({"loss.main_ce", [](std::uint64_t seed) {
                     return check_model_loss(
                         seed, {G::encoder, G::main_head},
                         [](ad::Tape& tape, nn::Model& m, std::span<const PointCloud> clouds) {
                           const auto b = nn::CloudBatch::from(clouds);
                           auto feat = m.encoder.forward(tape, tape.constant(b.points),
                                                         b.offsets, ad::Mode::train);
                           auto logits = nn::classify_head(m, tape, feat, ad::Mode::train);
                           std::vector<int> y;
                           for (const auto& c : clouds) y.push_back(*c.label);
                           return ad::softmax_cross_entropy(logits, y);
                         });
                   }});
  cases.push_back({"loss.reconstruction", [](std::uint64_t seed) {
                     return check_model_loss(
                         seed, {G::encoder, G::recon_head},
                         [seed](ad::Tape& tape, nn::Model& m, std::span<const PointCloud> clouds) {
                           Rng rng(seed + 1);
                           ssl::SslOptions o;
                           auto items =
                               ssl::build_ssl_batch(tape, m, clouds, o, rng, ad::Mode::train);
                           return ssl::ssl_loss(tape, m, items, o, ad::Mode::train).recon_term;
                         });
                   }});
  cases.push_back({"loss.destruction_reconstruction", [](std::uint64_t seed) {
                     return check_model_loss(
                         seed, {G::transform, G::encoder, G::recon_head},
                         [seed](ad::Tape& tape, nn::Model& m, std::span<const PointCloud> clouds) {
                           Rng rng(seed + 1);
                           ssl::SslOptions o;
                           o.alpha = 0.3;
                           auto items =
                               ssl::build_ssl_batch(tape, m, clouds, o, rng, ad::Mode::train);
                           return ssl::ssl_loss(tape, m, items, o, ad::Mode::train).total;
                         });
                   }});
  return cases;
}

// ---------------------------------------------------------------------------

double chamfer_oracle_gap(std::size_t pairs, std::uint64_t seed, std::size_t max_n) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto a = random_cloud(1 + rng.index(max_n), rng);
    const auto b = random_cloud(1 + rng.index(max_n), rng);
    const double fast = chamfer_distance(a, b);
    const double slow = naive_chamfer(a.points, b.points);
    worst = std::max(worst, std::abs(fast - slow) / std::max(std::abs(slow), 1e-300));
  }
  return worst;
}

double encoder_permutation_gap(std::uint64_t seed, const nn::NetworkConfig& net) {
  Rng rng(seed);
  nn::Model m(net, seed);
  const auto c = random_cloud(5 + rng.index(40), rng);
  auto perm = c;
  rng.shuffle(perm.points);
  const auto a = nn::encode(m, c, ad::Mode::train);
  const auto b = nn::encode(m, perm, ad::Mode::train);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  return gap;
}

double transform_permutation_gap(std::uint64_t seed, const nn::NetworkConfig& net) {
  Rng rng(seed);
  nn::Model m(net, seed);
  const auto c = random_cloud(5 + rng.index(40), rng);
  std::vector<std::size_t> perm(c.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  PointCloud pc;
  for (auto i : perm) pc.points.push_back(c.points[i]);
  const auto d = nn::displacements(m, c, ad::Mode::train);
  const auto dp = nn::displacements(m, pc, ad::Mode::train);
  double gap = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (int k = 0; k < 3; ++k) gap = std::max(gap, std::abs(dp.points[i][k] - d.points[perm[i]][k]));
  }
  return gap;
}

bool alpha_zero_is_identity(std::uint64_t seed, const nn::NetworkConfig& net) {
  Rng rng(seed);
  nn::Model m(net, seed);
  auto c = random_cloud(4 + rng.index(40), rng);
  c.points[0][1] = -0.0;
  ad::Tape tape;
  ssl::SslOptions o;
  o.alpha = 0.0;
  const PointCloud clouds[] = {c, random_cloud(6, rng)};
  auto items = ssl::build_ssl_batch(tape, m, clouds, o, rng, ad::Mode::train);
  for (const auto& v : items[0].variants) {
    const auto& x = v.cloud.value();
    const auto orig = to_tensor(c);
    if (std::memcmp(x.data(), orig.data(), orig.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

bool unmasked_points_preserved(std::uint64_t seed, const nn::NetworkConfig& net) {
  Rng rng(seed);
  nn::Model m(net, seed);
  const PointCloud clouds[] = {random_cloud(6 + rng.index(40), rng), random_cloud(8, rng)};
  ad::Tape tape;
  ssl::SslOptions o;
  o.alpha = 0.5;
  auto items = ssl::build_ssl_batch(tape, m, clouds, o, rng, ad::Mode::train);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto orig = to_tensor(clouds[i]);
    for (const auto& v : items[i].variants) {
      const auto& x = v.cloud.value();
      std::size_t changed = 0;
      for (std::size_t r = 0; r < orig.rows(); ++r) {
        const bool same = std::memcmp(x.data() + 3 * r, orig.data() + 3 * r, 3 * sizeof(double)) == 0;
        if (!v.mask.selected[r] && !same) return false;
        if (v.mask.selected[r] && !same) ++changed;
      }
      if (changed == 0) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt_err(double e) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", e);
  return buf;
}

CheckOutcome knn_check() {
  Rng rng(91);
  for (int t = 0; t < 50; ++t) {
    const auto c = random_cloud(1 + rng.index(200), rng);
    const std::size_t q = rng.index(c.size());
    const std::size_t k = 1 + rng.index(c.size());
    if (knn(c.points, q, k) != naive_knn(c.points, q, k)) {
      return {"knn.oracle", false, "mismatch on trial " + std::to_string(t)};
    }
    const KdTree tree(c.points);
    const auto probe = random_cloud(1, rng).points[0];
    if (tree.nearest(probe).index != naive_nearest(c.points, probe)) {
      return {"knn.oracle", false, "nearest mismatch on trial " + std::to_string(t)};
    }
  }
  return {"knn.oracle", true, "50 trials"};
}

CheckOutcome checkpoint_check() {
  nn::Model m(tiny_network(), 5);
  m.class_names = {"a", "b", "c"};
  const auto path = fs::temp_directory_path() /
                    ("puda_selfcheck_" + std::to_string(::getpid()) + ".ckpt");
  nn::save_checkpoint(path, m);
  auto back = nn::load_checkpoint(path);
  fs::remove(path);
  bool same = back.class_names == m.class_names && back.config == m.config;
  std::vector<std::pair<std::string, Tensor>> a, b;
  m.visit_state([&](const std::string& n, Tensor& t) { a.emplace_back(n, t); });
  back.visit_state([&](const std::string& n, Tensor& t) { b.emplace_back(n, t); });
  same = same && a == b;
  return {"checkpoint.roundtrip", same, std::to_string(a.size()) + " tensors"};
}

}  // namespace

std::vector<CheckOutcome> run_selfcheck(const SelfcheckOptions& opts) {
  struct SkewGuard {
    explicit SkewGuard(double v) : saved(ad::fault::batchnorm_backward_skew()) {
      ad::fault::set_batchnorm_backward_skew(v);
    }
    ~SkewGuard() { ad::fault::set_batchnorm_backward_skew(saved); }
    double saved;
  } guard(opts.batchnorm_backward_skew);

  std::vector<CheckOutcome> out;
  for (const auto& gc : gradient_cases()) {
    double worst = 0.0;
    std::string worst_name;
    for (std::uint64_t s = 0; s < opts.grad_instances; ++s) {
      const auto r = gc.run(1000 + s);
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        worst_name = r.worst;
      }
    }
    out.push_back({"grad." + gc.name, worst < opts.grad_tolerance,
                   "max rel err " + fmt_err(worst) + " (" + worst_name + ")"});
  }

  const double cd = chamfer_oracle_gap(opts.chamfer_pairs, 17);
  out.push_back({"chamfer.oracle", cd <= 1e-12, "max rel gap " + fmt_err(cd)});
  {
    Rng rng(3);
    const auto a = random_cloud(64, rng);
    auto p = a;
    rng.shuffle(p.points);
    const auto b = random_cloud(50, rng);
    const double self = chamfer_distance(a, a);
    const double perm = std::abs(chamfer_distance(a, b) - chamfer_distance(p, b));
    out.push_back({"chamfer.self_zero", self == 0.0, "CD(X,X) = " + fmt_err(self)});
    out.push_back({"chamfer.permutation", perm < 1e-12, "gap " + fmt_err(perm)});
  }
  out.push_back(knn_check());

  double enc = 0.0, tr = 0.0;
  bool ident = true, preserved = true;
  for (std::uint64_t s = 0; s < opts.invariance_trials; ++s) {
    enc = std::max(enc, encoder_permutation_gap(200 + s));
    tr = std::max(tr, transform_permutation_gap(300 + s));
    ident = ident && alpha_zero_is_identity(400 + s);
    preserved = preserved && unmasked_points_preserved(500 + s);
  }
  out.push_back({"encoder.permutation_invariance", enc <= 1e-9, "max gap " + fmt_err(enc)});
  out.push_back({"transform.permutation_equivariance", tr <= 1e-9, "max gap " + fmt_err(tr)});
  out.push_back({"destruction.alpha_zero_identity", ident, "bitwise"});
  out.push_back({"destruction.unmasked_preserved", preserved, "bitwise"});
  out.push_back(checkpoint_check());
  return out;
}

}  // namespace puda::check
