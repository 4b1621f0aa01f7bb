#include "puda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "puda/ops.hpp"
#include "puda/rng.hpp"

namespace puda::check {

double rel_error(std::span<const double> a, std::span<const double> b, double floor) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

namespace {

double eval_loss(const LossFn& f, const std::vector<ad::Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return f(tape, leaves).value().item();
}

std::vector<std::uint64_t> branch_trace(const LossFn& f, const std::vector<ad::Tensor>& inputs) {
  ad::branch::Recorder rec;
  eval_loss(f, inputs);
  return rec.trace();
}

std::vector<std::size_t> probe_coords(std::size_t size, std::size_t max_coords, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (size > max_coords) {
    rng.shuffle(idx);
    idx.resize(max_coords);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace

GradCheckResult check_gradients(const LossFn& f, std::vector<ad::Tensor> inputs,
                                std::span<ad::Parameter* const> params,
                                const GradCheckOptions& opts) {
  std::vector<ad::Tensor> analytic;
  {
    for (auto* p : params) {
      p->grad = ad::Tensor(p->value.shape());
    }
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    auto loss = f(tape, leaves);
    tape.backward(loss);
    for (auto v : leaves) analytic.push_back(tape.grad(v));
  }

  const auto base_trace = branch_trace(f, inputs);
  std::size_t excluded = 0;
  Rng rng(opts.seed);
  struct Probe {
    std::string name;
    std::vector<double> a, n;
  };
  std::vector<Probe> probes;
  auto probe = [&](const std::string& name, std::span<const double> grad, double* values,
                   std::size_t size) {
    Probe p{name, {}, {}};
    for (auto c : probe_coords(size, opts.max_coords, rng)) {
      const double saved = values[c];
      values[c] = saved + opts.kink_margin;
      bool kink = branch_trace(f, inputs) != base_trace;
      values[c] = saved - opts.kink_margin;
      kink = kink || branch_trace(f, inputs) != base_trace;
      values[c] = saved;
      if (kink) {
        ++excluded;
        continue;
      }
      values[c] = saved + opts.h;
      const double up = eval_loss(f, inputs);
      values[c] = saved - opts.h;
      const double down = eval_loss(f, inputs);
      values[c] = saved;
      p.a.push_back(grad[c]);
      p.n.push_back((up - down) / (2.0 * opts.h));
    }
    probes.push_back(std::move(p));
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    probe("input" + std::to_string(i), analytic[i].values(), inputs[i].data(), inputs[i].size());
  }
  for (auto* p : params) {
    const ad::Tensor g = p->grad;
    probe(p->name, g.values(), p->value.data(), p->value.size());
  }

  std::vector<double> all_a, all_n;
  for (const auto& p : probes) {
    all_a.insert(all_a.end(), p.a.begin(), p.a.end());
    all_n.insert(all_n.end(), p.n.begin(), p.n.end());
  }
  double norm = 0.0;
  for (double v : all_a) norm += v * v;
  const double floor = std::max(kGradNormFloor, kRelativeFloor * std::sqrt(norm));

  GradCheckResult result;
  result.excluded = excluded;
  result.global_rel_error = rel_error(all_a, all_n);
  for (const auto& p : probes) {
    const double err = rel_error(p.a, p.n, floor);
    result.probes += p.a.size();
    if (result.worst.empty() || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = p.name;
    }
  }
  return result;
}

double naive_chamfer(std::span<const Point3> a, std::span<const Point3> b) {
  auto one_way = [](std::span<const Point3> from, std::span<const Point3> to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };
  return one_way(a, b) + one_way(b, a);
}

std::vector<std::size_t> naive_knn(std::span<const Point3> points, std::size_t query_index,
                                   std::size_t k) {
  const auto& q = points[query_index];
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double dx = points[i][0] - q[0], dy = points[i][1] - q[1], dz = points[i][2] - q[2];
    all.emplace_back(dx * dx + dy * dy + dz * dz, i);
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

std::size_t naive_nearest(std::span<const Point3> points, const Point3& q) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double dx = points[i][0] - q[0], dy = points[i][1] - q[1], dz = points[i][2] - q[2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace puda::check
