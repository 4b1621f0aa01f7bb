#include "puda/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "puda/ops.hpp"

namespace puda {

ad::Tensor to_tensor(const PointCloud& cloud) {
  ad::Tensor t(ad::Shape{cloud.size(), 3});
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t j = 0; j < 3; ++j) t.at(i, j) = cloud.points[i][j];
  }
  return t;
}

PointCloud from_tensor(const ad::Tensor& t, std::optional<int> label) {
  if (t.rank() != 2 || t.dim(1) != 3) {
    throw DimensionError("expected an [n,3] tensor, got " + ad::shape_str(t.shape()));
  }
  PointCloud c;
  c.label = label;
  c.points.resize(t.dim(0));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    c.points[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  }
  return c;
}

// ---------------------------------------------------------------------------
// KdTree

KdTree::KdTree(std::span<const Point3> points) : points_(points) {
  if (points.empty()) throw EmptyCloudError("kd-tree over an empty cloud");
  std::vector<std::size_t> idx(points.size());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(points.size());
  root_ = build(idx, 0, idx.size(), 0);
}

std::int64_t KdTree::build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi,
                           int depth) {
  if (lo >= hi) return -1;
  const auto axis = static_cast<std::uint32_t>(depth % 3);
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                   idx.begin() + static_cast<std::ptrdiff_t>(mid),
                   idx.begin() + static_cast<std::ptrdiff_t>(hi),
                   [&](std::size_t a, std::size_t b) {
                     const double pa = points_[a][axis], pb = points_[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  const auto id = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back({idx[mid], axis});
  const auto left = build(idx, lo, mid, depth + 1);
  const auto right = build(idx, mid + 1, hi, depth + 1);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void KdTree::search(std::int64_t node, const Point3& q, Hit& best) const {
  if (node < 0) return;
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  const double d = squared_distance(points_[n.point], q);
  if (d < best.sq_dist || (d == best.sq_dist && n.point < best.index)) {
    best = {n.point, d};
  }
  const double diff = q[n.axis] - points_[n.point][n.axis];
  const auto near = diff < 0.0 ? n.left : n.right;
  const auto far = diff < 0.0 ? n.right : n.left;
  search(near, q, best);
  // Equality is not pruned so that a lower-index tie can still be found.
  if (diff * diff <= best.sq_dist) search(far, q, best);
}

KdTree::Hit KdTree::nearest(const Point3& q) const {
  Hit best{points_.size(), std::numeric_limits<double>::infinity()};
  search(root_, q, best);
  return best;
}

Matching nearest_matching(std::span<const Point3> from, std::span<const Point3> to) {
  if (from.empty() || to.empty()) throw EmptyCloudError("matching against an empty cloud");
  KdTree tree(to);
  Matching m;
  m.index.resize(from.size());
  m.sq_dist.resize(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    const auto hit = tree.nearest(from[i]);
    m.index[i] = hit.index;
    m.sq_dist[i] = hit.sq_dist;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Chamfer distance

double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) throw EmptyCloudError("chamfer distance with an empty cloud");
  const auto ab = nearest_matching(a, b);
  const auto ba = nearest_matching(b, a);
  double sa = 0.0, sb = 0.0;
  for (double d : ab.sq_dist) sa += d;
  for (double d : ba.sq_dist) sb += d;
  return sa / static_cast<double>(a.size()) + sb / static_cast<double>(b.size());
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  return chamfer_distance(std::span<const Point3>(a.points), std::span<const Point3>(b.points));
}

namespace {

std::vector<Point3> rows_as_points(const ad::Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3) {
    throw DimensionError("chamfer distance expects [n,3], got " + ad::shape_str(t.shape()));
  }
  std::vector<Point3> p(t.dim(0));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  return p;
}

}  // namespace

ad::Var chamfer_distance(ad::Var a, ad::Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw ContractError("chamfer distance needs two Vars on the same tape");
  }
  const auto pa = rows_as_points(a.value());
  const auto pb = rows_as_points(b.value());
  if (pa.empty() || pb.empty()) throw EmptyCloudError("chamfer distance with an empty cloud");
  auto ab = nearest_matching(pa, pb);
  auto ba = nearest_matching(pb, pa);
  ad::branch::note(ab.index);
  ad::branch::note(ba.index);
  double sa = 0.0, sb = 0.0;
  for (double d : ab.sq_dist) sa += d;
  for (double d : ba.sq_dist) sb += d;
  const double value = sa / static_cast<double>(pa.size()) + sb / static_cast<double>(pb.size());

  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(
      "chamfer", ad::Tensor::scalar(value), {ai, bi},
      [ai, bi, ab = std::move(ab.index), ba = std::move(ba.index)](ad::Tape& t,
                                                                  std::size_t self) {
        const double up = t.upstream(self).item();
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        const bool need_a = t.requires_grad(ai);
        const bool need_b = t.requires_grad(bi);
        ad::Tensor* ga = need_a ? &t.grad_buffer(ai) : nullptr;
        ad::Tensor* gb = need_b ? &t.grad_buffer(bi) : nullptr;
        // sum_i |a_i - b_nn(i)|^2 / |A|
        const double sa = 2.0 * up / static_cast<double>(ab.size());
        for (std::size_t i = 0; i < ab.size(); ++i) {
          for (std::size_t j = 0; j < 3; ++j) {
            const double g = sa * (av.at(i, j) - bv.at(ab[i], j));
            if (ga) ga->at(i, j) += g;
            if (gb) gb->at(ab[i], j) -= g;
          }
        }
        const double sb = 2.0 * up / static_cast<double>(ba.size());
        for (std::size_t i = 0; i < ba.size(); ++i) {
          for (std::size_t j = 0; j < 3; ++j) {
            const double g = sb * (bv.at(i, j) - av.at(ba[i], j));
            if (gb) gb->at(i, j) += g;
            if (ga) ga->at(ba[i], j) -= g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Neighbourhoods and regions

std::vector<std::size_t> knn(std::span<const Point3> points, std::size_t query_index,
                             std::size_t k) {
  const std::size_t n = points.size();
  if (k < 1 || k > n) {
    throw RangeError("knn: k=" + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  }
  if (query_index >= n) throw RangeError("knn: query index out of range");
  std::vector<std::pair<double, std::size_t>> d(n);
  const Point3& q = points[query_index];
  for (std::size_t i = 0; i < n; ++i) d[i] = {squared_distance(points[i], q), i};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

RegionMask region_from_seed(std::span<const Point3> points, std::size_t seed_index,
                            std::size_t k) {
  RegionMask m;
  m.selected.assign(points.size(), 0);
  for (auto i : knn(points, seed_index, k)) m.selected[i] = 1;
  m.k = k;
  m.seed_index = seed_index;
  return m;
}

RegionMask select_region(const PointCloud& cloud, std::size_t k, Rng& rng) {
  if (k < 1 || k > cloud.size()) {
    throw RangeError("select_region: k=" + std::to_string(k) + " outside [1," +
                     std::to_string(cloud.size()) + "]");
  }
  return region_from_seed(cloud.points, rng.index(cloud.size()), k);
}

// ---------------------------------------------------------------------------
// Cropping and augmentation

std::size_t crop_count(double retain_fraction, std::size_t n) {
  if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) {
    throw RangeError("crop retain fraction must lie in (0,1]");
  }
  // The small guard keeps e.g. 0.29 * 100 from flooring to 28.
  const auto keep = static_cast<std::size_t>(
      std::floor(retain_fraction * static_cast<double>(n) + 1e-9));
  if (keep == 0) {
    throw RangeError("crop of " + std::to_string(n) + " points at fraction " +
                     std::to_string(retain_fraction) + " keeps nothing");
  }
  return std::min(keep, n);
}

Point3 random_unit_vector(Rng& rng) {
  for (;;) {
    Point3 v{rng.normal(), rng.normal(), rng.normal()};
    const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (norm > 1e-12) return {v[0] / norm, v[1] / norm, v[2] / norm};
  }
}

PointCloud plane_crop(const PointCloud& cloud, double retain_fraction, const Point3& normal) {
  const std::size_t keep = crop_count(retain_fraction, cloud.size());
  if (keep == cloud.size()) return cloud;
  std::vector<std::pair<double, std::size_t>> proj(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    proj[i] = {p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2], i};
  }
  std::nth_element(proj.begin(), proj.begin() + static_cast<std::ptrdiff_t>(keep), proj.end());
  std::vector<std::size_t> kept(keep);
  for (std::size_t i = 0; i < keep; ++i) kept[i] = proj[i].second;
  std::sort(kept.begin(), kept.end());
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(keep);
  for (auto i : kept) out.points.push_back(cloud.points[i]);
  return out;
}

PointCloud random_plane_crop(const PointCloud& cloud, double retain_fraction, Rng& rng) {
  if (cloud.empty()) throw EmptyCloudError("crop of an empty cloud");
  const Point3 normal = random_unit_vector(rng);
  return plane_crop(cloud, retain_fraction, normal);
}

PointCloud rotate_z(const PointCloud& cloud, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  PointCloud out = cloud;
  for (auto& p : out.points) {
    const double x = p[0], y = p[1];
    p[0] = c * x - s * y;
    p[1] = s * x + c * y;
  }
  return out;
}

PointCloud augment(const PointCloud& cloud, Rng& rng, const AugmentOptions& opts) {
  PointCloud out = cloud;
  if (opts.rotate) {
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    out = rotate_z(out, theta);
  }
  if (opts.jitter) {
    for (auto& p : out.points) {
      for (auto& v : p) {
        v += std::clamp(opts.jitter_sigma * rng.normal(), -opts.jitter_clip, opts.jitter_clip);
      }
    }
  }
  return out;
}

PointCloud normalize(const PointCloud& cloud) {
  if (cloud.empty()) throw EmptyCloudError("normalize of an empty cloud");
  Point3 c{0.0, 0.0, 0.0};
  for (const auto& p : cloud.points) {
    for (int j = 0; j < 3; ++j) c[j] += p[j];
  }
  for (auto& v : c) v /= static_cast<double>(cloud.size());
  PointCloud out = cloud;
  double max_norm = 0.0;
  for (auto& p : out.points) {
    for (int j = 0; j < 3; ++j) p[j] -= c[j];
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (!(max_norm > 0.0)) {
    throw std::invalid_argument("normalize: all points coincide");
  }
  for (auto& p : out.points) {
    for (auto& v : p) v /= max_norm;
  }
  return out;
}

}  // namespace puda
