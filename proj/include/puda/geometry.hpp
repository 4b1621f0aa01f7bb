#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "puda/rng.hpp"
#include "puda/tape.hpp"

namespace puda {

using Point3 = std::array<double, 3>;

/// Ordered set of 3D points with an optional class label.
struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Per-point selection of the region a destruction acts on.
struct RegionMask {
  std::vector<std::uint8_t> selected;
  std::size_t k = 0;
  std::size_t seed_index = 0;
};

ad::Tensor to_tensor(const PointCloud& cloud);
PointCloud from_tensor(const ad::Tensor& t, std::optional<int> label = {});

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Static 3-d tree answering exact nearest-neighbour queries.
///
/// Ties are resolved towards the lowest point index, so results match a
/// linear scan exactly.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> points);

  struct Hit {
    std::size_t index;
    double sq_dist;
  };
  Hit nearest(const Point3& q) const;

 private:
  struct Node {
    std::size_t point;
    std::uint32_t axis;
    std::int64_t left = -1;
    std::int64_t right = -1;
  };
  std::int64_t build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi,
                     int depth);
  void search(std::int64_t node, const Point3& q, Hit& best) const;

  std::span<const Point3> points_;
  std::vector<Node> nodes_;
  std::int64_t root_ = -1;
};

/// For every point of `from`, the index of and squared distance to its
/// nearest point in `to`.
struct Matching {
  std::vector<std::size_t> index;
  std::vector<double> sq_dist;
};
Matching nearest_matching(std::span<const Point3> from, std::span<const Point3> to);

/// Bidirectional mean squared nearest-neighbour distance.
double chamfer_distance(const PointCloud& a, const PointCloud& b);
double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b);

/// Differentiable chamfer distance between [n,3] and [m,3] tape values.
/// Nearest-neighbour assignments are held fixed in the backward pass.
ad::Var chamfer_distance(ad::Var a, ad::Var b);

/// The k points closest to points[query_index] (itself included), ordered
/// by distance with ties going to the lower index.
std::vector<std::size_t> knn(std::span<const Point3> points, std::size_t query_index,
                             std::size_t k);

RegionMask region_from_seed(std::span<const Point3> points, std::size_t seed_index,
                            std::size_t k);
RegionMask select_region(const PointCloud& cloud, std::size_t k, Rng& rng);

/// Number of points kept by a crop: floor(fraction * n).
std::size_t crop_count(double retain_fraction, std::size_t n);

/// Cuts the cloud with a randomly oriented plane, keeping the
/// floor(retain_fraction * n) points with the smallest projection onto the
/// drawn normal. Original order is preserved.
PointCloud random_plane_crop(const PointCloud& cloud, double retain_fraction, Rng& rng);
/// Same with an explicit (unit) normal.
PointCloud plane_crop(const PointCloud& cloud, double retain_fraction, const Point3& normal);

Point3 random_unit_vector(Rng& rng);

PointCloud rotate_z(const PointCloud& cloud, double angle);

struct AugmentOptions {
  bool rotate = true;
  bool jitter = true;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.02;
};

/// Random rotation about Z followed by clipped Gaussian jitter.
PointCloud augment(const PointCloud& cloud, Rng& rng, const AugmentOptions& opts = {});

/// Centres on the centroid and scales the farthest point to norm 1.
PointCloud normalize(const PointCloud& cloud);

}  // namespace puda
