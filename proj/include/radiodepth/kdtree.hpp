#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "radiodepth/common.hpp"

namespace radiodepth {

struct Neighbor {
  std::size_t index = 0;
  /// Squared Euclidean distance, computed as (query - point).squaredNorm().
  double squared_distance = 0.0;
};

/// Static 3-D k-d tree for exact nearest-neighbor queries. Ties resolve to
/// the lowest point index, so results equal a brute-force scan.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::span<const Vec3> points);

  bool empty() const { return points_.empty(); }
  std::size_t size() const { return points_.size(); }
  Neighbor nearest(const Vec3& query) const;

 private:
  struct Node {
    std::size_t begin, end;  // range in order_
    int axis = -1;           // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
  };

  int build(std::size_t begin, std::size_t end);
  void search(int node, const Vec3& q, Neighbor& best) const;

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// Distance from each query point to its nearest neighbor in `points`.
std::vector<double> nearest_distances(std::span<const Vec3> queries,
                                      std::span<const Vec3> points);

}  // namespace radiodepth
