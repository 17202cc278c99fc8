#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ikd/point_cloud.hpp"

namespace ikd {

/// N x K neighbor table. Row i lists point i first, then the K-1 nearest
/// other points by increasing distance, ties broken by lower index.
struct NeighborIndex {
  std::size_t count = 0;
  std::size_t k = 0;
  std::vector<std::int64_t> index;  // row-major N x K

  std::span<const std::int64_t> row(std::size_t i) const {
    return std::span<const std::int64_t>(index).subspan(i * k, k);
  }
};

/// Static 3D kd-tree answering exact k-nearest-neighbor queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);

  /// The k nearest points to `query` ordered by (squared distance, index),
  /// skipping `exclude` when it is non-negative.
  std::vector<std::int64_t> nearest(const Vec3& query, std::size_t k,
                                    std::int64_t exclude = -1) const;

  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::uint32_t begin, end;  // range into order_
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

/// Exact Euclidean k-NN for every point. Throws ContractError when K > N or K == 0.
NeighborIndex knn_search(std::span<const Vec3> points, std::size_t k);

}  // namespace ikd
