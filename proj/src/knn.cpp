#include "ikd/knn.hpp"

#include <algorithm>
#include <numeric>
#include <queue>

#include "ikd/tensor.hpp"

namespace ikd {

namespace {

constexpr std::uint32_t kLeafSize = 8;

double coord(const Vec3& p, int axis) { return axis == 0 ? p.x : (axis == 1 ? p.y : p.z); }

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

struct Candidate {
  double d2;
  std::int64_t index;
  bool operator<(const Candidate& o) const {
    return d2 < o.d2 || (d2 == o.d2 && index < o.index);
  }
};

}  // namespace

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = points_[order_[begin]], hi = lo;
  for (auto i = begin; i < end; ++i) {
    const auto& p = points_[order_[i]];
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  const double ext[3] = {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z};
  const int axis = static_cast<int>(std::max_element(ext, ext + 3) - ext);
  const auto mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     const double ca = coord(points_[a], axis), cb = coord(points_[b], axis);
                     return ca < cb || (ca == cb && a < b);
                   });
  const double split = coord(points_[order_[mid]], axis);
  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  auto& n = nodes_[static_cast<std::size_t>(id)];
  n.axis = static_cast<std::uint8_t>(axis);
  n.split = split;
  n.left = left;
  n.right = right;
  return id;
}

std::vector<std::int64_t> KdTree::nearest(const Vec3& query, std::size_t k,
                                          std::int64_t exclude) const {
  std::priority_queue<Candidate> best;  // max-heap: top is the current worst
  if (k == 0 || nodes_.empty()) return {};

  auto consider = [&](std::int64_t idx) {
    if (idx == exclude) return;
    Candidate c{dist2(query, points_[static_cast<std::size_t>(idx)]), idx};
    if (best.size() < k) {
      best.push(c);
    } else if (c < best.top()) {
      best.pop();
      best.push(c);
    }
  };

  // Explicit stack of (node, squared distance to the splitting plane bound).
  std::vector<std::pair<std::int32_t, double>> stack{{0, 0.0}};
  while (!stack.empty()) {
    auto [id, bound] = stack.back();
    stack.pop_back();
    if (best.size() == k && bound > best.top().d2) continue;
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.left < 0) {
      for (auto i = n.begin; i < n.end; ++i) consider(order_[i]);
      continue;
    }
    const double diff = coord(query, n.axis) - n.split;
    const auto near_child = diff < 0 ? n.left : n.right;
    const auto far_child = diff < 0 ? n.right : n.left;
    stack.push_back({far_child, std::max(bound, diff * diff)});
    stack.push_back({near_child, bound});
  }

  std::vector<Candidate> sorted;
  sorted.reserve(best.size());
  while (!best.empty()) {
    sorted.push_back(best.top());
    best.pop();
  }
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::int64_t> out;
  out.reserve(sorted.size());
  for (const auto& c : sorted) out.push_back(c.index);
  return out;
}

NeighborIndex knn_search(std::span<const Vec3> points, std::size_t k) {
  if (k == 0 || k > points.size())
    throw ContractError("knn_search: K=" + std::to_string(k) + " invalid for N=" +
                        std::to_string(points.size()));
  KdTree tree(points);
  NeighborIndex out;
  out.count = points.size();
  out.k = k;
  out.index.reserve(points.size() * k);
  for (std::size_t i = 0; i < points.size(); ++i) {
    out.index.push_back(static_cast<std::int64_t>(i));
    auto rest = tree.nearest(points[i], k - 1, static_cast<std::int64_t>(i));
    out.index.insert(out.index.end(), rest.begin(), rest.end());
  }
  return out;
}

}  // namespace ikd
