#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ikd/point_cloud.hpp"
#include "ikd/tensor.hpp"

namespace ikd {

/// North-up raster: row 0 is the northern edge at origin_y + H * cell_size,
/// column 0 the western edge at origin_x.
struct RasterGrid {
  double origin_x = 0, origin_y = 0;
  double cell_size = 1;
  std::size_t height = 1, width = 1;

  void validate() const;
  std::size_t pixels() const { return height * width; }
  /// Same extent with `factor`-times larger cells. Requires H and W divisible by factor.
  RasterGrid coarsen(std::size_t factor) const;
  /// (row, col) of the cell containing (x, y), or nothing when outside.
  std::optional<std::pair<std::size_t, std::size_t>> cell_of(double x, double y) const;
};

inline constexpr std::int64_t kNoPoint = -1;

struct ProjectionMap {
  std::size_t height = 0, width = 0;
  std::vector<std::int64_t> winner;   // per pixel, kNoPoint on holes
  std::vector<double> elevation;      // winner's z, 0 on holes
  std::vector<std::uint8_t> hole;     // 1 where no point landed

  std::size_t covered() const;
};

/// Highest point per cell wins; ties go to the lower index. Points outside
/// the grid are dropped.
ProjectionMap build_projection(std::span<const Vec3> points, const RasterGrid& grid);

/// features [N, C] -> [C, H, W]. Hole pixels hold 0 and are flagged by
/// proj.hole; gradients reach only winning rows.
template <typename T>
Tensor<T> scatter_features(const Tensor<T>& features, const ProjectionMap& proj);

template <typename T>
struct FilledMap {
  Tensor<T> map;                      // [C, H, W]
  std::vector<std::uint8_t> residual; // 1 where still a hole after dilation (value 0)
};

/// Grey dilation of the seeded pixels by `passes` 3x3 max-pools. Seeded
/// pixels keep their values; a hole pixel within Chebyshev distance
/// `passes` of a seed takes the per-channel maximum over those seeds (ties to
/// the lower pixel index); the rest become 0 and stay flagged. When
/// propagate_grad is false, filled pixels pass no gradient back.
template <typename T>
FilledMap<T> dilate_fill(const Tensor<T>& map, const std::vector<std::uint8_t>& hole,
                         std::size_t passes, bool propagate_grad = true);

template <typename T>
struct SensedMap {
  Tensor<T> map;
  std::vector<std::uint8_t> residual;
  ProjectionMap projection;
};

/// build_projection -> scatter_features -> dilate_fill.
template <typename T>
SensedMap<T> sense(std::span<const Vec3> points, const Tensor<T>& features,
                   const RasterGrid& grid, std::size_t passes, bool propagate_grad = true);

/// Digital surface model: point elevations through the sensor. Returns
/// H*W elevations (0 on residual holes) and the residual mask.
std::pair<std::vector<double>, std::vector<std::uint8_t>> surface_model(
    std::span<const Vec3> points, const RasterGrid& grid, std::size_t passes);

}  // namespace ikd
