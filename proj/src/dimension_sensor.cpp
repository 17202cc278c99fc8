#include "ikd/dimension_sensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace ikd {

void RasterGrid::validate() const {
  if (!(cell_size > 0) || !std::isfinite(cell_size))
    throw ContractError("raster grid: cell size must be positive, got " + std::to_string(cell_size));
  if (height == 0 || width == 0)
    throw ContractError("raster grid: empty " + std::to_string(height) + "x" +
                        std::to_string(width));
  if (!std::isfinite(origin_x) || !std::isfinite(origin_y))
    throw ContractError("raster grid: non-finite origin");
}

RasterGrid RasterGrid::coarsen(std::size_t factor) const {
  if (factor == 0 || height % factor || width % factor)
    throw ContractError("raster grid: " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by " + std::to_string(factor));
  return {origin_x, origin_y, cell_size * static_cast<double>(factor), height / factor,
          width / factor};
}

std::optional<std::pair<std::size_t, std::size_t>> RasterGrid::cell_of(double x, double y) const {
  const double c = std::floor((x - origin_x) / cell_size);
  const double r = std::floor((origin_y + static_cast<double>(height) * cell_size - y) / cell_size);
  if (!(c >= 0 && r >= 0 && c < static_cast<double>(width) && r < static_cast<double>(height)))
    return std::nullopt;
  return std::make_pair(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
}

std::size_t ProjectionMap::covered() const {
  return static_cast<std::size_t>(std::count(hole.begin(), hole.end(), 0));
}

ProjectionMap build_projection(std::span<const Vec3> points, const RasterGrid& grid) {
  grid.validate();
  ProjectionMap m;
  m.height = grid.height;
  m.width = grid.width;
  m.winner.assign(grid.pixels(), kNoPoint);
  m.elevation.assign(grid.pixels(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto cell = grid.cell_of(points[i].x, points[i].y);
    if (!cell) continue;
    const auto p = cell->first * grid.width + cell->second;
    if (m.winner[p] == kNoPoint || points[i].z > m.elevation[p]) {
      m.winner[p] = static_cast<std::int64_t>(i);
      m.elevation[p] = points[i].z;
    }
  }
  m.hole.resize(grid.pixels());
  for (std::size_t p = 0; p < grid.pixels(); ++p) m.hole[p] = m.winner[p] == kNoPoint;
  return m;
}

namespace {

// out[i] = x.flat[src[i]] or 0 when src[i] < 0. Gradient flows along
// grad_src, which may disable some of the forward links.
template <typename T>
Tensor<T> gather_flat(std::string_view op, const Tensor<T>& x, Shape shape,
                      std::vector<std::int64_t> src, std::vector<std::int64_t> grad_src) {
  const auto xv = x.data();
  std::vector<T> out(src.size(), T(0));
  for (std::size_t i = 0; i < src.size(); ++i)
    if (src[i] >= 0) out[i] = xv[static_cast<std::size_t>(src[i])];
  auto links = std::make_shared<std::vector<std::int64_t>>(std::move(grad_src));
  return make_result<T>(op, {x}, std::move(shape), std::move(out),
                        [links](typename Tape<T>::Node& n) {
                          if (!n.inputs[0]->requires_grad) return;
                          auto& g = n.inputs[0]->ensure_grad();
                          const auto& go = n.output->grad;
                          for (std::size_t i = 0; i < links->size(); ++i)
                            if ((*links)[i] >= 0) g[static_cast<std::size_t>((*links)[i])] += go[i];
                        });
}

}  // namespace

template <typename T>
Tensor<T> scatter_features(const Tensor<T>& features, const ProjectionMap& proj) {
  if (features.rank() != 2)
    throw ContractError("scatter_features: expects [N,C], got " + shape_str(features.shape()));
  const auto n = features.dim(0), c = features.dim(1);
  const auto hw = proj.height * proj.width;
  std::vector<std::int64_t> src(c * hw, -1);
  for (std::size_t p = 0; p < hw; ++p) {
    const auto w = proj.winner[p];
    if (w == kNoPoint) continue;
    if (w < 0 || static_cast<std::size_t>(w) >= n)
      throw ContractError("scatter_features: winner " + std::to_string(w) + " out of range for " +
                          std::to_string(n) + " feature rows");
    for (std::size_t ch = 0; ch < c; ++ch)
      src[ch * hw + p] = static_cast<std::int64_t>(static_cast<std::size_t>(w) * c + ch);
  }
  auto links = src;
  return gather_flat<T>("scatter_features", features, Shape{c, proj.height, proj.width},
                        std::move(src), std::move(links));
}

template <typename T>
FilledMap<T> dilate_fill(const Tensor<T>& map, const std::vector<std::uint8_t>& hole,
                         std::size_t passes, bool propagate_grad) {
  if (map.rank() != 3)
    throw ContractError("dilate_fill: expects [C,H,W], got " + shape_str(map.shape()));
  const auto c = map.dim(0), h = map.dim(1), w = map.dim(2), hw = h * w;
  if (hole.size() != hw)
    throw ContractError("dilate_fill: mask has " + std::to_string(hole.size()) + " pixels, map " +
                        std::to_string(hw));
  const auto v = map.data();
  std::vector<std::int64_t> src(c * hw, -1), links(c * hw, -1);
  FilledMap<T> out;
  out.residual.assign(hw, 0);
  const auto reach = static_cast<std::ptrdiff_t>(passes);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      const auto p = r * w + col;
      if (!hole[p]) {
        for (std::size_t ch = 0; ch < c; ++ch)
          src[ch * hw + p] = links[ch * hw + p] = static_cast<std::int64_t>(ch * hw + p);
        continue;
      }
      const auto r0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(r) - reach));
      const auto r1 = std::min(h - 1, r + passes);
      const auto c0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(col) - reach));
      const auto c1 = std::min(w - 1, col + passes);
      bool any = false;
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::int64_t best = -1;
        for (auto rr = r0; rr <= r1; ++rr)
          for (auto cc = c0; cc <= c1; ++cc) {
            const auto q = rr * w + cc;
            if (hole[q]) continue;
            const auto idx = ch * hw + q;
            // Row-major scan visits lower pixel indices first, so strict >
            // keeps the lower index on ties.
            if (best < 0 || v[idx] > v[static_cast<std::size_t>(best)])
              best = static_cast<std::int64_t>(idx);
          }
        if (best >= 0) {
          any = true;
          src[ch * hw + p] = best;
          if (propagate_grad) links[ch * hw + p] = best;
        }
      }
      out.residual[p] = !any;
    }
  }
  out.map = gather_flat<T>("dilate_fill", map, map.shape(), std::move(src), std::move(links));
  return out;
}

template <typename T>
SensedMap<T> sense(std::span<const Vec3> points, const Tensor<T>& features,
                   const RasterGrid& grid, std::size_t passes, bool propagate_grad) {
  if (features.rank() != 2 || features.dim(0) != points.size())
    throw ContractError("sense: features " + shape_str(features.shape()) + " for " +
                        std::to_string(points.size()) + " points");
  SensedMap<T> out;
  out.projection = build_projection(points, grid);
  auto filled =
      dilate_fill(scatter_features(features, out.projection), out.projection.hole, passes,
                  propagate_grad);
  out.map = std::move(filled.map);
  out.residual = std::move(filled.residual);
  return out;
}

std::pair<std::vector<double>, std::vector<std::uint8_t>> surface_model(
    std::span<const Vec3> points, const RasterGrid& grid, std::size_t passes) {
  if (points.empty()) {
    grid.validate();
    return {std::vector<double>(grid.pixels(), 0.0), std::vector<std::uint8_t>(grid.pixels(), 1)};
  }
  std::vector<double> z;
  z.reserve(points.size());
  for (const auto& p : points) z.push_back(p.z);
  NoGradScope<double> no_grad;
  auto s = sense<double>(points, Tensor<double>({points.size(), 1}, std::move(z)), grid, passes);
  const auto d = s.map.data();
  return {std::vector<double>(d.begin(), d.end()), std::move(s.residual)};
}

#define IKD_DS_INSTANTIATE(T)                                                                 \
  template Tensor<T> scatter_features<T>(const Tensor<T>&, const ProjectionMap&);             \
  template FilledMap<T> dilate_fill<T>(const Tensor<T>&, const std::vector<std::uint8_t>&,    \
                                       std::size_t, bool);                                    \
  template SensedMap<T> sense<T>(std::span<const Vec3>, const Tensor<T>&, const RasterGrid&, \
                                 std::size_t, bool);

IKD_DS_INSTANTIATE(float)
IKD_DS_INSTANTIATE(double)

#undef IKD_DS_INSTANTIATE

}  // namespace ikd
