#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "ikd/dimension_sensor.hpp"
#include "ikd/gradcheck.hpp"
#include "ikd/ops.hpp"
#include "test_util.hpp"

using namespace ikd;
using ikd::testing::random_tensor;

namespace {

std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double extent) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts)
    p = {extent * uniform01(rng()), extent * uniform01(rng()), std::floor(8 * uniform01(rng()))};
  return pts;
}

// Iterated 3x3 max-pool where holes carry -inf, then seeds restored.
std::vector<double> dilation_oracle(const std::vector<double>& v, const std::vector<std::uint8_t>& hole,
                                    std::size_t c, std::size_t h, std::size_t w,
                                    std::size_t passes) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> cur(v.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) cur[ch * h * w + p] = hole[p] ? ninf : v[ch * h * w + p];
  for (std::size_t it = 0; it < passes; ++it) {
    auto next = cur;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) {
          double m = ninf;
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
              const auto cc = static_cast<std::ptrdiff_t>(col) + dc;
              if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) ||
                  cc >= static_cast<std::ptrdiff_t>(w))
                continue;
              m = std::max(m, cur[ch * h * w + static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)]);
            }
          next[ch * h * w + r * w + col] = m;
        }
    cur = next;
  }
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) {
      auto& x = cur[ch * h * w + p];
      if (!hole[p]) x = v[ch * h * w + p];
      if (x == ninf) x = 0;
    }
  return cur;
}

}  // namespace

TEST_CASE("projection arithmetic and max-z rule") {
  RasterGrid g{0, 0, 1.0, 4, 4};
  auto cell = g.cell_of(2.5, 1.2);
  REQUIRE(cell);
  CHECK(cell->first == 2);
  CHECK(cell->second == 2);
  CHECK_FALSE(g.cell_of(-0.1, 1));
  CHECK_FALSE(g.cell_of(1, 0.0));
  CHECK(g.cell_of(1, 4.0)->first == 0);

  std::vector<Vec3> pts{{0.5, 0.5, 5}, {0.6, 0.4, 7}, {0.7, 0.7, 7}, {9, 9, 1}};
  auto m = build_projection(pts, g);
  CHECK(m.winner[3 * 4 + 0] == 1);
  CHECK(m.elevation[3 * 4 + 0] == 7);
  CHECK(m.covered() == 1);

  auto empty = build_projection({}, g);
  CHECK(empty.covered() == 0);
  CHECK_THROWS_AS(build_projection(pts, RasterGrid{0, 0, 0.0, 4, 4}), ContractError);
}

TEST_CASE("projection matches a per-pixel scan") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto pts = random_points(rng, 200, 8.0);
    RasterGrid g{0, 0, 1.0, 8, 8};
    auto m = build_projection(pts, g);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        std::int64_t best = -1;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          const auto col = static_cast<std::size_t>(std::floor(pts[i].x));
          const auto row = static_cast<std::size_t>(std::floor(8.0 - pts[i].y));
          if (row != r || col != c) continue;
          if (best < 0 || pts[i].z > pts[static_cast<std::size_t>(best)].z)
            best = static_cast<std::int64_t>(i);
        }
        CHECK(m.winner[r * 8 + c] == best);
      }
  }
}

TEST_CASE("halving the cell size refines every point into a child cell") {
  std::mt19937_64 rng(4);
  auto pts = random_points(rng, 500, 6.0);
  RasterGrid g{0.3, -0.2, 0.75, 8, 8};
  RasterGrid fine{0.3, -0.2, 0.375, 16, 16};
  for (const auto& p : pts) {
    auto a = g.cell_of(p.x, p.y);
    auto b = fine.cell_of(p.x, p.y);
    REQUIRE(a.has_value() == b.has_value());
    if (!a) continue;
    CHECK(b->first / 2 == a->first);
    CHECK(b->second / 2 == a->second);
  }
  CHECK(fine.coarsen(2).cell_size == g.cell_size);
  CHECK_THROWS_AS(RasterGrid({0, 0, 1, 6, 8}).coarsen(4), ContractError);
}

TEST_CASE("scatter places winner rows and routes gradients to them") {
  RasterGrid one{0, 0, 1, 1, 1};
  std::vector<Vec3> p{{0.5, 0.5, 0}};
  Tensor<double> f({1, 3}, {1, 2, 3}, true);
  auto m = scatter_features(f, build_projection(p, one));
  CHECK(m.shape() == Shape{3, 1, 1});
  CHECK(m.data()[2] == 3);

  auto holes = build_projection({}, RasterGrid{0, 0, 1, 2, 2});
  auto z = scatter_features(Tensor<double>({1, 2}, {4, 5}), holes);
  for (double v : z.data()) CHECK(v == 0);
  for (auto m : holes.hole) CHECK(m == 1);

  std::mt19937_64 rng(1);
  auto pts = random_points(rng, 40, 4.0);
  RasterGrid g{0, 0, 1, 4, 4};
  auto proj = build_projection(pts, g);
  auto x = random_tensor<double>({40, 2}, rng);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = ops::sum(scatter_features(x, proj));
    backward(tape, loss);
  }
  std::vector<int> wins(40, 0);
  for (auto w : proj.winner)
    if (w >= 0) wins[static_cast<std::size_t>(w)] = 1;
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t c = 0; c < 2; ++c) CHECK(x.grad()[i * 2 + c] == wins[i]);

  ProjectionMap bad = proj;
  bad.winner[0] = 99;
  bad.hole[0] = 0;
  CHECK_THROWS_AS(scatter_features(x, bad), ContractError);
}

TEST_CASE("dilation basics") {
  std::vector<std::uint8_t> hole(9, 1);
  hole[4] = 0;
  std::vector<double> v(9, 0.0);
  v[4] = 2.5;
  auto r = dilate_fill(Tensor<double>({1, 3, 3}, v), hole, 1);
  for (double x : r.map.data()) CHECK(x == 2.5);
  for (auto m : r.residual) CHECK(m == 0);

  auto r0 = dilate_fill(Tensor<double>({1, 3, 3}, v), hole, 0);
  CHECK(r0.residual[0] == 1);
  CHECK(r0.map.data()[0] == 0);

  std::mt19937_64 rng(3);
  auto full = random_tensor<double>({2, 4, 4}, rng, -1, 1, false);
  auto same = dilate_fill(full, std::vector<std::uint8_t>(16, 0), 3);
  for (std::size_t i = 0; i < 32; ++i) CHECK(same.map.data()[i] == full.data()[i]);

  CHECK_THROWS_AS(dilate_fill(full, std::vector<std::uint8_t>(15, 0), 1), ContractError);
}

TEST_CASE("dilation equals the windowed max over seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t c = 3, h = 8, w = 8;
    std::vector<std::uint8_t> hole(h * w);
    for (auto& m : hole) m = uniform01(rng()) < 0.8;
    auto x = random_tensor<double>({c, h, w}, rng, -2, 2, false);
    for (std::size_t passes : {1u, 2u, 3u}) {
      auto got = dilate_fill(x, hole, passes);
      std::vector<double> xv(x.data().begin(), x.data().end());
      auto want = dilation_oracle(xv, hole, c, h, w, passes);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.map.data()[i] == want[i]);

      // Chebyshev window oracle for residual holes.
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t cc = 0; cc < w; ++cc) {
          bool near = false;
          for (std::size_t rr = 0; rr < h; ++rr)
            for (std::size_t c2 = 0; c2 < w; ++c2)
              if (!hole[rr * w + c2] &&
                  std::max(std::abs(int(rr) - int(r)), std::abs(int(c2) - int(cc))) <= int(passes))
                near = true;
          CHECK(got.residual[r * w + cc] == !near);
          if (!hole[r * w + cc])
            for (std::size_t ch = 0; ch < c; ++ch)
              CHECK(got.map.data()[ch * h * w + r * w + cc] == x.data()[ch * h * w + r * w + cc]);
        }
    }
  }
}

TEST_CASE("sensor gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 50);
    auto pts = random_points(rng, 12, 6.0);
    RasterGrid g{0, 0, 1, 6, 6};
    auto x = random_tensor<double>({12, 3}, rng);
    auto probe = random_tensor<double>({3, 6, 6}, rng, -1, 1, false);
    auto f = [&]() { return ops::sum(ops::mul(sense(pts, x, g, 2).map, probe)); };
    auto report = grad_check(f, {{"features", x}}, {});
    INFO(report.summary());
    CHECK(report.pass());
  }
}

TEST_CASE("disabling dilation gradients keeps only seeded pixels") {
  std::mt19937_64 rng(9);
  auto pts = random_points(rng, 6, 6.0);
  RasterGrid g{0, 0, 1, 6, 6};
  auto x = random_tensor<double>({6, 1}, rng);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto s = sense(pts, x, g, 2, false);
    backward(tape, ops::sum(s.map));
  }
  auto proj = build_projection(pts, g);
  for (std::size_t i = 0; i < 6; ++i) {
    double expect = 0;
    for (auto w : proj.winner) expect += w == static_cast<std::int64_t>(i);
    CHECK(x.grad()[i] == expect);
  }
}

TEST_CASE("sense on empty, dense and elevation inputs") {
  RasterGrid g{0, 0, 1, 4, 4};
  // No point lands on the grid.
  std::vector<Vec3> outside{{-3, 1, 0}, {9, 9, 1}};
  auto e = sense(outside, Tensor<double>({2, 2}, {1, 2, 3, 4}), g, 2);
  CHECK(e.map.shape() == Shape{2, 4, 4});
  for (double v : e.map.data()) CHECK(v == 0);
  for (auto m : e.residual) CHECK(m == 1);

  std::vector<Vec3> dense;
  std::vector<double> feat;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      dense.push_back({c + 0.5, r + 0.5, double(r * 4 + c)});
      feat.push_back(r * 10.0 + c);
    }
  auto d = sense(dense, Tensor<double>({16, 1}, feat), g, 2);
  auto proj = build_projection(dense, g);
  for (std::size_t p = 0; p < 16; ++p) {
    CHECK(d.residual[p] == 0);
    CHECK(d.map.data()[p] == feat[static_cast<std::size_t>(proj.winner[p])]);
  }

  auto [none, none_mask] = surface_model({}, g, 2);
  CHECK(none == std::vector<double>(16, 0.0));
  CHECK(none_mask == std::vector<std::uint8_t>(16, 1));

  auto [dsm, mask] = surface_model(dense, g, 0);
  // North-up: the top row holds the largest y.
  CHECK(dsm[0] == 12);
  CHECK(dsm[15] == 3);
  CHECK(mask == std::vector<std::uint8_t>(16, 0));
  CHECK_THROWS_AS(sense(dense, Tensor<double>({15, 1}, std::vector<double>(15)), g, 1),
                  ContractError);
}
