#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ikd/gradcheck.hpp"
#include "ikd/point_branch.hpp"
#include "test_util.hpp"

using namespace ikd;
using ikd::testing::random_tensor;

namespace {

std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double extent = 10.0,
                                double grid = 0.0) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) {
    p = {extent * uniform01(rng()), extent * uniform01(rng()), extent * uniform01(rng())};
    if (grid > 0) {
      // Snapped coordinates produce many exact distance ties.
      p = {std::round(p.x / grid) * grid, std::round(p.y / grid) * grid,
           std::round(p.z / grid) * grid};
    }
  }
  return pts;
}

// All-pairs scan: self first, then others by (distance, index).
NeighborIndex brute_knn(const std::vector<Vec3>& pts, std::size_t k) {
  NeighborIndex out;
  out.count = pts.size();
  out.k = k;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<std::pair<double, std::int64_t>> d;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      const double dx = pts[i].x - pts[j].x, dy = pts[i].y - pts[j].y, dz = pts[i].z - pts[j].z;
      d.push_back({dx * dx + dy * dy + dz * dz, static_cast<std::int64_t>(j)});
    }
    std::sort(d.begin(), d.end());
    out.index.push_back(static_cast<std::int64_t>(i));
    for (std::size_t m = 0; m + 1 < k; ++m) out.index.push_back(d[m].second);
  }
  return out;
}

template <typename T>
std::vector<T> to_vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("knn on three collinear points") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}};
  auto nb = knn_search(pts, 2);
  CHECK(std::vector<std::int64_t>(nb.row(0).begin(), nb.row(0).end()) ==
        std::vector<std::int64_t>{0, 1});
  CHECK(nb.row(2)[1] == 1);
  CHECK_THROWS_AS(knn_search(pts, 4), ContractError);
  CHECK_THROWS_AS(knn_search(pts, 0), ContractError);
}

TEST_CASE("knn with K = N gives permutations") {
  std::mt19937_64 rng(3);
  auto pts = random_points(rng, 40);
  auto nb = knn_search(pts, pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::set<std::int64_t> s(nb.row(i).begin(), nb.row(i).end());
    CHECK(s.size() == pts.size());
    CHECK(nb.row(i)[0] == static_cast<std::int64_t>(i));
  }
}

TEST_CASE("knn matches brute force for N up to 512 over 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto n = ikd::testing::rand_extent(rng, 1, 512);
    const auto k = std::min<std::size_t>(n, 16);
    const double grid = seed % 2 ? 1.0 : 0.0;
    auto pts = random_points(rng, n, 10.0, grid);
    auto fast = knn_search(pts, k);
    auto slow = brute_knn(pts, k);
    INFO("seed " << seed << " N " << n);
    CHECK(fast.index == slow.index);
  }
  std::mt19937_64 rng(99);
  auto pts = random_points(rng, 256);
  CHECK(knn_search(pts, 16).index == brute_knn(pts, 16).index);
}

TEST_CASE("random downsampling") {
  std::mt19937_64 rng(5);
  auto pts = random_points(rng, 8);
  auto t = random_downsample(pts, 4, 11);
  CHECK(t.kept.size() == 2);
  CHECK(t.kept[0] != t.kept[1]);
  CHECK(random_downsample(pts, 4, 11).kept == t.kept);

  auto id = random_downsample(pts, 1, 11);
  std::vector<std::int64_t> iota(8);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(id.kept == iota);
  CHECK(id.nearest_kept == iota);

  CHECK_THROWS_AS(random_downsample(std::span<const Vec3>(pts).first(3), 4, 1), ContractError);

  auto big = random_points(rng, 300);
  auto tb = random_downsample(big, 4, 2);
  REQUIRE(tb.kept.size() == 75);
  for (std::size_t i = 0; i < big.size(); ++i) {
    double best = 1e300;
    std::int64_t arg = -1;
    for (std::size_t j = 0; j < tb.kept.size(); ++j) {
      const auto& q = big[static_cast<std::size_t>(tb.kept[j])];
      const double d = std::pow(big[i].x - q.x, 2) + std::pow(big[i].y - q.y, 2) +
                       std::pow(big[i].z - q.z, 2);
      if (d < best) best = d, arg = static_cast<std::int64_t>(j);
    }
    CHECK(tb.nearest_kept[i] == arg);
  }
}

TEST_CASE("hierarchy point counts shrink by four per stage") {
  std::mt19937_64 rng(1);
  auto pts = random_points(rng, 1000);
  auto h = build_hierarchy(pts, 16, 4, 4, 7);
  const std::size_t expect[] = {1000, 250, 62, 15, 3};
  for (std::size_t s = 0; s <= 4; ++s) CHECK(h.positions[s].size() == expect[s]);
  CHECK(h.neighbors[3].k == 15);
}

TEST_CASE("relative position features") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}};
  NeighborIndex nb{2, 2, {0, 1, 1, 0}};
  auto f = relative_position_features<double>(pts, nb);
  REQUIRE(f.shape() == Shape{4, 10});
  const std::vector<double> self{0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  const std::vector<double> other{0, 0, 0, 1, 0, 0, -1, 0, 0, 1};
  CHECK(std::vector<double>(f.data().begin(), f.data().begin() + 10) == self);
  CHECK(std::vector<double>(f.data().begin() + 10, f.data().begin() + 20) == other);

  NeighborIndex bad{2, 1, {0, 5}};
  CHECK_THROWS_AS(relative_position_features<double>(pts, bad), ContractError);

  // A linear layer holding the identity reproduces the raw vectors.
  std::mt19937_64 rng(2);
  auto cloud = random_points(rng, 30);
  auto table = knn_search(cloud, 5);
  auto raw = relative_position_features<double>(cloud, table);
  ParameterStore<double> store(0);
  Linear<double> lin(store, "id", 10, 10);
  auto w = lin.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < 10; ++i) w[static_cast<std::size_t>(i * 10 + i)] = 1.0;
  CHECK(to_vec(lin(raw).data()) == to_vec(raw.data()));
}

TEST_CASE("attention pooling") {
  std::mt19937_64 rng(4);
  ParameterStore<double> store(1);
  Linear<double> scorer(store, "s", 3, 3, false);

  SUBCASE("constant scores give the mean") {
    {
      auto w = scorer.weight.mutable_data();
      std::fill(w.begin(), w.end(), 0.0);
    }
    auto x = random_tensor<double>({2, 4, 3}, rng);
    auto y = attention_pool(x, scorer);
    auto m = ops::sum_axis(ops::mean_axis(x, 1), 1);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(m.data()[i]));
  }

  SUBCASE("dominant score selects one neighbor") {
    // Scores equal the features times 1e3; feature k* is largest in every channel.
    auto w = scorer.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (int c = 0; c < 3; ++c) w[static_cast<std::size_t>(c * 3 + c)] = 1e3;
    std::vector<double> v(12, 0.1);
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(2 * 3 + c)] = 1.0 + c;
    auto y = attention_pool(Tensor<double>({1, 4, 3}, v), scorer);
    for (int c = 0; c < 3; ++c) CHECK(y.data()[static_cast<std::size_t>(c)] == doctest::Approx(1.0 + c));
  }

  SUBCASE("explicit softmax-weighted sum") {
    auto x = random_tensor<double>({1, 4, 3}, rng);
    auto y = attention_pool(x, scorer);
    const auto xv = x.data();
    const auto w = scorer.weight.data();
    for (std::size_t c = 0; c < 3; ++c) {
      double s[4], z = 0, acc = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        s[k] = 0;
        for (std::size_t j = 0; j < 3; ++j) s[k] += xv[k * 3 + j] * w[j * 3 + c];
        z += std::exp(s[k]);
      }
      for (std::size_t k = 0; k < 4; ++k) acc += std::exp(s[k]) / z * xv[k * 3 + c];
      CHECK(y.data()[c] == doctest::Approx(acc).epsilon(1e-12));
    }
  }

  SUBCASE("permuting neighbors leaves the output unchanged") {
    auto x = random_tensor<double>({5, 6, 3}, rng);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> pv(x.numel());
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t k = 0; k < 6; ++k)
        for (std::size_t c = 0; c < 3; ++c)
          pv[(i * 6 + k) * 3 + c] = x.data()[(i * 6 + perm[k]) * 3 + c];
    auto a = attention_pool(x, scorer);
    auto b = attention_pool(Tensor<double>({5, 6, 3}, pv), scorer);
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("stage widths and degenerate single point") {
  PointBranchConfig cfg;
  for (std::size_t s = 0; s < 4; ++s) CHECK(point_stage_width(cfg, s) == (16u << s));

  ParameterStore<float> store(3);
  LfaBlock<float> block(store, "b", 8, 16);
  std::vector<Vec3> one{{1, 2, 3}};
  auto nb = knn_search(one, 1);
  Tensor<float> f({1, 8}, std::vector<float>(8, 0.5f));
  for (auto mode : {Mode::Train, Mode::Eval}) {
    auto y = block(f, one, nb, mode);
    CHECK(y.shape() == Shape{1, 16});
    for (float v : y.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("nearest interpolation") {
  SamplingTrace single{{0}, {0, 0, 0, 0}};
  Tensor<double> v({1, 3}, {1, 2, 3});
  auto up = interpolate_nearest(v, single);
  REQUIRE(up.shape() == Shape{4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(up.data()[i * 3 + c] == v.data()[c]);

  std::mt19937_64 rng(8);
  auto pts = random_points(rng, 100);
  auto t = random_downsample(pts, 4, 3);
  auto coarse = random_tensor<double>({t.kept.size(), 5}, rng);
  auto fine = interpolate_nearest(coarse, t);
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t c = 0; c < 5; ++c)
      CHECK(fine.data()[i * 5 + c] ==
            coarse.data()[static_cast<std::size_t>(t.nearest_kept[i]) * 5 + c]);

  CHECK_THROWS_AS(interpolate_nearest(random_tensor<double>({3, 5}, rng), t), ContractError);

  // Without downsampling the decoder is MLP(input ++ skip).
  ParameterStore<double> store(4);
  DecoderBlock<double> dec(store, "d", 5, 2, 4);
  auto id = random_downsample(std::span<const Vec3>(pts).first(6), 1, 0);
  auto x = random_tensor<double>({6, 5}, rng);
  auto skip = random_tensor<double>({6, 2}, rng);
  auto a = dec(x, id, skip, Mode::Eval);
  auto b = dec.mlp(ops::concat<double>({x, skip}, 1), Mode::Eval);
  CHECK(to_vec(a.data()) == to_vec(b.data()));
  CHECK_THROWS_AS(dec(x, id, random_tensor<double>({5, 2}, rng), Mode::Eval), ContractError);
}

TEST_CASE("two LFA stages pass a gradient check on 32 points") {
  std::mt19937_64 rng(12);
  auto pts = random_points(rng, 32, 2.0);
  auto h = build_hierarchy(pts, 16, 2, 4, 5);
  ParameterStore<double> store(6);
  LfaBlock<double> b0(store, "b0", 8, 16), b1(store, "b1", 16, 32);
  auto x = random_tensor<double>({32, 8}, rng);
  auto probe = random_tensor<double>({8, 32}, rng, -1, 1, false);
  auto f = [&]() {
    auto y0 = b0(x, h.positions[0], h.neighbors[0], Mode::Train);
    auto y1 = b1(ops::gather_rows(y0, h.traces[0].kept), h.positions[1], h.neighbors[1],
                 Mode::Train);
    return ops::sum(ops::mul(y1, probe));
  };
  std::vector<std::pair<std::string, Tensor<double>>> leaves{{"x", x}};
  for (const auto& [name, t] : store.params()) leaves.push_back({name, t});
  GradCheckOptions opts;
  opts.max_entries_per_leaf = 24;
  auto report = grad_check(f, leaves, opts);
  INFO(report.summary());
  CHECK(report.pass());
}

TEST_CASE("full point branch shapes and gradients on 64 points") {
  std::mt19937_64 rng(21);
  auto pts = random_points(rng, 64, 4.0);
  PointBranchConfig cfg;
  cfg.depth = 2;
  cfg.base_width = 4;
  cfg.num_classes = 3;
  auto h = build_hierarchy(pts, 16, cfg.depth, 4, 9);
  ParameterStore<double> store(2);
  PointBranch<double> branch(store, cfg);
  auto x = random_tensor<double>({64, 5}, rng);
  auto out = branch(x, h, Mode::Train);
  CHECK(out.logits.shape() == Shape{64, 3});
  CHECK(out.encoder[1].shape() == Shape{16, 16});
  CHECK(out.decoder[1].shape() == Shape{16, 16});

  auto probe = random_tensor<double>({64, 3}, rng, -1, 1, false);
  auto f = [&]() { return ops::sum(ops::mul(branch(x, h, Mode::Train).logits, probe)); };
  std::vector<std::pair<std::string, Tensor<double>>> leaves{{"x", x}};
  for (const auto& [name, t] : store.params()) leaves.push_back({name, t});
  GradCheckOptions opts;
  opts.max_entries_per_leaf = 12;
  auto report = grad_check(f, leaves, opts);
  INFO(report.summary());
  CHECK(report.pass());

  CHECK_THROWS_AS(branch(random_tensor<double>({63, 5}, rng), h, Mode::Eval), ContractError);
}

TEST_CASE("xyzp text and binary round trips") {
  PointCloud c;
  c.points = {{1.5f, -2.25f, 3.125f, 1000.f, 1.f}, {0.1f, 0.2f, 0.3f, 65535.f, 3.f}};
  c.labels = {2, 0};
  for (bool binary : {false, true}) {
    std::stringstream ss;
    if (binary)
      write_xyzp_binary(ss, c);
    else
      write_xyzp_text(ss, c);
    auto back = read_xyzp(ss);
    CHECK(back.points == c.points);
    CHECK(back.labels == c.labels);
  }
  CHECK(normalized_intensity(65535.f) == 1.0f);
  CHECK(normalized_intensity(1e9f) == 1.0f);
  CHECK(normalized_return_number(7.f) == 1.0f);
  CHECK_THROWS_AS(c.validate(2), ContractError);
  CHECK_NOTHROW(c.validate(3));
}

TEST_CASE("xyzp errors report where they happen") {
  std::stringstream ss;
  PointCloud c;
  c.points = {{1, 2, 3, 4, 1}};
  write_xyzp_binary(ss, c);
  auto bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  try {
    read_xyzp(cut);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset 34") != std::string::npos);
  }

  std::stringstream text("# header\n1 2 3 4 1 0\n1 2 3 4 1\n");
  try {
    read_xyzp(text);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::stringstream junk("1 2 x 4 1\n");
  CHECK_THROWS_AS(read_xyzp(junk), FormatError);
}
