#include <cmath>
#include <random>

#include "doctest.h"
#include "ikd/fusion.hpp"
#include "ikd/gradcheck.hpp"
#include "test_util.hpp"

using namespace ikd;
using ikd::testing::random_tensor;

namespace {

// Per-pixel class distributions [N, H, W].
Tensor<double> random_distribution(std::mt19937_64& rng, std::size_t n, std::size_t h,
                                   std::size_t w, bool rg = false) {
  NoGradScope<double> off;
  auto logits = random_tensor<double>({n, h, w}, rng, -2, 2, false);
  auto p = ops::softmax(logits, 0);
  return Tensor<double>(p.shape(), std::vector<double>(p.data().begin(), p.data().end()), rg);
}

void zero(Tensor<double>& t) {
  auto v = t.mutable_data();
  std::fill(v.begin(), v.end(), 0.0);
}

}  // namespace

TEST_CASE("GKG gate with a zero kernel is one half") {
  ParameterStore<double> store(1);
  GkgGate<double> gate(store, "gkg");
  zero(gate.conv.weight);
  zero(gate.conv.bias);
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({5, 6, 6}, rng);
  for (auto mode : {Mode::Train, Mode::Eval}) {
    auto f = gate.attention(x, mode);
    CHECK(f.shape() == Shape{1, 6, 6});
    for (double v : f.data()) CHECK(v == 0.5);
  }
}

TEST_CASE("GKG gate matches a step-by-step oracle") {
  ParameterStore<double> store(2);
  GkgGate<double> gate(store, "gkg");
  std::mt19937_64 rng(2);
  const std::size_t c = 3, h = 9, w = 9;
  auto x = random_tensor<double>({c, h, w}, rng);
  auto f = gate.attention(x, Mode::Eval);

  const auto xv = x.data();
  const auto k = gate.conv.weight.data();
  const double b = gate.conv.bias.data()[0];
  const double gamma = gate.bn.gamma.data()[0], beta = gate.bn.beta.data()[0];
  const double mu = gate.bn.running_mean.data()[0], var = gate.bn.running_var.data()[0];
  std::vector<double> stack(2 * h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    double s = 0, m = -1e300;
    for (std::size_t ch = 0; ch < c; ++ch) s += xv[ch * h * w + p], m = std::max(m, xv[ch * h * w + p]);
    stack[p] = s / c;
    stack[h * w + p] = m;
  }
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col) {
      double acc = b;
      for (std::size_t ch = 0; ch < 2; ++ch)
        for (int dr = -3; dr <= 3; ++dr)
          for (int dc = -3; dc <= 3; ++dc) {
            const int rr = int(r) + dr, cc = int(col) + dc;
            if (rr < 0 || cc < 0 || rr >= int(h) || cc >= int(w)) continue;
            acc += k[ch * 49 + std::size_t(dr + 3) * 7 + std::size_t(dc + 3)] *
                   stack[ch * h * w + std::size_t(rr) * w + std::size_t(cc)];
          }
      const double bn = gamma * (acc - mu) / std::sqrt(var + 1e-5) + beta;
      const double expect = 1.0 / (1.0 + std::exp(-std::max(0.0, bn)));
      CHECK(f.data()[r * w + col] == doctest::Approx(expect).epsilon(1e-12));
    }
  for (double v : f.data()) CHECK((v > 0 && v < 1));
}

TEST_CASE("GKG gate is constant on the interior for constant input") {
  ParameterStore<double> store(3);
  GkgGate<double> gate(store, "gkg");
  Tensor<double> x({2, 10, 10}, std::vector<double>(200, 0.7));
  auto f = gate.attention(x, Mode::Eval);
  const double centre = f.data()[3 * 10 + 3];
  for (std::size_t r = 3; r <= 6; ++r)
    for (std::size_t c = 3; c <= 6; ++c) CHECK(f.data()[r * 10 + c] == doctest::Approx(centre).epsilon(1e-14));
}

TEST_CASE("gkg_apply") {
  std::mt19937_64 rng(4);
  auto img = random_tensor<double>({3, 4, 5}, rng);
  auto pc = random_tensor<double>({2, 4, 5}, rng);
  Tensor<double> ones({1, 4, 5}, std::vector<double>(20, 1.0));
  Tensor<double> half({1, 4, 5}, std::vector<double>(20, 0.5));
  auto a = gkg_apply(ones, img, pc);
  auto b = gkg_apply(half, img, pc);
  CHECK(a.shape() == Shape{5, 4, 5});
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(a.data()[i] == img.data()[i]);
    CHECK(b.data()[i] == img.data()[i] / 2);
  }
  for (std::size_t i = 0; i < 40; ++i) CHECK(a.data()[60 + i] == pc.data()[i]);

  auto gate = random_tensor<double>({1, 4, 5}, rng, 0, 1);
  auto g = gkg_apply(gate, img, pc);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < 20; ++p)
      CHECK(g.data()[ch * 20 + p] == img.data()[ch * 20 + p] * gate.data()[p]);

  CHECK_THROWS_AS(gkg_apply(ones, img, random_tensor<double>({2, 4, 4}, rng)), ContractError);
  CHECK_THROWS_AS(gkg_apply(Tensor<double>({1, 3, 5}, std::vector<double>(15, 1.0)), img, pc),
                  ContractError);
}

TEST_CASE("reduced width rule") {
  CHECK(ckg_reduced_width(64) == 16);
  CHECK(ckg_reduced_width(16) == 8);
  CHECK(ckg_reduced_width(4) == 4);
}

TEST_CASE("CKG class map") {
  std::mt19937_64 rng(5);
  SUBCASE("single class") {
    Tensor<double> p({1, 2, 3}, std::vector<double>(6, 1.0));
    auto x = random_tensor<double>({4, 2, 3}, rng);
    auto f = ckg_class_map(p, x);
    std::vector<double> sums(4, 0.0);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t q = 0; q < 6; ++q) sums[c] += x.data()[c * 6 + q];
    double z = 0;
    for (double s : sums) z += std::exp(s);
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(f.data()[c] == doctest::Approx(std::exp(sums[c]) / z).epsilon(1e-12));
  }
  SUBCASE("one-hot partition sums features per class") {
    const std::vector<int> cls{0, 1, 1, 0, 2, 1};
    std::vector<double> pv(18, 0.0);
    for (std::size_t q = 0; q < 6; ++q) pv[static_cast<std::size_t>(cls[q]) * 6 + q] = 1.0;
    Tensor<double> p({3, 2, 3}, pv);
    auto x = random_tensor<double>({2, 2, 3}, rng);
    // Undo the row softmax by comparing log-ratios against the partition sums.
    auto f = ckg_class_map(p, x);
    for (std::size_t n = 0; n < 3; ++n) {
      double raw[2] = {0, 0};
      for (std::size_t q = 0; q < 6; ++q)
        if (cls[q] == int(n))
          for (std::size_t c = 0; c < 2; ++c) raw[c] += x.data()[c * 6 + q];
      CHECK(std::log(f.data()[n * 2 + 0] / f.data()[n * 2 + 1]) ==
            doctest::Approx(raw[0] - raw[1]).epsilon(1e-10));
    }
  }
  SUBCASE("2-class 2x2 matrix oracle") {
    auto p = random_distribution(rng, 2, 2, 2);
    auto x = random_tensor<double>({3, 2, 2}, rng);
    auto f = ckg_class_map(p, x);
    for (std::size_t n = 0; n < 2; ++n) {
      double raw[3] = {0, 0, 0}, z = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t q = 0; q < 4; ++q) raw[c] += p.data()[n * 4 + q] * x.data()[c * 4 + q];
        z += std::exp(raw[c]);
      }
      double row = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::abs(f.data()[n * 3 + c] - std::exp(raw[c]) / z) < 1e-6);
        row += f.data()[n * 3 + c];
      }
      CHECK(std::abs(row - 1) < 1e-6);
    }
  }
  Tensor<double> bad({2, 1, 1}, {0.5, 0.6});
  CHECK_THROWS_AS(ckg_class_map(bad, random_tensor<double>({3, 1, 1}, rng)), ContractError);
  CHECK_THROWS_AS(ckg_class_map(random_distribution(rng, 2, 2, 2), random_tensor<double>({3, 2, 3}, rng)),
                  ContractError);
}

TEST_CASE("CKG attention mixes class rows per pixel") {
  std::mt19937_64 rng(6);
  Tensor<double> one({1, 2, 2}, std::vector<double>(4, 1.0));
  Tensor<double> row({1, 3}, {0.2, 0.3, 0.5});
  auto a = ckg_attend(one, row);
  CHECK(a.shape() == Shape{3, 2, 2});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t q = 0; q < 4; ++q) CHECK(a.data()[c * 4 + q] == row.data()[c]);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(seed);
    auto p = random_distribution(r, 3, 3, 4);
    auto fc = ops::softmax(random_tensor<double>({3, 5}, r), 1);
    auto fine = ckg_attend(p, fc);
    for (std::size_t q = 0; q < 12; ++q) {
      double total = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        double want = 0, lo = 1e9, hi = -1e9;
        for (std::size_t n = 0; n < 3; ++n) {
          want += p.data()[n * 12 + q] * fc.data()[n * 5 + c];
          lo = std::min(lo, fc.data()[n * 5 + c]);
          hi = std::max(hi, fc.data()[n * 5 + c]);
        }
        const double got = fine.data()[c * 12 + q];
        CHECK(std::abs(got - want) < 1e-12);
        CHECK(got >= lo - 1e-12);
        CHECK(got <= hi + 1e-12);
        total += got;
      }
      // Convex combination of stochastic rows is stochastic.
      CHECK(std::abs(total - 1) < 1e-12);
    }
  }

  std::vector<double> onehot(12, 0.0);
  onehot[1 * 4 + 2] = 1;
  for (std::size_t q = 0; q < 4; ++q)
    if (q != 2) onehot[q] = 1;
  auto sel = ckg_attend(Tensor<double>({3, 2, 2}, onehot), Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
  CHECK(sel.data()[0 * 4 + 2] == 3);
  CHECK(sel.data()[1 * 4 + 2] == 4);
  CHECK_THROWS_AS(ckg_attend(one, Tensor<double>({2, 3}, std::vector<double>(6, 0.1))), ContractError);
}

TEST_CASE("CKG fuse") {
  std::mt19937_64 rng(7);
  ParameterStore<double> store(3);
  CkgGate<double> ckg(store, "ckg", 4, 4);
  auto x = random_tensor<double>({4, 3, 3}, rng);
  auto fine = random_tensor<double>({ckg_reduced_width(4), 3, 3}, rng);

  auto y = ckg.fuse(x, fine);
  const auto cin = 4 + ckg_reduced_width(4);
  const auto wv = ckg.fuse_conv.weight.data();
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t q = 0; q < 9; ++q) {
      double acc = ckg.fuse_conv.bias.data()[o];
      for (std::size_t c = 0; c < 4; ++c) acc += wv[o * cin + c] * x.data()[c * 9 + q];
      for (std::size_t c = 4; c < cin; ++c) acc += wv[o * cin + c] * fine.data()[(c - 4) * 9 + q];
      CHECK(std::abs(y.data()[o * 9 + q] - acc) < 1e-6);
    }

  {
    auto w = ckg.fuse_conv.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t o = 0; o < 4; ++o) w[o * cin + o] = 1.0;
    zero(ckg.fuse_conv.bias);
  }
  auto pass = ckg.fuse(x, fine);
  for (std::size_t i = 0; i < 36; ++i) CHECK(pass.data()[i] == x.data()[i]);

  zero(ckg.fuse_conv.weight);
  {
    auto b = ckg.fuse_conv.bias.mutable_data();
    for (std::size_t o = 0; o < 4; ++o) b[o] = double(o);
  }
  auto bias_only = ckg.fuse(x, fine);
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t q = 0; q < 9; ++q) CHECK(bias_only.data()[o * 9 + q] == double(o));
  CHECK_THROWS_AS(ckg.fuse(x, random_tensor<double>({4, 3, 2}, rng)), ContractError);
}

TEST_CASE("gates pass gradient checks over 10 seeds") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    ParameterStore<double> store(seed);
    GkgGate<double> gkg(store, "gkg");
    CkgGate<double> ckg(store, "ckg", 3, 2);
    auto img = random_tensor<double>({3, 4, 4}, rng);
    auto pc = random_tensor<double>({2, 4, 4}, rng);
    auto p = random_distribution(rng, 2, 4, 4, true);
    auto probe = random_tensor<double>({2, 4, 4}, rng, -1, 1, false);
    auto probe2 = random_tensor<double>({5, 4, 4}, rng, -1, 1, false);
    auto f = [&]() {
      auto gated = gkg_apply(gkg.attention(pc, Mode::Train), img, pc);
      auto out = ckg(p, img, Mode::Train);
      return ops::add(ops::sum(ops::mul(out.x_fine, probe)), ops::sum(ops::mul(gated, probe2)));
    };
    std::vector<std::pair<std::string, Tensor<double>>> leaves{{"img", img}, {"pc", pc}};
    for (const auto& [name, t] : store.params()) leaves.push_back({name, t});
    auto report = grad_check(f, leaves, {});
    INFO("seed " << seed << "\n" << report.summary());
    CHECK(report.pass());
  }
}
