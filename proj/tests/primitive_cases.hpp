#pragma once

// Randomized finite-difference cases, one per tensor primitive. Shared by
// the unit tests and the acceptance suite.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ikd/gradcheck.hpp"
#include "ikd/ops.hpp"
#include "test_util.hpp"

namespace ikd::testing {

struct GradCase {
  std::string name;
  std::function<Tensor<double>()> f;
  std::vector<std::pair<std::string, Tensor<double>>> leaves;
};

// Weighted sum so every output element reaches the loss with a distinct
// coefficient.
inline Tensor<double> probe(const Tensor<double>& y, std::mt19937_64& rng) {
  auto w = random_tensor<double>(y.shape(), rng, -1.0, 1.0, false);
  return ops::sum(ops::mul(y, w));
}

inline GradCase make_primitive_case(const std::string& prim, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7919 + std::hash<std::string>{}(prim) % 1000);
  auto ext = [&](std::size_t lo, std::size_t hi) { return rand_extent(rng, lo, hi); };
  auto weights_rng = std::make_shared<std::mt19937_64>(rng());
  GradCase c;
  c.name = prim;
  using T = Tensor<double>;

  // Each lambda captures its own probe weights so repeated calls agree.
  auto with_probe = [&](std::function<T()> body) {
    auto probe_seed = (*weights_rng)();
    return [body, probe_seed]() {
      std::mt19937_64 r(probe_seed);
      return probe(body(), r);
    };
  };

  if (prim == "add" || prim == "sub" || prim == "mul" || prim == "div") {
    Shape s{ext(1, 4), ext(1, 5)};
    auto a = random_tensor(s, rng);
    auto b = prim == "div" ? random_tensor(s, rng, 0.5, 2.0) : random_tensor(s, rng);
    c.leaves = {{"a", a}, {"b", b}};
    c.f = with_probe([prim, a, b]() {
      if (prim == "add") return ops::add(a, b);
      if (prim == "sub") return ops::sub(a, b);
      if (prim == "mul") return ops::mul(a, b);
      return ops::div(a, b);
    });
  } else if (prim == "scale" || prim == "add_scalar") {
    auto a = random_tensor({ext(1, 6)}, rng);
    c.leaves = {{"a", a}};
    c.f = with_probe([prim, a]() {
      return prim == "scale" ? ops::scale(a, 1.7) : ops::add_scalar(a, -0.3);
    });
  } else if (prim == "add_bias") {
    Shape s{ext(1, 3), ext(1, 4), ext(1, 3)};
    const std::size_t axis = rng() % 3;
    auto x = random_tensor(s, rng);
    auto b = random_tensor({s[axis]}, rng);
    c.leaves = {{"x", x}, {"b", b}};
    c.f = with_probe([x, b, axis]() { return ops::add_bias(x, b, axis); });
  } else if (prim == "mul_channel") {
    const auto h = ext(1, 4), w = ext(1, 4);
    auto x = random_tensor({ext(1, 4), h, w}, rng);
    auto g = random_tensor({1, h, w}, rng);
    c.leaves = {{"x", x}, {"gate", g}};
    c.f = with_probe([x, g]() { return ops::mul_channel(x, g); });
  } else if (prim == "matmul") {
    const auto m = ext(1, 4), k = ext(1, 5), n = ext(1, 4);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    c.leaves = {{"a", a}, {"b", b}};
    c.f = with_probe([a, b]() { return ops::matmul(a, b); });
  } else if (prim == "transpose") {
    auto a = random_tensor({ext(1, 4), ext(1, 4)}, rng);
    c.leaves = {{"a", a}};
    c.f = with_probe([a]() { return ops::transpose(a); });
  } else if (prim == "reshape") {
    const auto m = ext(1, 4), n = ext(1, 4);
    auto a = random_tensor({m, n}, rng);
    c.leaves = {{"a", a}};
    c.f = with_probe([a, m, n]() { return ops::reshape(a, Shape{n, m}); });
  } else if (prim == "concat") {
    const std::size_t axis = rng() % 3;
    Shape s{ext(1, 3), ext(1, 3), ext(1, 3)};
    Shape s2 = s;
    s2[axis] = ext(1, 3);
    auto a = random_tensor(s, rng);
    auto b = random_tensor(s2, rng);
    c.leaves = {{"a", a}, {"b", b}};
    c.f = with_probe([a, b, axis]() { return ops::concat<double>({a, b}, axis); });
  } else if (prim == "slice") {
    Shape s{ext(2, 4), ext(2, 4)};
    const std::size_t axis = rng() % 2;
    const std::size_t begin = rng() % (s[axis] - 1);
    const std::size_t end = begin + 1 + rng() % (s[axis] - begin - 1 + 1);
    auto x = random_tensor(s, rng);
    c.leaves = {{"x", x}};
    c.f = with_probe([x, axis, begin, end]() {
      return ops::slice(x, axis, begin, std::min(end, x.dim(axis)));
    });
  } else if (prim == "conv2d_1x1" || prim == "conv2d_3x3" || prim == "conv2d_7x7") {
    const std::size_t k = prim == "conv2d_1x1" ? 1 : (prim == "conv2d_3x3" ? 3 : 7);
    const auto ci = ext(1, 3), co = ext(1, 3), h = ext(2, 6), w = ext(2, 6);
    auto x = random_tensor({ci, h, w}, rng);
    auto wt = random_tensor({co, ci, k, k}, rng);
    auto b = random_tensor({co}, rng);
    c.leaves = {{"x", x}, {"w", wt}, {"b", b}};
    c.f = with_probe([x, wt, b]() { return ops::conv2d(x, wt, &b); });
  } else if (prim == "max_pool2") {
    auto x = random_tensor({ext(1, 3), 2 * ext(1, 3), 2 * ext(1, 3)}, rng);
    c.leaves = {{"x", x}};
    c.f = with_probe([x]() { return ops::max_pool2(x); });
  } else if (prim == "max_pool3") {
    auto x = random_tensor({ext(1, 3), ext(1, 5), ext(1, 5)}, rng);
    c.leaves = {{"x", x}};
    c.f = with_probe([x]() { return ops::max_pool3(x); });
  } else if (prim == "upsample2x") {
    auto x = random_tensor({ext(1, 3), ext(1, 4), ext(1, 4)}, rng);
    c.leaves = {{"x", x}};
    c.f = with_probe([x]() { return ops::upsample2x(x); });
  } else if (prim == "batch_norm_train" || prim == "batch_norm_eval") {
    const bool train = prim == "batch_norm_train";
    Shape s{ext(2, 4), ext(1, 3), ext(2, 3)};
    const std::size_t axis = rng() % 3;
    auto x = random_tensor(s, rng);
    auto g = random_tensor({s[axis]}, rng, 0.5, 1.5);
    auto b = random_tensor({s[axis]}, rng);
    auto rm = random_tensor({s[axis]}, rng, -0.2, 0.2, false);
    auto rv = random_tensor({s[axis]}, rng, 0.5, 1.5, false);
    c.leaves = {{"x", x}, {"gamma", g}, {"beta", b}};
    c.f = with_probe([x, g, b, rm, rv, axis, train]() mutable {
      ops::BatchNormOptions opt;
      opt.channel_axis = axis;
      opt.train = train;
      return ops::batch_norm(x, g, b, rm, rv, opt);
    });
  } else if (prim == "relu" || prim == "sigmoid") {
    auto a = random_tensor({ext(1, 5), ext(1, 4)}, rng, -2.0, 2.0);
    c.leaves = {{"a", a}};
    c.f = with_probe([prim, a]() { return prim == "relu" ? ops::relu(a) : ops::sigmoid(a); });
  } else if (prim == "log") {
    auto a = random_tensor({ext(1, 6)}, rng, 0.2, 3.0);
    c.leaves = {{"a", a}};
    c.f = with_probe([a]() { return ops::log(a); });
  } else if (prim == "clamp_min") {
    auto a = random_tensor({ext(2, 8)}, rng, -1.0, 1.0);
    c.leaves = {{"a", a}};
    c.f = with_probe([a]() { return ops::clamp_min(a, 0.01); });
  } else if (prim == "softmax") {
    Shape s{ext(1, 3), ext(1, 4), ext(1, 3)};
    const std::size_t axis = rng() % 3;
    auto a = random_tensor(s, rng, -2.0, 2.0);
    c.leaves = {{"a", a}};
    c.f = with_probe([a, axis]() { return ops::softmax(a, axis); });
  } else if (prim == "mean_axis" || prim == "max_axis" || prim == "sum_axis") {
    Shape s{ext(1, 3), ext(1, 4), ext(1, 3)};
    const std::size_t axis = rng() % 3;
    auto a = random_tensor(s, rng);
    c.leaves = {{"a", a}};
    c.f = with_probe([prim, a, axis]() {
      if (prim == "mean_axis") return ops::mean_axis(a, axis);
      if (prim == "max_axis") return ops::max_axis(a, axis);
      return ops::sum_axis(a, axis);
    });
  } else if (prim == "sum" || prim == "mean") {
    auto a = random_tensor({ext(1, 4), ext(1, 4)}, rng);
    c.leaves = {{"a", a}};
    c.f = with_probe([prim, a]() { return prim == "sum" ? ops::sum(a) : ops::mean(a); });
  } else if (prim == "gather_rows") {
    const auto n = ext(1, 5), d = ext(1, 3), m = ext(1, 8);
    auto x = random_tensor({n, d}, rng);
    std::vector<std::int64_t> idx(m);
    for (auto& i : idx) i = static_cast<std::int64_t>(rng() % n);
    c.leaves = {{"x", x}};
    c.f = with_probe([x, idx]() { return ops::gather_rows(x, idx); });
  } else if (prim == "pick") {
    const auto m = ext(1, 6), k = ext(1, 4);
    auto x = random_tensor({m, k}, rng);
    std::vector<std::int64_t> cols(m);
    for (auto& i : cols) i = static_cast<std::int64_t>(rng() % k);
    c.leaves = {{"x", x}};
    c.f = with_probe([x, cols]() { return ops::pick(x, cols); });
  } else {
    throw std::invalid_argument("unknown primitive case " + prim);
  }
  return c;
}

inline const std::vector<std::string>& primitive_names() {
  static const std::vector<std::string> names{
      "add",        "sub",        "mul",        "div",          "scale",
      "add_scalar", "add_bias",   "mul_channel", "matmul",      "transpose",
      "reshape",    "concat",     "slice",      "conv2d_1x1",   "conv2d_3x3",
      "conv2d_7x7", "max_pool2",  "max_pool3",  "upsample2x",   "batch_norm_train",
      "batch_norm_eval", "relu",  "sigmoid",    "log",          "clamp_min",
      "softmax",    "mean_axis",  "max_axis",   "sum_axis",     "sum",
      "mean",       "gather_rows", "pick"};
  return names;
}

inline GradCheckReport run_case(const GradCase& c, double tol = 1e-4) {
  GradCheckOptions opt;
  opt.step = 1e-5;
  opt.tol = tol;
  return grad_check(c.f, c.leaves, opt);
}

}  // namespace ikd::testing
