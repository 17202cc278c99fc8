#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "ikd/checkpoint.hpp"
#include "ikd/gradcheck.hpp"
#include "ikd/ops.hpp"
#include "primitive_cases.hpp"
#include "test_util.hpp"

using namespace ikd;
using ikd::testing::random_tensor;

TEST_CASE("sigmoid at zero and its derivative") {
  auto x = Tensor<double>::scalar(0.0, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::sigmoid(x);
  CHECK(y.item() == doctest::Approx(0.5));
  backward(tape, ops::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("1x1 identity convolution leaves the input unchanged") {
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({3, 5, 4}, rng, -1, 1, false);
  auto w = Tensor<float>::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[c * 3 + c] = 1.0f;
  auto b = Tensor<float>::zeros({3});
  auto y = ops::conv2d(x, w, &b);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("softmax matches exp-normalize oracle") {
  std::mt19937_64 rng(11);
  auto v = random_tensor<double>({1, 5}, rng, -3, 3, false);
  auto s = ops::softmax(v, 1);
  double z = 0;
  for (std::size_t i = 0; i < 5; ++i) z += std::exp(v[i]);
  double total = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(s[i] == doctest::Approx(std::exp(v[i]) / z).epsilon(1e-12));
    CHECK(s[i] > 0);
    total += s[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("softmax rows are positive and normalized along any axis") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = random_tensor<double>({3, 4, 2}, rng, -20, 20, false);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto s = ops::softmax(a, axis);
      auto sums = ops::sum_axis(s, axis);
      for (auto v : sums.data()) CHECK(std::abs(v - 1.0) < 1e-6);
      for (auto v : s.data()) CHECK(v > 0);
    }
  }
}

TEST_CASE("gradient of a plain sum is all ones") {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(tape, ops::sum(x));
  for (auto g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("gradients accumulate across repeated uses of a leaf") {
  auto x = Tensor<double>({3}, {1, 2, 3}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::add(ops::mul(x, x), x);  // x^2 + x
  backward(tape, ops::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(3));
  CHECK(x.grad()[2] == doctest::Approx(7));
}

TEST_CASE("backward rejects a non-scalar loss and a loss from another tape") {
  auto x = Tensor<double>({2}, {1, 2}, true);
  Tape<double> tape, other;
  Tensor<double> y;
  {
    TapeScope<double> scope(tape);
    y = ops::scale(x, 2.0);
  }
  CHECK_THROWS_AS(backward(tape, y), ContractError);
  Tensor<double> s;
  {
    TapeScope<double> scope(tape);
    s = ops::sum(y);
  }
  CHECK_THROWS_AS(backward(other, s), ContractError);
  CHECK_THROWS_AS(backward(tape, Tensor<double>::scalar(1.0)), ContractError);
}

TEST_CASE("conv, relu, cross-entropy composition matches finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor<double>({2, 4, 4}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    auto b = random_tensor<double>({3}, rng);
    std::vector<std::int64_t> labels(16);
    for (auto& l : labels) l = static_cast<std::int64_t>(rng() % 3);
    auto f = [&]() {
      auto h = ops::relu(ops::conv2d(x, w, &b));
      auto p = ops::softmax(ops::transpose(ops::reshape(h, Shape{3, 16})), 1);
      return ops::scale(ops::mean(ops::pick(ops::log(p), labels)), -1.0);
    };
    auto report = grad_check(f, {{"x", x}, {"w", w}, {"b", b}}, {});
    INFO(report.summary());
    CHECK(report.pass());
  }
}

TEST_CASE("grad_check on x squared") {
  auto x = Tensor<double>::scalar(3.0, true);
  auto report = grad_check([&]() { return ops::mul(x, x); }, {{"x", x}}, {});
  REQUIRE(report.leaves.size() == 1);
  CHECK(report.pass());
  CHECK(report.max_rel_error() < 1e-6);
}

TEST_CASE("grad_check rejects non-scalar functions and a non-positive step") {
  auto x = Tensor<double>({2}, {1, 2}, true);
  CHECK_THROWS_AS(grad_check([&]() { return ops::scale(x, 2.0); }, {{"x", x}}, {}), ContractError);
  GradCheckOptions bad;
  bad.step = 0;
  CHECK_THROWS_AS(grad_check([&]() { return ops::sum(x); }, {{"x", x}}, bad), ContractError);
}

TEST_CASE("every primitive passes finite-difference checks over 20 seeds") {
  for (const auto& name : ikd::testing::primitive_names()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto c = ikd::testing::make_primitive_case(name, seed);
      auto report = ikd::testing::run_case(c, 1e-4);
      INFO(name << " seed " << seed << "\n" << report.summary());
      CHECK(report.pass());
    }
  }
}

TEST_CASE("a corrupted backward rule is reported as a failure") {
  auto x = Tensor<double>({3}, {0.3, -0.7, 1.1}, true);
  auto doubled_wrong = [](const Tensor<double>& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2 * a[i];
    return make_result<double>("bad_double", {a}, a.shape(), std::move(out),
                               [](Tape<double>::Node& n) {
                                 auto& g = n.inputs[0]->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += 3 * n.output->grad[i];  // should be 2
                               });
  };
  auto report = grad_check([&]() { return ops::sum(doubled_wrong(x)); }, {{"x", x}}, {});
  CHECK_FALSE(report.pass());
  CHECK_FALSE(report.leaves[0].pass);
}

TEST_CASE("shape mismatch names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({3, 3});
  try {
    ops::add(a, b);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::matmul(a, a), ContractError);
}

TEST_CASE("non-finite output raises a numeric fault naming the primitive") {
  auto a = Tensor<double>({2}, {1.0, -1.0});
  try {
    ops::log(a);
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(e.primitive() == "log");
  }
}

TEST_CASE("parameter_init schemes") {
  auto z = parameter_init<float>({4, 5}, InitScheme::Zeros, 1);
  for (auto v : z.data()) CHECK(v == 0.0f);
  auto o = parameter_init<float>({3}, InitScheme::Ones, 1);
  for (auto v : o.data()) CHECK(v == 1.0f);

  auto a = parameter_init<float>({100, 100}, InitScheme::FanUniform, 7);
  auto b = parameter_init<float>({100, 100}, InitScheme::FanUniform, 7);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  const double bound = std::sqrt(6.0 / 200.0);
  double mean = 0;
  for (auto v : a.data()) {
    CHECK(std::abs(v) <= bound);
    mean += v;
  }
  mean /= double(a.numel());
  CHECK(std::abs(mean) < 0.02);
  CHECK_THROWS_AS(parse_init_scheme("xavier_normal"), ContractError);
}

TEST_CASE("eval-mode batch norm is a per-channel affine map independent of the batch") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({6, 3}, rng, -1, 1, false);
  auto gamma = random_tensor<double>({3}, rng, 0.5, 1.5, false);
  auto beta = random_tensor<double>({3}, rng, -1, 1, false);
  auto rm = random_tensor<double>({3}, rng, -1, 1, false);
  auto rv = random_tensor<double>({3}, rng, 0.5, 2, false);
  ops::BatchNormOptions opt;
  opt.channel_axis = 1;
  opt.train = false;
  auto rm_before = rm.clone();
  auto full = ops::batch_norm(x, gamma, beta, rm, rv, opt);
  auto part = ops::batch_norm(ops::slice(x, 0, 2, 4), gamma, beta, rm, rv, opt);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(part[r * 3 + c] == full[(r + 2) * 3 + c]);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(rm[c] == rm_before[c]);
    const double expect = gamma[c] * (x[c] - rm[c]) / std::sqrt(rv[c] + 1e-5) + beta[c];
    CHECK(full[c] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("train-mode batch norm updates running statistics with momentum 0.1") {
  auto x = Tensor<double>({4, 1}, {1, 2, 3, 4});
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  ops::BatchNormOptions opt;
  opt.channel_axis = 1;
  auto y = ops::batch_norm(x, gamma, beta, rm, rv, opt);
  CHECK(rm[0] == doctest::Approx(0.25));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
  double s = 0;
  for (auto v : y.data()) s += v;
  CHECK(std::abs(s) < 1e-9);
}

TEST_CASE("concat then slice along the same axis is the identity") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t axis = seed % 3;
    Shape sa{2, 3, 4}, sb{2, 3, 4};
    sb[axis] = 1 + seed % 3;
    auto a = random_tensor<double>(sa, rng, -1, 1, false);
    auto b = random_tensor<double>(sb, rng, -1, 1, false);
    auto cat = ops::concat<double>({a, b}, axis);
    auto a2 = ops::slice(cat, axis, 0, sa[axis]);
    auto b2 = ops::slice(cat, axis, sa[axis], sa[axis] + sb[axis]);
    CHECK(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    CHECK(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
  }
}

TEST_CASE("checkpoint archive round-trips and rejects damage") {
  NamedTensors in;
  std::mt19937_64 rng(9);
  in.emplace_back("conv.w", random_tensor<float>({2, 3, 3, 3}, rng, -1, 1, false));
  in.emplace_back("bn.γ", Tensor<float>({4}, {1, 2, 3, 4}));
  std::stringstream ss;
  write_tensors(ss, in);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "IKDT");
  std::stringstream back(bytes);
  auto out = read_tensors(back);
  REQUIRE(out.size() == 2);
  CHECK(out[1].first == "bn.γ");
  CHECK(out[0].second.shape() == in[0].second.shape());
  CHECK(std::equal(in[0].second.data().begin(), in[0].second.data().end(),
                   out[0].second.data().begin()));

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensors(truncated), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream badmagic(bad);
  CHECK_THROWS_AS(read_tensors(badmagic), FormatError);
}
