#include "ikd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace ikd::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Node = typename Tape<T>::Node;

// out (m x n) = op(a) * op(b), or += when accumulating. A transposed operand
// is stored as its transpose. Both operands are copied into Eigen-owned
// (aligned) storage first.
template <typename T>
void gemm(const T* a, bool ta, const T* b, bool tb, std::size_t m, std::size_t k, std::size_t n,
          T* out, bool accumulate) {
  const RowMat<T> am = ta ? CMapMat<T>(a, k, m) : CMapMat<T>(a, m, k);
  const RowMat<T> bm = tb ? CMapMat<T>(b, n, k) : CMapMat<T>(b, k, n);
  RowMat<T> r(m, n);
  if (ta && tb)
    r.noalias() = am.transpose() * bm.transpose();
  else if (ta)
    r.noalias() = am.transpose() * bm;
  else if (tb)
    r.noalias() = am * bm.transpose();
  else
    r.noalias() = am * bm;
  const T* rp = r.data();
  if (accumulate)
    for (std::size_t i = 0; i < m * n; ++i) out[i] += rp[i];
  else
    std::copy(rp, rp + m * n, out);
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                      shape_str(b));
}

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw ContractError(std::string(op) + ": " + what);
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  require(axis < s.size(), op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Grad buffer of input i when it participates in differentiation, else null.
template <typename NodeT>
auto grad_of(NodeT& n, std::size_t i) -> decltype(&n.inputs[i]->ensure_grad()) {
  auto& in = n.inputs[i];
  return in->requires_grad ? &in->ensure_grad() : nullptr;
}

// dfdx receives the input and output value of each element.
template <typename T, typename F>
Tensor<T> unary(std::string_view op, const Tensor<T>& a, F f, std::function<T(T x, T y)> dfdx) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  auto saved_in = a.impl();
  return make_result<T>(op, {a}, a.shape(), std::move(out), [dfdx, saved_in](Node<T>& n) {
    auto* ga = grad_of(n, 0);
    if (!ga) return;
    const auto& go = n.output->grad;
    const auto& y = n.output->data;
    const auto& x = saved_in->data;
    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

// ----- elementwise ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", {a, b}, a.shape(), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = grad_of(n, k))
        for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", {a, b}, a.shape(), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] -= go[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", {a, b}, a.shape(), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    const auto& ad = n.inputs[0]->data;
    const auto& bd = n.inputs[1]->data;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * bd[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * ad[i];
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("div", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return make_result<T>("div", {a, b}, a.shape(), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    const auto& ad = n.inputs[0]->data;
    const auto& bd = n.inputs[1]->data;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] / bd[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] -= go[i] * ad[i] / (bd[i] * bd[i]);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>("scale", {a}, a.shape(), std::move(out), [s](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return make_result<T>("add_scalar", {a}, a.shape(), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, std::size_t axis) {
  auto sp = split_axis("add_bias", x.shape(), axis);
  if (b.rank() != 1 || b.dim(0) != sp.extent) shape_error("add_bias", x.shape(), b.shape());
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.extent; ++c)
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const auto i = (o * sp.extent + c) * sp.inner + j;
        out[i] = x[i] + b[c];
      }
  return make_result<T>("add_bias", {x, b}, x.shape(), std::move(out), [sp](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t c = 0; c < sp.extent; ++c)
          for (std::size_t j = 0; j < sp.inner; ++j)
            (*g)[c] += go[(o * sp.extent + c) * sp.inner + j];
  });
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& gate) {
  const auto& xs = x.shape();
  const auto& gs = gate.shape();
  bool ok = xs.size() == gs.size() && !xs.empty() && gs[0] == 1;
  for (std::size_t i = 1; ok && i < xs.size(); ++i) ok = xs[i] == gs[i];
  if (!ok) shape_error("mul_channel", xs, gs);
  const std::size_t c = xs[0], plane = gate.numel();
  std::vector<T> out(x.numel());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = x[k * plane + p] * gate[p];
  return make_result<T>("mul_channel", {x, gate}, xs, std::move(out), [c, plane](Node<T>& n) {
    const auto& go = n.output->grad;
    const auto& xd = n.inputs[0]->data;
    const auto& gd = n.inputs[1]->data;
    if (auto* g = grad_of(n, 0))
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < plane; ++p) (*g)[k * plane + p] += go[k * plane + p] * gd[p];
    if (auto* g = grad_of(n, 1))
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < plane; ++p) (*g)[p] += go[k * plane + p] * xd[k * plane + p];
  });
}

// ----- linear algebra and layout -------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  std::vector<T> out(m * nn);
  gemm(a.data().data(), false, b.data().data(), false, m, k, nn, out.data(), false);
  return make_result<T>("matmul", {a, b}, Shape{m, nn}, std::move(out), [m, k, nn](Node<T>& n) {
    const T* go = n.output->grad.data();
    if (auto* g = grad_of(n, 0))
      gemm(go, false, n.inputs[1]->data.data(), true, m, nn, k, g->data(), true);
    if (auto* g = grad_of(n, 1))
      gemm(n.inputs[0]->data.data(), true, go, false, k, m, nn, g->data(), true);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose", "expects rank 2, got " + shape_str(a.shape()));
  const auto m = a.dim(0), nn = a.dim(1);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) out[j * m + i] = a[i * nn + j];
  return make_result<T>("transpose", {a}, Shape{nn, m}, std::move(out), [m, nn](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nn; ++j) (*g)[i * nn + j] += go[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", {a}, std::move(shape), std::move(out), [](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  require(!xs.empty(), "concat", "needs at least one input");
  Shape shape = xs[0].shape();
  require(axis < shape.size(), "concat", "axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    bool ok = s.size() == shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == shape[i];
    if (!ok) shape_error("concat", shape, s);
    total += s[axis];
  }
  shape[axis] = total;
  auto sp = split_axis("concat", shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const auto ext = x.dim(axis);
    const auto chunk = ext * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data().begin() + o * chunk, chunk,
                  out.begin() + (o * sp.extent + off) * sp.inner);
    off += ext;
  }
  std::vector<std::size_t> extents;
  for (const auto& x : xs) extents.push_back(x.dim(axis));
  return make_result<T>("concat", xs, shape, std::move(out), [sp, offsets, extents](Node<T>& n) {
    const auto& go = n.output->grad;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      auto* g = grad_of(n, k);
      if (!g) continue;
      const auto chunk = extents[k] * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const auto src = (o * sp.extent + offsets[k]) * sp.inner;
        for (std::size_t j = 0; j < chunk; ++j) (*g)[o * chunk + j] += go[src + j];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  auto sp = split_axis("slice", x.shape(), axis);
  require(begin < end && end <= sp.extent, "slice",
          "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
              shape_str(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const auto chunk = (end - begin) * sp.inner;
  std::vector<T> out(shape_numel(shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().begin() + (o * sp.extent + begin) * sp.inner, chunk,
                out.begin() + o * chunk);
  return make_result<T>("slice", {x}, shape, std::move(out), [sp, begin, chunk](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < chunk; ++j)
          (*g)[(o * sp.extent + begin) * sp.inner + j] += go[o * chunk + j];
  });
}

// ----- spatial ---------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * hw;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          T* dst = row + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, w, T(0));
            continue;
          }
          const T* src = x + (ch * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
            dst[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? T(0)
                                                                        : src[static_cast<std::size_t>(sx)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* gx) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * hw;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = gx + (ch * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w))
              dst[static_cast<std::size_t>(sx)] += row[y * w + xx];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) ||
      w.dim(2) % 2 == 0)
    shape_error("conv2d", x.shape(), w.shape());
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0)))
    shape_error("conv2d", w.shape(), bias->shape());
  const auto c = x.dim(0), h = x.dim(1), wd = x.dim(2), o = w.dim(0), k = w.dim(2);
  const auto hw = h * wd, ck = c * k * k;
  // 1x1 kernels read the input directly.
  auto cols = std::make_shared<std::vector<T>>();
  const T* colp = x.data().data();
  if (k != 1) {
    cols->resize(ck * hw);
    im2col(x.data().data(), c, h, wd, k, cols->data());
    colp = cols->data();
  }
  std::vector<T> out(o * hw);
  gemm(w.data().data(), false, colp, false, o, ck, hw, out.data(), false);
  if (bias)
    for (std::size_t i = 0; i < o; ++i)
      for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] += (*bias)[i];
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(
      "conv2d", inputs, Shape{o, h, wd}, std::move(out),
      [c, h, wd, o, k, hw, ck, cols](Node<T>& n) {
        const T* go = n.output->grad.data();
        const T* colp = k == 1 ? n.inputs[0]->data.data() : cols->data();
        if (auto* g = grad_of(n, 1)) gemm(go, false, colp, true, o, hw, ck, g->data(), true);
        if (n.inputs.size() > 2)
          if (auto* g = grad_of(n, 2))
            for (std::size_t i = 0; i < o; ++i) {
              T s = 0;
              for (std::size_t p = 0; p < hw; ++p) s += go[i * hw + p];
              (*g)[i] += s;
            }
        if (auto* g = grad_of(n, 0)) {
          const T* wm = n.inputs[1]->data.data();
          if (k == 1) {
            gemm(wm, true, go, false, ck, o, hw, g->data(), true);
          } else {
            std::vector<T> gcols(ck * hw);
            gemm(wm, true, go, false, ck, o, hw, gcols.data(), false);
            col2im_add(gcols.data(), c, h, wd, k, g->data());
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& x) {
  require(x.rank() == 3 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0, "max_pool2",
          "expects [C,H,W] with even H, W, got " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / 2, ow = w / 2;
  std::vector<T> out(c * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const auto idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const auto o = (ch * oh + y) * ow + xx;
        out[o] = x[best];
        (*arg)[o] = best;
      }
  return make_result<T>("max_pool2", {x}, Shape{c, oh, ow}, std::move(out), [arg](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[(*arg)[i]] += go[i];
  });
}

template <typename T>
Tensor<T> max_pool3(const Tensor<T>& x) {
  require(x.rank() == 3, "max_pool3", "expects [C,H,W], got " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<T> out(x.numel());
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        std::size_t best = std::numeric_limits<std::size_t>::max();
        for (std::size_t yy = y ? y - 1 : 0; yy <= std::min(y + 1, h - 1); ++yy)
          for (std::size_t x2 = xx ? xx - 1 : 0; x2 <= std::min(xx + 1, w - 1); ++x2) {
            const auto idx = (ch * h + yy) * w + x2;
            if (best == std::numeric_limits<std::size_t>::max() || x[idx] > x[best]) best = idx;
          }
        const auto o = (ch * h + y) * w + xx;
        out[o] = x[best];
        (*arg)[o] = best;
      }
  return make_result<T>("max_pool3", {x}, x.shape(), std::move(out), [arg](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[(*arg)[i]] += go[i];
  });
}

namespace {

struct Lerp {
  std::size_t i0, i1;
  double w1;
};

std::vector<Lerp> lerp_table(std::size_t in) {
  std::vector<Lerp> t(in * 2);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (double(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    auto i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - double(i0)};
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  require(x.rank() == 3, "upsample2x", "expects [C,H,W], got " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = 2 * h, ow = 2 * w;
  auto ty = lerp_table(h), tx = lerp_table(w);
  std::vector<T> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = x.data().data() + ch * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& ly = ty[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& lx = tx[xx];
        const T a = src[ly.i0 * w + lx.i0], b = src[ly.i0 * w + lx.i1];
        const T cc = src[ly.i1 * w + lx.i0], d = src[ly.i1 * w + lx.i1];
        const T wy = T(ly.w1), wx = T(lx.w1);
        out[(ch * oh + y) * ow + xx] =
            (T(1) - wy) * ((T(1) - wx) * a + wx * b) + wy * ((T(1) - wx) * cc + wx * d);
      }
    }
  }
  return make_result<T>(
      "upsample2x", {x}, Shape{c, oh, ow}, std::move(out), [c, h, w, oh, ow, ty, tx](Node<T>& n) {
        auto* g = grad_of(n, 0);
        if (!g) return;
        const auto& go = n.output->grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* dst = g->data() + ch * h * w;
          for (std::size_t y = 0; y < oh; ++y) {
            const auto& ly = ty[y];
            for (std::size_t xx = 0; xx < ow; ++xx) {
              const auto& lx = tx[xx];
              const T gv = go[(ch * oh + y) * ow + xx];
              const T wy = T(ly.w1), wx = T(lx.w1);
              dst[ly.i0 * w + lx.i0] += gv * (T(1) - wy) * (T(1) - wx);
              dst[ly.i0 * w + lx.i1] += gv * (T(1) - wy) * wx;
              dst[ly.i1 * w + lx.i0] += gv * wy * (T(1) - wx);
              dst[ly.i1 * w + lx.i1] += gv * wy * wx;
            }
          }
        }
      });
}

// ----- normalization -------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     const BatchNormOptions& opt) {
  auto sp = split_axis("batch_norm", x.shape(), opt.channel_axis);
  const auto c = sp.extent;
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (p->rank() != 1 || p->dim(0) != c) shape_error("batch_norm", x.shape(), p->shape());
  const std::size_t count = sp.outer * sp.inner;
  auto mean = std::make_shared<std::vector<T>>(c);
  auto inv = std::make_shared<std::vector<T>>(c);
  auto at = [&](std::size_t o, std::size_t ch, std::size_t j) {
    return (o * c + ch) * sp.inner + j;
  };
  if (opt.train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.inner; ++j) s += double(x[at(o, ch, j)]);
      const double mu = s / double(count);
      double v = 0;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.inner; ++j) {
          const double d = double(x[at(o, ch, j)]) - mu;
          v += d * d;
        }
      const double var = v / double(count);
      (*mean)[ch] = T(mu);
      (*inv)[ch] = T(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = count > 1 ? v / double(count - 1) : var;
      rm[ch] = T((1 - opt.momentum) * double(rm[ch]) + opt.momentum * mu);
      rv[ch] = T((1 - opt.momentum) * double(rv[ch]) + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean[ch];
      (*inv)[ch] = T(1.0 / std::sqrt(double(running_var[ch]) + opt.eps));
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const auto i = at(o, ch, j);
        out[i] = gamma[ch] * (x[i] - (*mean)[ch]) * (*inv)[ch] + beta[ch];
      }
  const bool train = opt.train;
  return make_result<T>(
      "batch_norm", {x, gamma, beta}, x.shape(), std::move(out),
      [sp, c, count, mean, inv, train](Node<T>& n) {
        const auto& go = n.output->grad;
        const auto& xd = n.inputs[0]->data;
        const auto& gd = n.inputs[1]->data;
        auto idx = [&](std::size_t o, std::size_t ch, std::size_t j) {
          return (o * c + ch) * sp.inner + j;
        };
        auto* gx = grad_of(n, 0);
        auto* gg = grad_of(n, 1);
        auto* gb = grad_of(n, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < sp.inner; ++j) {
              const auto i = idx(o, ch, j);
              const T xhat = (xd[i] - (*mean)[ch]) * (*inv)[ch];
              sum_dy += go[i];
              sum_dy_xhat += go[i] * xhat;
            }
          if (gg) (*gg)[ch] += sum_dy_xhat;
          if (gb) (*gb)[ch] += sum_dy;
          if (!gx) continue;
          const T m = T(count);
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < sp.inner; ++j) {
              const auto i = idx(o, ch, j);
              if (train) {
                const T xhat = (xd[i] - (*mean)[ch]) * (*inv)[ch];
                (*gx)[i] += gd[ch] * (*inv)[ch] / m * (m * go[i] - sum_dy - xhat * sum_dy_xhat);
              } else {
                (*gx)[i] += go[i] * gd[ch] * (*inv)[ch];
              }
            }
        }
      });
}

// ----- activations -----------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return unary<T>(
      "clamp_min", a, [floor](T x) { return x < floor ? floor : x; },
      [floor](T x, T) { return x < floor ? T(0) : T(1); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis("softmax", a.shape(), axis);
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const auto base = o * sp.extent * sp.inner + j;
      T mx = a[base];
      for (std::size_t k = 1; k < sp.extent; ++k) mx = std::max(mx, a[base + k * sp.inner]);
      T s = 0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const T e = std::exp(a[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= s;
    }
  return make_result<T>("softmax", {a}, a.shape(), std::move(out), [sp](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const auto& go = n.output->grad;
    const auto& y = n.output->data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const auto base = o * sp.extent * sp.inner + j;
        T dot = 0;
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const auto i = base + k * sp.inner;
          dot += go[i] * y[i];
        }
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const auto i = base + k * sp.inner;
          (*g)[i] += y[i] * (go[i] - dot);
        }
      }
  });
}

// ----- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis("mean_axis", a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = 1;
  std::vector<T> out(sp.outer * sp.inner, T(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t j = 0; j < sp.inner; ++j)
        out[o * sp.inner + j] += a[(o * sp.extent + k) * sp.inner + j];
  for (auto& v : out) v /= T(sp.extent);
  return make_result<T>("mean_axis", {a}, shape, std::move(out), [sp](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const auto& go = n.output->grad;
    const T inv = T(1) / T(sp.extent);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.extent; ++k)
        for (std::size_t j = 0; j < sp.inner; ++j)
          (*g)[(o * sp.extent + k) * sp.inner + j] += go[o * sp.inner + j] * inv;
  });
}

template <typename T>
Tensor<T> max_axis(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis("max_axis", a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = 1;
  std::vector<T> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      std::size_t best = o * sp.extent * sp.inner + j;
      for (std::size_t k = 1; k < sp.extent; ++k) {
        const auto i = (o * sp.extent + k) * sp.inner + j;
        if (a[i] > a[best]) best = i;
      }
      out[o * sp.inner + j] = a[best];
      (*arg)[o * sp.inner + j] = best;
    }
  return make_result<T>("max_axis", {a}, shape, std::move(out), [arg](Node<T>& n) {
    const auto& go = n.output->grad;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < go.size(); ++i) (*g)[(*arg)[i]] += go[i];
  });
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis("sum_axis", a.shape(), axis);
  Shape shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) shape.push_back(a.dim(i));
  if (shape.empty()) shape.push_back(1);
  std::vector<T> out(sp.outer * sp.inner, T(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t j = 0; j < sp.inner; ++j)
        out[o * sp.inner + j] += a[(o * sp.extent + k) * sp.inner + j];
  return make_result<T>("sum_axis", {a}, shape, std::move(out), [sp](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const auto& go = n.output->grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.extent; ++k)
        for (std::size_t j = 0; j < sp.inner; ++j)
          (*g)[(o * sp.extent + k) * sp.inner + j] += go[o * sp.inner + j];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (auto v : a.data()) s += v;
  return make_result<T>("sum", {a}, Shape{1}, std::vector<T>{s}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      const T go = n.output->grad[0];
      for (auto& v : *g) v += go;
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (auto v : a.data()) s += v;
  const T inv = T(1) / T(a.numel());
  return make_result<T>("mean", {a}, Shape{1}, std::vector<T>{s * inv}, [inv](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      const T go = n.output->grad[0] * inv;
      for (auto& v : *g) v += go;
    }
  });
}

// ----- indexing --------------------------------------------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& index) {
  require(x.rank() == 2, "gather_rows", "expects [N,D], got " + shape_str(x.shape()));
  require(!index.empty(), "gather_rows", "empty index");
  const auto rows = x.dim(0), d = x.dim(1);
  std::vector<T> out(index.size() * d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = index[i];
    if (r < 0 || static_cast<std::size_t>(r) >= rows)
      throw ContractError("gather_rows: index " + std::to_string(r) + " out of range for " +
                          shape_str(x.shape()));
    std::copy_n(x.data().begin() + static_cast<std::size_t>(r) * d, d, out.begin() + i * d);
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(index);
  return make_result<T>("gather_rows", {x}, Shape{index.size(), d}, std::move(out),
                        [idx, d](Node<T>& n) {
                          auto* g = grad_of(n, 0);
                          if (!g) return;
                          const auto& go = n.output->grad;
                          for (std::size_t i = 0; i < idx->size(); ++i) {
                            const auto r = static_cast<std::size_t>((*idx)[i]);
                            for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += go[i * d + j];
                          }
                        });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, const std::vector<std::int64_t>& cols) {
  require(x.rank() == 2 && x.dim(0) == cols.size(), "pick",
          "expects [M,C] with M = " + std::to_string(cols.size()) + ", got " +
              shape_str(x.shape()));
  const auto c = x.dim(1);
  std::vector<T> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= c)
      throw ContractError("pick: column " + std::to_string(cols[i]) + " out of range for " +
                          shape_str(x.shape()));
    out[i] = x[i * c + static_cast<std::size_t>(cols[i])];
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(cols);
  return make_result<T>("pick", {x}, Shape{cols.size()}, std::move(out), [idx, c](Node<T>& n) {
    auto* g = grad_of(n, 0);
    if (!g) return;
    const auto& go = n.output->grad;
    for (std::size_t i = 0; i < idx->size(); ++i)
      (*g)[i * c + static_cast<std::size_t>((*idx)[i])] += go[i];
  });
}

#define IKD_OPS_INSTANTIATE(T)                                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&, std::size_t);                \
  template Tensor<T> mul_channel(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);             \
  template Tensor<T> max_pool2(const Tensor<T>&);                                              \
  template Tensor<T> max_pool3(const Tensor<T>&);                                              \
  template Tensor<T> upsample2x(const Tensor<T>&);                                             \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                Tensor<T>&, Tensor<T>&, const BatchNormOptions&);              \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> max_axis(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::int64_t>&);          \
  template Tensor<T> pick(const Tensor<T>&, const std::vector<std::int64_t>&);

IKD_OPS_INSTANTIATE(float)
IKD_OPS_INSTANTIATE(double)

#undef IKD_OPS_INSTANTIATE

}  // namespace ikd::ops
