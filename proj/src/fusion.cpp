#include "ikd/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace ikd {

namespace {

template <typename T>
void same_spatial(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ContractError(std::string(op) + ": spatial mismatch between " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
GkgGate<T>::GkgGate(ParameterStore<T>& store, const std::string& name)
    : conv(store, name + ".conv", 2, 1, 7, true), bn(store, name + ".bn", 1, 0) {}

template <typename T>
Tensor<T> GkgGate<T>::attention(const Tensor<T>& x_pc, Mode mode) {
  if (x_pc.rank() != 3)
    throw ContractError("gkg: expects [C,H,W], got " + shape_str(x_pc.shape()));
  auto stacked = ops::concat<T>({ops::mean_axis(x_pc, 0), ops::max_axis(x_pc, 0)}, 0);
  return ops::sigmoid(ops::relu(bn(conv(stacked), mode)));
}

template <typename T>
Tensor<T> gkg_apply(const Tensor<T>& f_global, const Tensor<T>& x_img, const Tensor<T>& x_pc) {
  same_spatial("gkg_apply", f_global, x_img);
  same_spatial("gkg_apply", x_img, x_pc);
  if (f_global.dim(0) != 1)
    throw ContractError("gkg_apply: gate must have one channel, got " +
                        shape_str(f_global.shape()));
  return ops::concat<T>({ops::mul_channel(x_img, f_global), x_pc}, 0);
}

std::size_t ckg_reduced_width(std::size_t channels) {
  return std::min(channels, std::max<std::size_t>(8, channels / 4));
}

template <typename T>
Tensor<T> ckg_class_map(const Tensor<T>& p_coarse, const Tensor<T>& reduced) {
  same_spatial("ckg_class_map", p_coarse, reduced);
  const auto n = p_coarse.dim(0), hw = p_coarse.dim(1) * p_coarse.dim(2);
  const auto p = p_coarse.data();
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += static_cast<double>(p[c * hw + i]);
    if (std::abs(s - 1.0) > 1e-4)
      throw ContractError("ckg_class_map: class distribution at pixel " + std::to_string(i) +
                          " sums to " + std::to_string(s));
  }
  auto p2 = ops::reshape(p_coarse, Shape{n, hw});
  auto r2 = ops::reshape(reduced, Shape{reduced.dim(0), hw});
  return ops::softmax(ops::matmul(p2, ops::transpose(r2)), 1);
}

template <typename T>
Tensor<T> ckg_attend(const Tensor<T>& p_coarse, const Tensor<T>& f_class) {
  if (p_coarse.rank() != 3 || f_class.rank() != 2 || f_class.dim(0) != p_coarse.dim(0))
    throw ContractError("ckg_attend: incompatible shapes " + shape_str(p_coarse.shape()) +
                        " and " + shape_str(f_class.shape()));
  const auto n = p_coarse.dim(0), h = p_coarse.dim(1), w = p_coarse.dim(2);
  auto p2 = ops::reshape(p_coarse, Shape{n, h * w});
  auto fine = ops::matmul(ops::transpose(f_class), p2);  // [C', HW]
  return ops::reshape(fine, Shape{f_class.dim(1), h, w});
}

template <typename T>
CkgGate<T>::CkgGate(ParameterStore<T>& store, const std::string& name, std::size_t channels,
                    std::size_t out)
    : reduce(store, name + ".g", channels, ckg_reduced_width(channels), 1),
      fuse_conv(store, name + ".f", channels + ckg_reduced_width(channels), out, 1, true) {}

template <typename T>
Tensor<T> CkgGate<T>::fuse(const Tensor<T>& x_img, const Tensor<T>& f_fine) const {
  same_spatial("ckg_fuse", x_img, f_fine);
  return fuse_conv(ops::concat<T>({x_img, f_fine}, 0));
}

template <typename T>
CkgOutput<T> CkgGate<T>::operator()(const Tensor<T>& p_coarse, const Tensor<T>& x_img,
                                    Mode mode) {
  same_spatial("ckg", p_coarse, x_img);
  CkgOutput<T> out;
  out.f_class = ckg_class_map(p_coarse, reduce(x_img, mode));
  out.f_fine = ckg_attend(p_coarse, out.f_class);
  out.x_fine = fuse(x_img, out.f_fine);
  return out;
}

#define IKD_FUSION_INSTANTIATE(T)                                                        \
  template struct GkgGate<T>;                                                            \
  template Tensor<T> gkg_apply<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> ckg_class_map<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> ckg_attend<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template struct CkgGate<T>;

IKD_FUSION_INSTANTIATE(float)
IKD_FUSION_INSTANTIATE(double)

#undef IKD_FUSION_INSTANTIATE

}  // namespace ikd
