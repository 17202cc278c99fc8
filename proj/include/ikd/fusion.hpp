#pragma once

#include "ikd/layers.hpp"

namespace ikd {

/// Spatial gate computed from the point features: channel mean and max,
/// 7x7 conv, batch norm, ReLU, sigmoid. Output [1, H, W].
template <typename T>
struct GkgGate {
  GkgGate() = default;
  GkgGate(ParameterStore<T>& store, const std::string& name);

  Tensor<T> attention(const Tensor<T>& x_pc, Mode mode);

  Conv2d<T> conv;  // [1, 2, 7, 7] with bias
  BatchNorm<T> bn;
};

/// concat(F_global * X_img, X_pc) along channels.
template <typename T>
Tensor<T> gkg_apply(const Tensor<T>& f_global, const Tensor<T>& x_img, const Tensor<T>& x_pc);

/// Reduced width C' for a C-channel input: C/4, at least 8, never above C.
std::size_t ckg_reduced_width(std::size_t channels);

/// F_class = softmax_rows(P_coarse[N, HW] * reduced[C', HW]^T). Throws when a
/// pixel's class distribution deviates from 1 by more than 1e-4.
template <typename T>
Tensor<T> ckg_class_map(const Tensor<T>& p_coarse, const Tensor<T>& reduced);

/// F_fine = (P_coarse^T F_class)^T reshaped to [C', H, W].
template <typename T>
Tensor<T> ckg_attend(const Tensor<T>& p_coarse, const Tensor<T>& f_class);

template <typename T>
struct CkgOutput {
  Tensor<T> f_class;  // [N, C']
  Tensor<T> f_fine;   // [C', H, W]
  Tensor<T> x_fine;   // [C_out, H, W]
};

/// Class-center refinement head: g (1x1 conv, BN, ReLU) reduces X_img to C'
/// channels, f (1x1 conv with bias) maps concat(X_img, F_fine) to C_out.
template <typename T>
struct CkgGate {
  CkgGate() = default;
  CkgGate(ParameterStore<T>& store, const std::string& name, std::size_t channels,
          std::size_t out);

  CkgOutput<T> operator()(const Tensor<T>& p_coarse, const Tensor<T>& x_img, Mode mode);
  Tensor<T> fuse(const Tensor<T>& x_img, const Tensor<T>& f_fine) const;

  ConvBnRelu<T> reduce;
  Conv2d<T> fuse_conv;
};

}  // namespace ikd
