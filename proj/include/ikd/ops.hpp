#pragma once

#include <cstdint>
#include <vector>

#include "ikd/tensor.hpp"

// Primitive table. Every primitive checks its shape rule, throws
// ContractError naming both shapes on mismatch, and NumericFault on a
// non-finite result.
//
//   add, sub, mul, div     a:S, b:S                     -> S
//   scale, add_scalar      a:S                          -> S
//   add_bias               x:S, b:[S[axis]]             -> S
//   mul_channel            x:[C,...], g:[1,...]         -> [C,...]
//   matmul                 a:[m,k], b:[k,n]             -> [m,n]
//   transpose              a:[m,n]                      -> [n,m]
//   reshape                a:S                          -> S' (same numel)
//   concat                 xs:[..,d_i,..] along axis    -> [..,sum d_i,..]
//   slice                  x along axis [begin,end)     -> [..,end-begin,..]
//   conv2d                 x:[C,H,W], w:[O,C,k,k], b:[O] -> [O,H,W] (k odd, zero same-padding)
//   max_pool2              x:[C,H,W] (H,W even)         -> [C,H/2,W/2]
//   max_pool3              x:[C,H,W]                    -> [C,H,W] (3x3, stride 1, border ignored)
//   upsample2x             x:[C,H,W]                    -> [C,2H,2W] bilinear, half-pixel centres
//   batch_norm             x:S, channel axis a          -> S
//   relu, sigmoid, log     a:S                          -> S
//   clamp_min              a:S                          -> S (gradient zero where clamped)
//   softmax                a:S over axis                -> S
//   mean_axis, max_axis    a:S                          -> S with S[axis] = 1
//   sum_axis               a:S                          -> S without axis
//   sum, mean              a:S                          -> [1]
//   gather_rows            x:[N,D], idx:M               -> [M,D]
//   pick                   x:[M,C], cols:M              -> [M]

namespace ikd::ops {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, std::size_t axis);
template <typename T> Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& gate);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias);
template <typename T> Tensor<T> max_pool2(const Tensor<T>& x);
template <typename T> Tensor<T> max_pool3(const Tensor<T>& x);
template <typename T> Tensor<T> upsample2x(const Tensor<T>& x);

struct BatchNormOptions {
  std::size_t channel_axis = 0;
  bool train = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalizes each channel over every other axis. In train mode the batch
/// statistics are used and the running buffers are updated in place; in eval
/// mode the running buffers define a fixed per-channel affine map.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var,
                     const BatchNormOptions& options);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> clamp_min(const Tensor<T>& a, T floor);
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);

template <typename T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> max_axis(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& index);
template <typename T>
Tensor<T> pick(const Tensor<T>& x, const std::vector<std::int64_t>& cols);

}  // namespace ikd::ops
