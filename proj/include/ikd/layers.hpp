#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ikd/checkpoint.hpp"
#include "ikd/ops.hpp"
#include "ikd/tensor.hpp"

namespace ikd {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Owns every named parameter and buffer of a model. Each tensor's initial
/// values depend only on (seed, name), so adding or removing a module never
/// perturbs the initialization of the others.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> param(const std::string& name, const Shape& shape, InitScheme scheme);
  Tensor<T> buffer(const std::string& name, const Shape& shape, InitScheme scheme);

  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  void zero_grad();

  /// Parameters and buffers as float32, sorted by name.
  NamedTensors export_tensors() const;
  /// Copies matching names in; throws FormatError on a missing name or
  /// shape mismatch.
  void import_tensors(const NamedTensors& tensors);

 private:
  void check_new(const std::string& name) const;

  std::uint64_t seed_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
};

template <typename T>
struct Linear {
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         bool bias = true);
  /// x: [M, in] -> [M, out]
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when disabled
};

template <typename T>
struct Conv2d {
  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         std::size_t kernel, bool bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;
};

template <typename T>
struct BatchNorm {
  BatchNorm() = default;
  BatchNorm(ParameterStore<T>& store, const std::string& name, std::size_t channels,
            std::size_t channel_axis);
  Tensor<T> operator()(const Tensor<T>& x, Mode mode);

  Tensor<T> gamma, beta, running_mean, running_var;
  std::size_t channel_axis = 0;
};

/// Pointwise linear layer + batch norm + optional ReLU over rows of [M, in].
template <typename T>
struct SharedMlp {
  SharedMlp() = default;
  SharedMlp(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
            bool activation = true);
  Tensor<T> operator()(const Tensor<T>& x, Mode mode);

  Linear<T> linear;
  BatchNorm<T> bn;
  bool activation = true;
};

/// Convolution + batch norm + optional ReLU over [C, H, W].
template <typename T>
struct ConvBnRelu {
  ConvBnRelu() = default;
  ConvBnRelu(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
             std::size_t kernel, bool activation = true);
  Tensor<T> operator()(const Tensor<T>& x, Mode mode);

  Conv2d<T> conv;
  BatchNorm<T> bn;
  bool activation = true;
};

}  // namespace ikd
