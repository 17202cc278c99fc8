#include "ikd/layers.hpp"

namespace ikd {

template <typename T>
void ParameterStore<T>::check_new(const std::string& name) const {
  if (params_.count(name) || buffers_.count(name))
    throw ContractError("parameter name '" + name + "' registered twice");
}

template <typename T>
Tensor<T> ParameterStore<T>::param(const std::string& name, const Shape& shape,
                                   InitScheme scheme) {
  check_new(name);
  auto t = parameter_init<T>(shape, scheme, mix_seed(seed_, name), true);
  params_.emplace(name, t);
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::buffer(const std::string& name, const Shape& shape,
                                    InitScheme scheme) {
  check_new(name);
  auto t = parameter_init<T>(shape, scheme, mix_seed(seed_, name), false);
  buffers_.emplace(name, t);
  return t;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [name, t] : params_) {
    auto copy = t;
    copy.zero_grad();
  }
}

template <typename T>
NamedTensors ParameterStore<T>::export_tensors() const {
  std::map<std::string, const Tensor<T>*> all;
  for (const auto& [n, t] : params_) all.emplace(n, &t);
  for (const auto& [n, t] : buffers_) all.emplace(n, &t);
  NamedTensors out;
  for (const auto& [name, t] : all) {
    std::vector<float> v(t->data().begin(), t->data().end());
    out.emplace_back(name, Tensor<float>(t->shape(), std::move(v)));
  }
  return out;
}

template <typename T>
void ParameterStore<T>::import_tensors(const NamedTensors& tensors) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [n, t] : tensors) by_name.emplace(n, &t);
  auto load = [&](std::map<std::string, Tensor<T>>& dst) {
    for (auto& [name, t] : dst) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
      if (it->second->shape() != t.shape())
        throw FormatError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(it->second->shape()) + ", model expects " +
                          shape_str(t.shape()));
      auto dstv = t.mutable_data();
      auto srcv = it->second->data();
      for (std::size_t i = 0; i < dstv.size(); ++i) dstv[i] = static_cast<T>(srcv[i]);
    }
  };
  load(params_);
  load(buffers_);
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, std::size_t in,
                  std::size_t out, bool with_bias)
    : weight(store.param(name + ".w", {in, out}, InitScheme::FanUniform)) {
  if (with_bias) bias = store.param(name + ".b", {out}, InitScheme::Zeros);
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  auto y = ops::matmul(x, weight);
  return bias.defined() ? ops::add_bias(y, bias, 1) : y;
}

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, const std::string& name, std::size_t in,
                  std::size_t out, std::size_t kernel, bool with_bias)
    : weight(store.param(name + ".w", {out, in, kernel, kernel}, InitScheme::FanUniform)) {
  if (with_bias) bias = store.param(name + ".b", {out}, InitScheme::Zeros);
}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, bias.defined() ? &bias : nullptr);
}

template <typename T>
BatchNorm<T>::BatchNorm(ParameterStore<T>& store, const std::string& name, std::size_t channels,
                        std::size_t axis)
    : gamma(store.param(name + ".gamma", {channels}, InitScheme::Ones)),
      beta(store.param(name + ".beta", {channels}, InitScheme::Zeros)),
      running_mean(store.buffer(name + ".running_mean", {channels}, InitScheme::Zeros)),
      running_var(store.buffer(name + ".running_var", {channels}, InitScheme::Ones)),
      channel_axis(axis) {}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, Mode mode) {
  ops::BatchNormOptions opt;
  opt.channel_axis = channel_axis;
  opt.train = mode == Mode::Train;
  opt.momentum = kBatchNormMomentum;
  opt.eps = kBatchNormEps;
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, opt);
}

template <typename T>
SharedMlp<T>::SharedMlp(ParameterStore<T>& store, const std::string& name, std::size_t in,
                        std::size_t out, bool act)
    : linear(store, name + ".fc", in, out, false), bn(store, name + ".bn", out, 1), activation(act) {}

template <typename T>
Tensor<T> SharedMlp<T>::operator()(const Tensor<T>& x, Mode mode) {
  auto y = bn(linear(x), mode);
  return activation ? ops::relu(y) : y;
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(ParameterStore<T>& store, const std::string& name, std::size_t in,
                          std::size_t out, std::size_t kernel, bool act)
    : conv(store, name + ".conv", in, out, kernel, false),
      bn(store, name + ".bn", out, 0),
      activation(act) {}

template <typename T>
Tensor<T> ConvBnRelu<T>::operator()(const Tensor<T>& x, Mode mode) {
  auto y = bn(conv(x), mode);
  return activation ? ops::relu(y) : y;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;
template struct SharedMlp<float>;
template struct SharedMlp<double>;
template struct ConvBnRelu<float>;
template struct ConvBnRelu<double>;

}  // namespace ikd
