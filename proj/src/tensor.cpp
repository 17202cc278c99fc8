#include "ikd/tensor.hpp"

#include <atomic>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

namespace ikd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto e : shape)
    if (e == 0) throw ContractError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw ContractError("tensor shape " + shape_str(shape) + " does not match " +
                        std::to_string(data.size()) + " values");
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!impl_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
  return t;
}

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return active_slot<T>();
}

template <typename T>
Tape<T>::Tape() : id_(g_next_tape_id++) {}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  id_ = g_next_tape_id++;
}

template <typename T>
void Tape<T>::record(std::string op, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                     const std::shared_ptr<TensorImpl<T>>& output,
                     std::function<void(Node&)> backward) {
  for (const auto& in : inputs) {
    if (!in->is_leaf() && in->tape_id != id_)
      throw ContractError("primitive '" + op + "' consumes a tensor recorded on another tape");
  }
  output->tape_id = id_;
  output->node = static_cast<std::ptrdiff_t>(nodes_.size());
  output->requires_grad = true;
  nodes_.push_back(Node{std::move(op), std::move(inputs), output, std::move(backward)});
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_slot<T>()) {
  active_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_slot<T>() = previous_;
}

template <typename T>
void check_finite(std::string_view op, std::span<const T> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]))
      throw NumericFault(std::string(op), "non-finite value produced by primitive '" +
                                              std::string(op) + "' at element " +
                                              std::to_string(i));
  }
}

template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  const auto& li = loss.impl();
  if (li->is_leaf() || li->tape_id != tape.id())
    throw ContractError("backward: loss was not produced under this tape");

  li->ensure_grad()[0] += T(1);
  std::unordered_set<TensorImpl<T>*> leaves;
  for (auto i = li->node; i >= 0; --i) {
    auto& node = tape.nodes_[static_cast<std::size_t>(i)];
    if (node.output->grad.empty()) continue;
    node.backward(node);
    for (auto& in : node.inputs)
      if (in->is_leaf() && in->requires_grad) leaves.insert(in.get());
  }
  for (auto* leaf : leaves) check_finite<T>("backward", leaf->grad);
  // Intermediate gradients are only meaningful for the traversal just done.
  for (auto i = li->node; i >= 0; --i) tape.nodes_[static_cast<std::size_t>(i)].output->grad.clear();
}

template <typename T>
Tensor<T> make_result(std::string_view op, const std::vector<Tensor<T>>& inputs, Shape shape,
                      std::vector<T> data,
                      std::function<void(typename Tape<T>::Node&)> backward_fn) {
  check_finite<T>(op, data);
  Tensor<T> out(std::move(shape), std::move(data), false);
  Tape<T>* tape = active_tape<T>();
  if (!tape) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  impls.reserve(inputs.size());
  for (const auto& in : inputs) impls.push_back(in.impl());
  tape->record(std::string(op), std::move(impls), out.impl(), std::move(backward_fn));
  return out;
}

InitScheme parse_init_scheme(std::string_view name) {
  if (name == "fan-based-uniform" || name == "fan_uniform") return InitScheme::FanUniform;
  if (name == "zeros") return InitScheme::Zeros;
  if (name == "ones") return InitScheme::Ones;
  throw ContractError("unknown init scheme '" + std::string(name) + "'");
}

std::pair<double, double> fan_in_out(const Shape& shape) {
  if (shape.size() == 1) return {double(shape[0]), double(shape[0])};
  if (shape.size() == 2) return {double(shape[0]), double(shape[1])};
  if (shape.size() >= 3) {
    double receptive = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) receptive *= double(shape[i]);
    return {double(shape[1]) * receptive, double(shape[0]) * receptive};
  }
  return {1.0, 1.0};
}

double uniform01(std::uint64_t bits) {
  return double(bits >> 11) * (1.0 / 9007199254740992.0);
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt) {
  // FNV-1a over the salt folded into a splitmix64 finalizer.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL + h;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> parameter_init(const Shape& shape, InitScheme scheme, std::uint64_t seed,
                         bool requires_grad) {
  const auto n = shape_numel(shape);
  std::vector<T> values(n, T(0));
  switch (scheme) {
    case InitScheme::Zeros:
      break;
    case InitScheme::Ones:
      std::fill(values.begin(), values.end(), T(1));
      break;
    case InitScheme::FanUniform: {
      auto [fin, fout] = fan_in_out(shape);
      const double bound = std::sqrt(6.0 / (fin + fout));
      std::mt19937_64 rng(seed);
      for (auto& v : values) v = static_cast<T>((2.0 * uniform01(rng()) - 1.0) * bound);
      break;
    }
  }
  return Tensor<T>(shape, std::move(values), requires_grad);
}

#define IKD_INSTANTIATE(T)                                                                     \
  template class Tensor<T>;                                                                    \
  template class Tape<T>;                                                                      \
  template class TapeScope<T>;                                                                 \
  template class NoGradScope<T>;                                                               \
  template Tape<T>* active_tape<T>();                                                          \
  template void backward<T>(Tape<T>&, const Tensor<T>&);                                       \
  template void check_finite<T>(std::string_view, std::span<const T>);                         \
  template Tensor<T> make_result<T>(std::string_view, const std::vector<Tensor<T>>&, Shape,    \
                                    std::vector<T>,                                            \
                                    std::function<void(typename Tape<T>::Node&)>);             \
  template Tensor<T> parameter_init<T>(const Shape&, InitScheme, std::uint64_t, bool);

IKD_INSTANTIATE(float)
IKD_INSTANTIATE(double)

#undef IKD_INSTANTIATE

}  // namespace ikd
