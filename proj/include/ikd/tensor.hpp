#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ikd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when inputs violate a primitive's shape rule or an operation's
/// precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward or backward pass produces NaN or Inf.
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string primitive, const std::string& what)
      : std::runtime_error(what), primitive_(std::move(primitive)) {}
  const std::string& primitive() const noexcept { return primitive_; }

 private:
  std::string primitive_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Tape generation and node index of the producing record; node < 0 for leaves.
  std::uint64_t tape_id = 0;
  std::ptrdiff_t node = -1;

  bool is_leaf() const { return node < 0; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with optional participation in a gradient tape.
///
/// A Tensor is a handle: copies share storage, which is how parameters are
/// referenced from several places (modules, optimizer, checkpoint).
template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  T item() const;
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);

  /// Same values, fresh storage, cut from any tape.
  Tensor detach() const;
  /// Deep copy preserving requires_grad (but not tape membership).
  Tensor clone() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of primitive applications for reverse-mode differentiation.
template <typename T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void(Node&)> backward;
  };

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  void clear();

  /// Appends a node. Used by primitives; also the extension point for
  /// custom primitives in tests.
  void record(std::string op, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
              const std::shared_ptr<TensorImpl<T>>& output,
              std::function<void(Node&)> backward);

  template <typename U>
  friend void backward(Tape<U>& tape, const Tensor<U>& loss);

 private:
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// Installs a tape as the active recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread (restores on destruction).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reached from loss.
template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss);

/// Helper for primitive implementations: builds the output tensor and
/// records it when any input requires grad and a tape is active.
template <typename T>
Tensor<T> make_result(std::string_view op, const std::vector<Tensor<T>>& inputs, Shape shape,
                      std::vector<T> data, std::function<void(typename Tape<T>::Node&)> backward);

/// Throws NumericFault when any value is non-finite.
template <typename T>
void check_finite(std::string_view op, std::span<const T> values);

enum class InitScheme { FanUniform, Zeros, Ones };

InitScheme parse_init_scheme(std::string_view name);

/// Deterministic initialization. FanUniform draws from
/// U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))); fans follow
/// the layout convention of the layers: rank 2 is [in, out], rank 4 is
/// [out, in, kh, kw], rank 1 uses its extent for both.
template <typename T>
Tensor<T> parameter_init(const Shape& shape, InitScheme scheme, std::uint64_t seed,
                         bool requires_grad = true);

std::pair<double, double> fan_in_out(const Shape& shape);

/// Uniform double in [0, 1) built from 53 bits of a 64-bit engine draw, so
/// the sequence is identical across standard library implementations.
double uniform01(std::uint64_t bits);

std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt);

}  // namespace ikd
