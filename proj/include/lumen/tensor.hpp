#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lumen/error.hpp"

namespace lumen {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;

  // Recorded graph edge. Cleared once backward has run through this node.
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward_fn;

  std::vector<float>& ensure_grad();
  bool is_leaf() const noexcept { return !backward_fn; }
};

}  // namespace detail

/// Dense row-major float32 tensor handle with optional reverse-mode gradient.
///
/// Copies share storage. Ops in `lumen/ops.hpp` record a backward closure on
/// their result whenever gradient mode is on and an input requires grad;
/// `backward()` on a scalar walks that graph once and then releases it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const;
  // Zero-filled on first read for tensors never reached by a backward pass.
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  void backward() const;

  // Same values, fresh storage, no graph.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

bool grad_enabled() noexcept;

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(TensorImpl&)>;

// Builds an op result and, when any input requires grad, attaches `fn`.
Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                   BackwardFn fn);
Tensor make_result(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                   BackwardFn fn);

// Gradient buffer of input `i` of a node, or nullptr when that input does not
// take gradients.
float* input_grad(TensorImpl& node, std::size_t i);

}  // namespace detail

}  // namespace lumen
