#include "lumen/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace lumen {

DimensionError::DimensionError(const std::string& op, const std::string& axis,
                               std::size_t expected, std::size_t actual)
    : Error(op + ": dimension mismatch on axis '" + axis + "' (expected " +
            std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
      axis_(axis) {}

DimensionError::DimensionError(const std::string& op, const std::string& axis,
                               const std::string& detail)
    : Error(op + ": invalid axis '" + axis + "': " + detail), axis_(axis) {}

ParseError::ParseError(const std::string& message, std::size_t location)
    : Error(message + " (at " + std::to_string(location) + ")"), location_(location) {}

ConfigError::ConfigError(const std::string& key, const std::string& message)
    : Error("config key '" + key + "': " + message), key_(key) {}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<float>& TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] == 0) throw DimensionError("tensor", std::to_string(i), "dimension must be positive");
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  check_shape(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  check_shape(shape);
  if (values.size() != shape_numel(shape))
    throw DimensionError("tensor", "data", shape_numel(shape), values.size());
  impl_->data = std::move(values);
  impl_->shape = std::move(shape);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{1}, std::vector<float>{value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("tensor", std::to_string(axis), "axis out of range for rank " +
                                                             std::to_string(s.size()));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<float> Tensor::data() {
  shape();
  return impl_->data;
}

std::span<const float> Tensor::data() const {
  shape();
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw Error("tensor: item() requires a single-element tensor, got " +
                                shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  shape();
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

std::span<const float> Tensor::grad() const {
  shape();
  return impl_->ensure_grad();
}

std::span<float> Tensor::mutable_grad() {
  shape();
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

void Tensor::backward() const {
  if (numel() != 1)
    throw Error("backward: loss must be a scalar, got shape " + shape_string(shape()));
  if (!impl_->requires_grad) throw Error("backward: loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf()) continue;
    node->ensure_grad();
    node->backward_fn(*node);
  }
  for (auto* node : order) {
    if (node->is_leaf()) continue;
    node->backward_fn = nullptr;
    node->inputs.clear();
    if (node != impl_.get()) std::vector<float>().swap(node->grad);
  }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

namespace {

template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<float> values, const Range& inputs,
                        BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  for (const auto& t : inputs) impl.inputs.push_back(t.impl());
  impl.backward_fn = std::move(fn);
  return out;
}

}  // namespace

Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                   BackwardFn fn) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(fn));
}

Tensor make_result(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                   BackwardFn fn) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(fn));
}

float* input_grad(TensorImpl& node, std::size_t i) {
  auto* in = node.inputs.at(i).get();
  if (!in || !in->requires_grad) return nullptr;
  return in->ensure_grad().data();
}

}  // namespace detail

}  // namespace lumen
