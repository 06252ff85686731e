#include "zerorf/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace zerorf {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  for (auto extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  impl_->value.assign(shape_numel(shape), T(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->value = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("axis out of range for shape " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl_ ? impl_->value.size() : 0;
}

template <typename T>
std::span<T> Tensor<T>::values() {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->value;
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool enabled) {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  impl_->requires_grad = enabled;
  if (!enabled) impl_->grad.clear();
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  if (!impl_->requires_grad) throw std::logic_error("gradient requested for a tensor without grad");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), impl_->value, impl_->requires_grad);
  out.impl_->grad = impl_->grad;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->value, false);
}

template <typename T>
void Tape<T>::record(std::string_view op, BackwardFn fn) {
  nodes_.push_back(Node{std::string(op), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (nodes_.empty()) throw std::logic_error("backward called on an empty tape");
  if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any gradient-enabled tensor");
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  // Nodes hold their own references, so popping frees intermediates as the
  // sweep progresses.
  while (!nodes_.empty()) {
    Node node = std::move(nodes_.back());
    nodes_.pop_back();
    node.backward();
  }
}

namespace {
template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <typename T>
void Tape<T>::set_active(Tape* tape) {
  active_slot<T>() = tape;
}

template <typename T>
TapeScope<T>::TapeScope() : previous_(Tape<T>::active()) {
  Tape<T>::set_active(&tape_);
}

template <typename T>
TapeScope<T>::~TapeScope() {
  Tape<T>::set_active(previous_);
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(Tape<T>::active()) {
  Tape<T>::set_active(nullptr);
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  Tape<T>::set_active(previous_);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace zerorf
