#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace zerorf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array that may take part in reverse-mode differentiation.
// Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<T> values();
  std::span<const T> values() const;
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool enabled);

  // Gradient storage is allocated on first accumulation.
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> grad_buffer() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Linear record of the differentiable operations executed in one step.
// Nodes are appended in execution order, so reverse order is a valid
// topological order for the backward sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view op, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and runs every node in reverse. The tape is
  // empty afterwards.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  static Tape* active();
  static void set_active(Tape* tape);

 private:
  struct Node {
    std::string op;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Makes a fresh tape active for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }
  void backward(const Tensor<T>& loss) { tape_.backward(loss); }

 private:
  Tape<T> tape_;
  Tape<T>* previous_;
};

// Disables recording for the lifetime of the scope.
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

}  // namespace zerorf
