#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "zerorf/tensor.hpp"

namespace zerorf {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.2;
};

// Cosine decay from lr_start at t=0 to lr_end at t=total; t > total clamps
// to lr_end.
double cosine_lr(std::uint64_t t, std::uint64_t total, double lr_start = 0.002, double lr_end = 0.001);

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param, std::uint64_t step)
      : std::runtime_error("non-finite gradient in '" + param + "' at optimizer step " + std::to_string(step)),
        param_(param),
        step_(step) {}
  const std::string& param() const { return param_; }
  std::uint64_t step() const { return step_; }

 private:
  std::string param_;
  std::uint64_t step_;
};

// One decoupled-weight-decay Adam update of a single tensor, `step` being
// the 1-based index of this update:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWConfig& config, double lr);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWConfig config = {});

  // Updates every parameter from its accumulated gradient (a parameter that
  // received no gradient is treated as g = 0). Gradients are checked first;
  // on a non-finite value nothing is modified and NonFiniteGradient is thrown.
  void step(double lr);
  void zero_grad();

  const std::vector<NamedParam<T>>& params() const { return params_; }
  const OptimizerState<T>& state() const { return state_; }
  void set_state(OptimizerState<T> state);
  const AdamWConfig& config() const { return config_; }

  // Largest |g| over all parameters; 0 when no gradients exist.
  double max_abs_grad() const;

 private:
  std::vector<NamedParam<T>> params_;
  AdamWConfig config_;
  OptimizerState<T> state_;
};

}  // namespace zerorf
