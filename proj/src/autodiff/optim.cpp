#include "zerorf/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace zerorf {

double cosine_lr(std::uint64_t t, std::uint64_t total, double lr_start, double lr_end) {
  if (total == 0 || t >= total) return lr_end;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(phase));
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWConfig& config, double lr) {
  if (param.size() != m.size() || param.size() != v.size() || (!grad.empty() && grad.size() != param.size())) {
    throw std::invalid_argument("adamw_update: parameter, gradient and moment sizes differ");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("adamw_update: learning rate must be positive");
  if (step == 0) throw std::invalid_argument("adamw_update: step index is 1-based");
  const double b1 = config.beta1, b2 = config.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const double decay = lr * config.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
    const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / correction1;
    const double v_hat = vi / correction2;
    const double theta = static_cast<double>(param[i]);
    param[i] = static_cast<T>(theta - decay * theta - lr * m_hat / (std::sqrt(v_hat) + config.eps));
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParam<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) {
      throw std::invalid_argument("optimizer parameter '" + p.name + "' is not gradient-enabled");
    }
    state_.first_moment.emplace_back(p.tensor.numel(), T(0));
    state_.second_moment.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  const std::uint64_t next = state_.step + 1;
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name, next);
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    adamw_update<T>(t.values(), t.grad(), state_.first_moment[i], state_.second_moment[i], next, config_, lr);
  }
  state_.step = next;
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void AdamW<T>::set_state(OptimizerState<T> state) {
  if (state.first_moment.size() != params_.size() || state.second_moment.size() != params_.size()) {
    throw std::invalid_argument("optimizer state has " + std::to_string(state.first_moment.size()) +
                                " entries, expected " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (state.first_moment[i].size() != params_[i].tensor.numel() ||
        state.second_moment[i].size() != params_[i].tensor.numel()) {
      throw std::invalid_argument("optimizer state for '" + params_[i].name + "' has the wrong size");
    }
  }
  state_ = std::move(state);
}

template <typename T>
double AdamW<T>::max_abs_grad() const {
  double best = 0.0;
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) best = std::max(best, std::abs(static_cast<double>(g)));
  }
  return best;
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::uint64_t, const AdamWConfig&, double);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::uint64_t, const AdamWConfig&, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace zerorf
