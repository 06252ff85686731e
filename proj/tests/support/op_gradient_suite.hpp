#pragma once

// Finite-difference sweep over every differentiable op, 20 random inputs
// each, in 64-bit mode.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"

namespace zerorf::testing {

struct OpGradientReport {
  std::string op;
  std::size_t trials = 0;
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;
};

namespace detail {

inline std::vector<double> random_coords(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> dist(-0.05, 1.05);
  std::vector<double> c(n);
  for (auto& x : c) x = dist(rng);
  return c;
}

// Values bounded away from zero, for division and relu kinks.
inline Tensor<double> away_from_zero(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> mag(0.2, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

}  // namespace detail

inline std::vector<OpGradientReport> run_op_gradient_suite(std::uint64_t seed = 7, std::size_t trials = 20) {
  using T = Tensor<double>;
  using detail::away_from_zero;
  using detail::random_coords;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> small(1, 4);
  std::uniform_int_distribution<std::size_t> medium(2, 5);

  // Each case builds fresh random leaves and returns (loss closure, leaves).
  struct Case {
    std::string name;
    std::function<std::pair<std::function<T()>, std::vector<T>>(std::mt19937_64&, std::uint64_t)> make;
  };
  std::vector<Case> cases;
  auto shape2 = [&](std::mt19937_64& r) { return Shape{small(r), small(r)}; };

  cases.push_back({"add", [&](auto& r, auto s) {
                     auto shape = shape2(r);
                     auto a = random_tensor(r, shape), b = random_tensor(r, shape);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::add(a, b), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"sub", [&](auto& r, auto s) {
                     auto shape = shape2(r);
                     auto a = random_tensor(r, shape), b = random_tensor(r, shape);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::sub(a, b), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"mul", [&](auto& r, auto s) {
                     auto shape = shape2(r);
                     auto a = random_tensor(r, shape), b = random_tensor(r, shape);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::mul(a, b), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"div", [&](auto& r, auto s) {
                     auto shape = shape2(r);
                     auto a = random_tensor(r, shape), b = away_from_zero(r, shape);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::div(a, b), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"scale", [&](auto& r, auto s) {
                     auto a = random_tensor(r, shape2(r));
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::scale(a, -1.7), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"exp", [&](auto& r, auto s) {
                     auto a = random_tensor(r, shape2(r));
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::exp(a), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"sigmoid", [&](auto& r, auto s) {
                     auto a = random_tensor(r, shape2(r), -3.0, 3.0);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::sigmoid(a), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"silu", [&](auto& r, auto s) {
                     auto a = random_tensor(r, shape2(r), -3.0, 3.0);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::silu(a), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"relu", [&](auto& r, auto s) {
                     auto a = away_from_zero(r, shape2(r));
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::relu(a), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"sum", [&](auto& r, auto) {
                     auto a = random_tensor(r, shape2(r));
                     return std::pair{std::function<T()>([=] { return ops::scale(ops::sum(a), 0.7); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"mean", [&](auto& r, auto) {
                     auto a = random_tensor(r, shape2(r));
                     return std::pair{std::function<T()>([=] { return ops::scale(ops::mean(a), 0.7); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"matmul", [&](auto& r, auto s) {
                     const auto m = small(r), k = small(r), n = small(r);
                     auto a = random_tensor(r, {m, k}), b = random_tensor(r, {k, n});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::matmul(a, b), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"affine", [&](auto& r, auto s) {
                     const auto m = small(r), k = small(r), n = small(r);
                     auto a = random_tensor(r, {m, k}), w = random_tensor(r, {k, n}), b = random_tensor(r, {n});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::affine(a, w, b), s); }),
                                      std::vector<T>{a, w, b}};
                   }});
  cases.push_back({"broadcast", [&](auto& r, auto s) {
                     const auto m = small(r), n = small(r);
                     auto a = random_tensor(r, {m, 1});
                     auto b = random_tensor(r, {n});
                     return std::pair{std::function<T()>([=] {
                                        return ops::add(weighted_sum(ops::broadcast(a, {3, m, n}), s),
                                                        weighted_sum(ops::broadcast(b, {m, n}), s + 1));
                                      }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"reshape", [&](auto& r, auto s) {
                     const auto m = small(r), n = small(r);
                     auto a = random_tensor(r, {m, n});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::reshape(a, {n * m}), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"concat", [&](auto& r, auto s) {
                     const auto m = small(r), n = small(r), k = small(r);
                     auto a = random_tensor(r, {m, n}), b = random_tensor(r, {m, k});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::concat<double>({a, b}, 1), s); }),
                                      std::vector<T>{a, b}};
                   }});
  cases.push_back({"index_gather", [&](auto& r, auto s) {
                     const auto m = medium(r), n = small(r);
                     auto a = random_tensor(r, {m, n});
                     std::uniform_int_distribution<std::size_t> pick(0, m - 1);
                     std::vector<std::size_t> idx(7);
                     for (auto& i : idx) i = pick(r);
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::index_gather<double>(a, idx), s); }),
                                      std::vector<T>{a}};
                   }});
  cases.push_back({"conv1d", [&](auto& r, auto s) {
                     const auto cin = small(r), cout = small(r), len = medium(r) + 2;
                     auto x = random_tensor(r, {cin, len}), w = random_tensor(r, {cout, cin, 3}),
                          b = random_tensor(r, {cout});
                     ops::ConvOptions opt{1, s % 2 ? ops::PadMode::kReplicate : ops::PadMode::kZero};
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::conv1d(x, w, b, opt), s); }),
                                      std::vector<T>{x, w, b}};
                   }});
  cases.push_back({"conv2d", [&](auto& r, auto s) {
                     const auto cin = small(r), cout = small(r), h = medium(r), wd = medium(r);
                     auto x = random_tensor(r, {cin, h, wd}), w = random_tensor(r, {cout, cin, 3, 3}),
                          b = random_tensor(r, {cout});
                     ops::ConvOptions opt{1, s % 2 ? ops::PadMode::kReplicate : ops::PadMode::kZero};
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::conv2d(x, w, b, opt), s); }),
                                      std::vector<T>{x, w, b}};
                   }});
  cases.push_back({"upsample_nearest2x", [&](auto& r, auto s) {
                     auto x = s % 2 ? random_tensor(r, {small(r), medium(r)}) : random_tensor(r, {small(r), medium(r), medium(r)});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::upsample_nearest2x(x), s); }),
                                      std::vector<T>{x}};
                   }});
  cases.push_back({"upsample_linear2x", [&](auto& r, auto s) {
                     auto x = s % 2 ? random_tensor(r, {small(r), medium(r)}) : random_tensor(r, {small(r), medium(r), medium(r)});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::upsample_linear2x(x), s); }),
                                      std::vector<T>{x}};
                   }});
  cases.push_back({"group_norm", [&](auto& r, auto s) {
                     const std::size_t groups = small(r) % 3 + 1;
                     const std::size_t c = groups * (small(r) % 2 + 1);
                     auto x = random_tensor(r, {c, medium(r), medium(r)}), g = random_tensor(r, {c}, 0.5, 1.5),
                          b = random_tensor(r, {c});
                     return std::pair{std::function<T()>([=] { return weighted_sum(ops::group_norm(x, g, b, groups), s); }),
                                      std::vector<T>{x, g, b}};
                   }});
  cases.push_back({"linear_interp_1d", [&](auto& r, auto s) {
                     auto grid = random_tensor(r, {small(r), medium(r)});
                     auto coords = random_coords(r, 9);
                     return std::pair{std::function<T()>([=] {
                                        return weighted_sum(ops::linear_interp_1d<double>(grid, coords), s);
                                      }),
                                      std::vector<T>{grid}};
                   }});
  cases.push_back({"bilinear_interp_2d", [&](auto& r, auto s) {
                     auto grid = random_tensor(r, {small(r), medium(r), medium(r)});
                     auto coords = random_coords(r, 18);
                     return std::pair{std::function<T()>([=] {
                                        return weighted_sum(ops::bilinear_interp_2d<double>(grid, coords), s);
                                      }),
                                      std::vector<T>{grid}};
                   }});

  std::vector<OpGradientReport> reports;
  for (const auto& c : cases) {
    OpGradientReport report;
    report.op = c.name;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      auto [loss, leaves] = c.make(rng, seed * 1000 + trial);
      auto result = gradcheck(loss, leaves);
      ++report.trials;
      report.worst_rel = std::max(report.worst_rel, result.worst_rel);
      if (!result.ok && report.ok) {
        report.ok = false;
        report.detail = "trial " + std::to_string(trial) + ": " + result.detail;
      }
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace zerorf::testing
