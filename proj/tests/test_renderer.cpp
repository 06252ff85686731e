#include <doctest.h>

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "support/end_to_end.hpp"
#include "support/model_gradient_suite.hpp"
#include "support/gradcheck.hpp"
#include "zerorf/field.hpp"
#include "zerorf/generator.hpp"
#include "zerorf/ops.hpp"
#include "zerorf/renderer.hpp"

using namespace zerorf;
using namespace zerorf::testing;

namespace {

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Camera look_at(Vec3 eye, std::size_t w, std::size_t h, double fov) {
  // Camera -z towards the origin, +y roughly world z.
  Vec3 back = normalized(eye);
  Vec3 up{0, 0, 1};
  Vec3 right = normalized({up[1] * back[2] - up[2] * back[1], up[2] * back[0] - up[0] * back[2],
                           up[0] * back[1] - up[1] * back[0]});
  Vec3 cam_up{back[1] * right[2] - back[2] * right[1], back[2] * right[0] - back[0] * right[2],
              back[0] * right[1] - back[1] * right[0]};
  Camera c;
  c.width = w;
  c.height = h;
  c.focal = Camera::focal_from_fov(w, fov);
  c.pose = {right[0], cam_up[0], back[0], eye[0], right[1], cam_up[1], back[1], eye[1],
            right[2], cam_up[2], back[2], eye[2], 0, 0, 0, 1};
  return c;
}

// Analytic scene: a soft-edged ball of radius 0.5 colored by position.
double ball_density(double x, double y, double z) {
  const double d = std::max(0.0, std::sqrt(x * x + y * y + z * z) - 0.5);
  return 40.0 * std::exp(-d * d / 0.005);
}

SampleFn<double> ball_sample_fn() {
  return [](std::span<const double> pos, std::span<const std::size_t>, std::span<const Vec3>) {
    const std::size_t p = pos.size() / 3;
    DecodedSamples<double> out{Tensor<double>(Shape{p, 1}), Tensor<double>(Shape{p, 3})};
    for (std::size_t i = 0; i < p; ++i) {
      out.sigma.values()[i] = ball_density(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
      for (int c = 0; c < 3; ++c) out.rgb.values()[3 * i + c] = 0.5 + 0.4 * std::tanh(pos[3 * i + c]);
    }
    return out;
  };
}

DensityFn<double> ball_density_fn() {
  return [](std::span<const double> pos) {
    std::vector<double> s(pos.size() / 3);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = ball_density(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
    return s;
  };
}

double psnr(const std::vector<float>& a, const std::vector<float>& b) {
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += std::pow(double(a[i]) - double(b[i]), 2);
  mse /= a.size();
  return mse < 1e-10 ? 99.0 : -10.0 * std::log10(mse);
}

}  // namespace

TEST_CASE("camera conventions") {
  CHECK(Camera::focal_from_fov(100, std::numbers::pi / 2) == doctest::Approx(50.0));
  Camera cam;
  cam.width = 3;
  cam.height = 3;
  cam.focal = 2.0;
  std::vector<std::size_t> px{4, 0, 8};
  auto rays = generate_rays(cam, px);
  CHECK(rays[0].direction[0] == doctest::Approx(0.0));
  CHECK(rays[0].direction[1] == doctest::Approx(0.0));
  CHECK(rays[0].direction[2] == doctest::Approx(-1.0));
  for (std::size_t i : {1u, 2u}) {
    const double x = static_cast<double>(px[i] % 3), y = static_cast<double>(px[i] / 3);
    Vec3 expect = normalized({(x + 0.5 - 1.5) / 2.0, -(y + 0.5 - 1.5) / 2.0, -1.0});
    for (int a = 0; a < 3; ++a) CHECK(rays[i].direction[a] == doctest::Approx(expect[a]));
  }
  std::vector<std::size_t> bad{9};
  CHECK_THROWS(generate_rays(cam, bad));
  cam.pose[0] = 2.0;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
}

TEST_CASE("look-at camera rays are rotated and unit length") {
  auto cam = look_at({0, -4, 1}, 8, 6, 0.7);
  cam.validate();
  std::vector<std::size_t> px(48);
  for (std::size_t i = 0; i < 48; ++i) px[i] = i;
  for (const auto& r : generate_rays(cam, px)) {
    CHECK(std::hypot(r.direction[0], r.direction[1], r.direction[2]) == doctest::Approx(1.0));
    CHECK(r.direction[1] > 0.0);
  }
}

TEST_CASE("aabb intersection examples") {
  auto box = Aabb::cube(1.0);
  auto hit = intersect_aabb({{0, 0, 3}, {0, 0, -1}}, box);
  REQUIRE(hit);
  CHECK(hit->t_near == doctest::Approx(2.0));
  CHECK(hit->t_far == doctest::Approx(4.0));
  CHECK_FALSE(intersect_aabb({{0, 2, 3}, {0, 0, -1}}, box));
  CHECK_FALSE(intersect_aabb({{0, 0, 3}, {0, 0, 1}}, box));
  auto inside = intersect_aabb({{0, 0, 0}, {1, 0, 0}}, box);
  REQUIRE(inside);
  CHECK(inside->t_near == 0.0);
  CHECK(inside->t_far == doctest::Approx(1.0));
}

TEST_CASE("aabb intersection agrees with a dense containment scan") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  std::normal_distribution<double> n;
  auto box = Aabb::cube(1.5);
  const double t_max = 12.0;
  const int steps = 10000;
  const double step = t_max / steps;
  int hits = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Ray r{{u(rng), u(rng), u(rng)}, normalized({n(rng), n(rng), n(rng)})};
    double first = -1.0, last = -1.0;
    for (int i = 0; i <= steps; ++i) {
      const double t = i * step;
      bool in = true;
      for (int a = 0; a < 3; ++a) in = in && std::abs(r.origin[a] + t * r.direction[a]) <= 1.5;
      if (in) {
        if (first < 0) first = t;
        last = t;
      }
    }
    auto hit = intersect_aabb(r, box);
    if (first < 0) {
      // The scan can miss chords shorter than a step.
      if (hit) CHECK(hit->t_far - hit->t_near < step);
      continue;
    }
    ++hits;
    REQUIRE(hit);
    CHECK(std::abs(hit->t_near - first) <= step);
    CHECK(std::abs(hit->t_far - last) <= step);
  }
  CHECK(hits > 100);
}

TEST_CASE("uniform midpoint samples") {
  Ray r{{0, 0, 0}, {1, 0, 0}};
  auto s4 = sample_uniform(r, {0.0, 1.0}, 4);
  std::vector<double> expect{0.125, 0.375, 0.625, 0.875};
  for (int i = 0; i < 4; ++i) {
    CHECK(s4.t[i] == doctest::Approx(expect[i]));
    CHECK(s4.deltas[i] == doctest::Approx(0.25));
    CHECK(s4.positions[i][0] == doctest::Approx(expect[i]));
  }
  auto s1 = sample_uniform(r, {2.0, 5.0}, 1);
  CHECK(s1.t[0] == doctest::Approx(3.5));
  CHECK(s1.deltas[0] == doctest::Approx(3.0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 5);
  for (int i = 0; i < 50; ++i) {
    const double a = u(rng), b = a + u(rng) + 1e-3;
    auto s = sample_uniform(r, {a, b}, 1 + i);
    double sum = 0.0;
    for (double d : s.deltas) sum += d;
    CHECK(sum == doctest::Approx(b - a));
  }
  CHECK_THROWS_AS(sample_uniform(r, {0, 1}, 0), std::invalid_argument);
}

TEST_CASE("composite examples") {
  Vec3 bg{0.2, 0.4, 0.6};
  std::vector<double> sig0(5, 0.0), rgb0(15, 0.7), d0(5, 0.1);
  auto empty = composite(sig0, rgb0, d0, bg);
  for (int c = 0; c < 3; ++c) CHECK(empty.rgb[c] == doctest::Approx(bg[c]));
  for (double t : empty.transmittance) CHECK(t == 1.0);

  std::vector<double> sig{1, 1}, rgb{1, 0, 0, 0, 1, 0}, d{std::log(2.0), std::log(2.0)};
  auto two = composite(sig, rgb, d, bg);
  CHECK(two.weights[0] == doctest::Approx(0.5));
  CHECK(two.weights[1] == doctest::Approx(0.25));
  for (int c = 0; c < 3; ++c) CHECK(two.rgb[c] == doctest::Approx(0.5 * rgb[c] + 0.25 * rgb[3 + c] + 0.25 * bg[c]));

  std::vector<double> opaque{500, 1}, dd{0.1, 0.1}, cc{0.3, 0.6, 0.9, 1, 1, 1};
  auto front = composite(opaque, cc, dd, bg);
  for (int c = 0; c < 3; ++c) CHECK(std::abs(front.rgb[c] - cc[c]) < 1e-9);
}

TEST_CASE("compositing properties on random rays") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::exponential_distribution<double> e(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 40;
    std::vector<double> sig(n), rgb(3 * n), d(n);
    for (auto& s : sig) s = e(rng);
    for (auto& c : rgb) c = u(rng);
    for (auto& x : d) x = 0.01 + u(rng);
    Vec3 bg{u(rng), u(rng), u(rng)};
    auto r = composite(sig, rgb, d, bg);
    double total = r.transmittance[n];
    for (std::size_t i = 0; i < n; ++i) {
      total += r.weights[i];
      CHECK(r.weights[i] >= 0.0);
      CHECK(r.weights[i] <= 1.0);
      CHECK(r.transmittance[i + 1] <= r.transmittance[i]);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
    const double a = 0.1 + 3 * u(rng);
    std::vector<double> scaled(rgb);
    for (auto& c : scaled) c *= a;
    auto rs = composite(sig, scaled, d, {a * bg[0], a * bg[1], a * bg[2]});
    for (int c = 0; c < 3; ++c) CHECK(rs.rgb[c] == doctest::Approx(a * r.rgb[c]).epsilon(1e-12));
  }
}

TEST_CASE("packed compositing matches the reference and its gradient") {
  std::mt19937_64 rng(7);
  std::vector<std::size_t> offsets{0, 3, 3, 8, 9};
  const std::size_t p = 9;
  auto sigma = random_tensor(rng, {p, 1}, 0.0, 3.0);
  auto rgb = random_tensor(rng, {p, 3}, 0.0, 1.0);
  std::vector<double> d(p);
  std::uniform_real_distribution<double> u(0.05, 0.5);
  for (auto& x : d) x = u(rng);
  Vec3 bg{1, 1, 1};
  auto out = composite_rays<double>(sigma, rgb, d, offsets, bg);
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    const std::size_t a = offsets[r], b = offsets[r + 1];
    auto ref = composite(std::span<const double>(sigma.values().data() + a, b - a),
                         std::span<const double>(rgb.values().data() + 3 * a, 3 * (b - a)),
                         std::span<const double>(d.data() + a, b - a), bg);
    for (int c = 0; c < 3; ++c) CHECK(out.values()[3 * r + c] == doctest::Approx(ref.rgb[c]).epsilon(1e-13));
  }
  auto result = gradcheck([&] { return weighted_sum(composite_rays<double>(sigma, rgb, d, offsets, bg), 2); },
                          {sigma, rgb});
  INFO(result.detail);
  CHECK(result.ok);
  std::vector<std::size_t> bad{0, 3};
  CHECK_THROWS_AS(composite_rays<double>(sigma, rgb, d, bad, bg), std::invalid_argument);
}

TEST_CASE("render loss examples") {
  Tensor<double> pred(Shape{1, 3}, {0.6, 0.2, 0.3}, true);
  Tensor<double> target(Shape{1, 3}, {0.5, 0.2, 0.3});
  CHECK(render_loss(pred, target).item() == doctest::Approx(0.01));
  CHECK(render_loss(target, target).item() == 0.0);
  std::mt19937_64 rng(9);
  auto p = random_tensor(rng, {4, 3}, 0, 1);
  auto t = random_tensor(rng, {4, 3}, 0, 1, false);
  {
    TapeScope<double> scope;
    scope.backward(render_loss(p, t));
  }
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(p.grad()[i] == doctest::Approx(2.0 * (p.values()[i] - t.values()[i]) / 4.0));
  }
  p.zero_grad();
  auto result = gradcheck([&] { return render_loss(p, t); }, {p});
  CHECK(result.ok);
  CHECK_THROWS_AS(render_loss(p, Tensor<double>(Shape{3, 3})), std::invalid_argument);
}

TEST_CASE("occupancy of an empty field prunes everything") {
  auto grid = OccupancyGrid::full(16, 1.5);
  DensityFn<double> zero = [](std::span<const double> pts) { return std::vector<double>(pts.size() / 3, 0.0); };
  update_occupancy<double>(grid, zero, 1, 0.05);
  CHECK(grid.occupied_count() == 0);

  auto cam = look_at({0, -4, 0.5}, 48, 48, 0.8);
  RenderOptions opt;
  opt.samples_per_ray = 256;
  SampleFn<double> fn = [](std::span<const double> pos, std::span<const std::size_t>, std::span<const Vec3>) {
    const std::size_t p = pos.size() / 3;
    DecodedSamples<double> out{Tensor<double>(Shape{p, 1}), Tensor<double>(Shape{p, 3})};
    return out;
  };
  auto timed = [&](const OccupancyGrid* g) {
    opt.occupancy = g;
    auto t0 = std::chrono::steady_clock::now();
    auto img = render_image<double>(cam, fn, opt);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  const double full_time = timed(nullptr);
  const double pruned_time = timed(&grid);
  MESSAGE("unpruned " << full_time << " s, pruned " << pruned_time << " s");
  CHECK(pruned_time < full_time);
  std::vector<std::size_t> px{48 * 24 + 24};
  opt.occupancy = &grid;
  CHECK(render_rays<double>(generate_rays(cam, px), fn, opt).samples_evaluated == 0);
}

TEST_CASE("zero threshold prunes nothing") {
  auto grid = OccupancyGrid::full(8, 1.5);
  update_occupancy<double>(grid, ball_density_fn(), 2, 0.0);
  CHECK(grid.occupied_count() == 512);
}

TEST_CASE("pruned and unpruned renders of a ball agree") {
  RenderOptions opt;
  opt.samples_per_ray = 128;
  auto grid = OccupancyGrid::full(32, 1.5);
  const double step = 3.0 / opt.samples_per_ray;
  update_occupancy<double>(grid, ball_density_fn(), 3, occupancy_threshold(step));
  CHECK(grid.occupied_count() > 0);
  CHECK(grid.occupied_count() < grid.occupied.size() / 4);
  auto cam = look_at({3, -2.5, 1.5}, 64, 64, 0.7);
  auto full = render_image<double>(cam, ball_sample_fn(), opt);
  opt.occupancy = &grid;
  auto pruned = render_image<double>(cam, ball_sample_fn(), opt);
  const double db = psnr(full, pruned);
  MESSAGE("pruned vs unpruned PSNR " << db);
  CHECK(db > 50.0);
  opt.early_termination = true;
  auto culled = render_image<double>(cam, ball_sample_fn(), opt, 4096, ball_density_fn());
  CHECK(psnr(full, culled) > 50.0);
}

TEST_CASE("rays that miss the box render the background") {
  RenderOptions opt;
  opt.background = {0.0, 0.0, 0.0};
  std::vector<Ray> rays{{{0, 0, 5}, {0, 0, 1}}};
  auto out = render_rays<double>(rays, ball_sample_fn(), opt);
  for (double v : out.rgb.values()) CHECK(v == 0.0);
  CHECK(out.samples_evaluated == 0);
}

TEST_CASE("end-to-end gradient from loss to generator parameters") {
  const auto result = end_to_end_gradcheck();
  INFO(result.detail);
  MESSAGE("end-to-end worst relative error " << result.worst_rel << " over " << result.checked << " entries");
  CHECK(result.ok);
  CHECK(result.checked > 500);
}

TEST_CASE("model-level operations match finite differences") {
  for (const auto& report : run_model_gradient_suite(17, 2)) {
    INFO(report.op << ": " << report.detail);
    CHECK(report.ok);
  }
}
