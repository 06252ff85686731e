#include "zerorf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "zerorf/ops.hpp"

namespace zerorf {

double Camera::focal_from_fov(std::size_t width, double camera_angle_x) {
  return 0.5 * static_cast<double>(width) / std::tan(0.5 * camera_angle_x);
}

void Camera::validate() const {
  if (!(focal > 0.0)) throw std::invalid_argument("camera: focal must be positive");
  if (width == 0 || height == 0) throw std::invalid_argument("camera: empty image");
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      double dot = 0.0;
      for (int r = 0; r < 3; ++r) dot += pose[4 * r + a] * pose[4 * r + b];
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-4) {
        throw std::invalid_argument("camera: pose rotation is not orthonormal");
      }
    }
  }
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const std::size_t> pixels) {
  const std::size_t n_pix = camera.width * camera.height;
  const double cx = 0.5 * static_cast<double>(camera.width), cy = 0.5 * static_cast<double>(camera.height);
  const auto& m = camera.pose;
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (std::size_t idx : pixels) {
    if (idx >= n_pix) throw std::out_of_range("generate_rays: pixel index " + std::to_string(idx) + " out of range");
    const double x = static_cast<double>(idx % camera.width) + 0.5;
    const double y = static_cast<double>(idx / camera.width) + 0.5;
    const Vec3 d_cam{(x - cx) / camera.focal, -(y - cy) / camera.focal, -1.0};
    Vec3 d{};
    for (int r = 0; r < 3; ++r) d[r] = m[4 * r] * d_cam[0] + m[4 * r + 1] * d_cam[1] + m[4 * r + 2] * d_cam[2];
    const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    for (auto& c : d) c /= len;
    rays.push_back({camera.position(), d});
  }
  return rays;
}

std::optional<Interval> intersect_aabb(const Ray& ray, const Aabb& box) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    if (d == 0.0) {
      if (o < box.lo[a] || o > box.hi[a]) return std::nullopt;
      continue;
    }
    double ta = (box.lo[a] - o) / d, tb = (box.hi[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 < t1)) return std::nullopt;
  return Interval{t0, t1};
}

RaySamples sample_uniform(const Ray& ray, Interval interval, std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample_uniform: need at least one sample");
  RaySamples s;
  const double step = (interval.t_far - interval.t_near) / static_cast<double>(n);
  s.t.resize(n);
  s.positions.resize(n);
  s.deltas.assign(n, step);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = interval.t_near + (static_cast<double>(i) + 0.5) * step;
    s.t[i] = t;
    for (int a = 0; a < 3; ++a) s.positions[i][a] = ray.origin[a] + t * ray.direction[a];
  }
  return s;
}

CompositeResult composite(std::span<const double> sigma, std::span<const double> rgb, std::span<const double> delta,
                          const Vec3& background) {
  const std::size_t n = sigma.size();
  if (rgb.size() != 3 * n || delta.size() != n) throw std::invalid_argument("composite: inconsistent sample counts");
  CompositeResult r{{0, 0, 0}, std::vector<double>(n), std::vector<double>(n + 1)};
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = std::exp(-acc);
    r.transmittance[i] = t;
    const double a = sigma[i] * delta[i];
    r.weights[i] = t * -std::expm1(-a);
    for (int c = 0; c < 3; ++c) r.rgb[c] += r.weights[i] * rgb[3 * i + c];
    acc += a;
  }
  r.transmittance[n] = std::exp(-acc);
  for (int c = 0; c < 3; ++c) r.rgb[c] += r.transmittance[n] * background[c];
  return r;
}

template <typename T>
Tensor<T> composite_rays(const Tensor<T>& sigma, const Tensor<T>& rgb, std::span<const T> deltas,
                         std::span<const std::size_t> offsets, const Vec3& background) {
  const std::size_t p = sigma.numel();
  if (sigma.shape() != Shape{p, 1} || rgb.shape() != Shape{p, 3} || deltas.size() != p) {
    throw std::invalid_argument("composite_rays: sigma " + shape_str(sigma.shape()) + ", rgb " +
                                shape_str(rgb.shape()) + " and " + std::to_string(deltas.size()) +
                                " deltas are inconsistent");
  }
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != p) {
    throw std::invalid_argument("composite_rays: offsets must run from 0 to the sample count");
  }
  const std::size_t n_rays = offsets.size() - 1;
  Tape<T>* tape = Tape<T>::active();
  if (tape && !sigma.requires_grad() && !rgb.requires_grad()) tape = nullptr;
  Tensor<T> out(Shape{n_rays, 3}, tape != nullptr);
  // Per-sample weights and T_{k+1}, and per-ray final transmittance.
  auto weights = std::make_shared<std::vector<T>>(p);
  auto t_after = std::make_shared<std::vector<T>>(p);
  auto t_final = std::make_shared<std::vector<T>>(n_rays);
  auto sv = sigma.values();
  auto cv = rgb.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < n_rays; ++r) {
    T acc = T(0);
    T colour[3] = {T(0), T(0), T(0)};
    for (std::size_t k = offsets[r]; k < offsets[r + 1]; ++k) {
      const T t = std::exp(-acc);
      const T a = sv[k] * deltas[k];
      const T w = t * -std::expm1(-a);
      (*weights)[k] = w;
      acc += a;
      (*t_after)[k] = std::exp(-acc);
      for (int c = 0; c < 3; ++c) colour[c] += w * cv[3 * k + c];
    }
    const T tf = std::exp(-acc);
    (*t_final)[r] = tf;
    for (int c = 0; c < 3; ++c) ov[3 * r + c] = colour[c] + tf * static_cast<T>(background[c]);
  }
  if (tape) {
    std::vector<T> delta_copy(deltas.begin(), deltas.end());
    std::vector<std::size_t> offset_copy(offsets.begin(), offsets.end());
    tape->record("composite_rays", [sigma, rgb, out, weights, t_after, t_final, background,
                                    delta = std::move(delta_copy), offs = std::move(offset_copy)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto cv = rgb.values();
      const bool want_sigma = sigma.requires_grad(), want_rgb = rgb.requires_grad();
      std::span<T> gs = want_sigma ? sigma.grad_buffer() : std::span<T>{};
      std::span<T> gc = want_rgb ? rgb.grad_buffer() : std::span<T>{};
      for (std::size_t r = 0; r + 1 < offs.size(); ++r) {
        const T* g = go.data() + 3 * r;
        // suffix = sum_{i>k} w_i c_i + T_{N+1} bg, dotted with g
        T suffix = (*t_final)[r] * (g[0] * static_cast<T>(background[0]) + g[1] * static_cast<T>(background[1]) +
                                    g[2] * static_cast<T>(background[2]));
        for (std::size_t k = offs[r + 1]; k-- > offs[r];) {
          const T gdotc = g[0] * cv[3 * k] + g[1] * cv[3 * k + 1] + g[2] * cv[3 * k + 2];
          if (want_sigma) gs[k] += delta[k] * ((*t_after)[k] * gdotc - suffix);
          if (want_rgb) {
            for (int c = 0; c < 3; ++c) gc[3 * k + c] += (*weights)[k] * g[c];
          }
          suffix += (*weights)[k] * gdotc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> render_loss(const Tensor<T>& predicted, const Tensor<T>& target) {
  if (predicted.shape() != target.shape() || predicted.dim() != 2) {
    throw std::invalid_argument("render_loss: shapes " + shape_str(predicted.shape()) + " and " +
                                shape_str(target.shape()) + " differ or are not [R,3]");
  }
  Tensor<T> diff = ops::sub(predicted, target);
  return ops::scale(ops::sum(ops::mul(diff, diff)), T(1) / static_cast<T>(predicted.size(0)));
}

OccupancyGrid OccupancyGrid::full(std::size_t resolution, double half_extent) {
  OccupancyGrid g;
  g.resolution = resolution;
  g.half_extent = half_extent;
  g.occupied.assign(resolution * resolution * resolution, 1);
  return g;
}

std::size_t OccupancyGrid::cell_of(const Vec3& p) const {
  std::size_t idx[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] + half_extent) / (2.0 * half_extent) * static_cast<double>(resolution);
    idx[a] = static_cast<std::size_t>(std::clamp(u, 0.0, static_cast<double>(resolution) - 1.0));
  }
  return (idx[0] * resolution + idx[1]) * resolution + idx[2];
}

std::size_t OccupancyGrid::occupied_count() const {
  return static_cast<std::size_t>(std::count(occupied.begin(), occupied.end(), std::uint8_t{1}));
}

template <typename T>
void update_occupancy(OccupancyGrid& grid, const DensityFn<T>& density, std::uint64_t seed, double density_threshold,
                      std::size_t batch) {
  const std::size_t r = grid.resolution;
  const std::size_t cells = r * r * r;
  constexpr std::size_t kProbes = 8;
  const double cell = 2.0 * grid.half_extent / static_cast<double>(r);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  std::vector<T> points(3 * cells * kProbes);
  for (std::size_t c = 0; c < cells; ++c) {
    const std::size_t idx[3] = {c / (r * r), (c / r) % r, c % r};
    for (std::size_t probe = 0; probe < kProbes; ++probe) {
      for (int a = 0; a < 3; ++a) {
        const double sub = static_cast<double>((probe >> a) & 1u);
        const double u = (static_cast<double>(idx[a]) + 0.5 * (sub + jitter(rng))) * cell - grid.half_extent;
        points[3 * (c * kProbes + probe) + a] = static_cast<T>(u);
      }
    }
  }
  std::vector<double> max_sigma(cells, 0.0);
  const std::size_t total = cells * kProbes;
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t start = 0; start < total; start += batch) {
    const std::size_t n = std::min(batch, total - start);
    auto sig = density(std::span<const T>(points.data() + 3 * start, 3 * n));
    for (std::size_t i = 0; i < n; ++i) {
      auto& m = max_sigma[(start + i) / kProbes];
      m = std::max(m, static_cast<double>(sig[i]));
    }
  }
  grid.density_threshold = density_threshold;
  grid.occupied.resize(cells);
  for (std::size_t c = 0; c < cells; ++c) grid.occupied[c] = max_sigma[c] >= density_threshold ? 1 : 0;
}

template <typename T>
RenderResult<T> render_rays(std::span<const Ray> rays, const SampleFn<T>& sample_fn, const RenderOptions& options,
                            const DensityFn<T>& density_fn) {
  const Aabb box = Aabb::cube(options.half_extent);
  std::vector<T> positions, deltas;
  std::vector<std::size_t> ray_of_sample;
  std::vector<std::size_t> offsets{0};
  std::vector<Vec3> dirs;
  dirs.reserve(rays.size());
  offsets.reserve(rays.size() + 1);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    dirs.push_back(rays[r].direction);
    if (auto hit = intersect_aabb(rays[r], box)) {
      auto s = sample_uniform(rays[r], *hit, options.samples_per_ray);
      for (std::size_t i = 0; i < s.t.size(); ++i) {
        if (options.occupancy && !options.occupancy->is_occupied(s.positions[i])) continue;
        for (int a = 0; a < 3; ++a) positions.push_back(static_cast<T>(s.positions[i][a]));
        deltas.push_back(static_cast<T>(s.deltas[i]));
        ray_of_sample.push_back(r);
      }
    }
    offsets.push_back(deltas.size());
  }

  if (options.early_termination && density_fn && !deltas.empty()) {
    const auto sigma = density_fn(positions);
    std::vector<T> kept_pos, kept_delta;
    std::vector<std::size_t> kept_ray, kept_offsets{0};
    const double log_thr = std::log(options.termination_transmittance);
    for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
      double acc = 0.0;
      for (std::size_t k = offsets[r]; k < offsets[r + 1]; ++k) {
        if (-acc < log_thr) break;
        for (int a = 0; a < 3; ++a) kept_pos.push_back(positions[3 * k + a]);
        kept_delta.push_back(deltas[k]);
        kept_ray.push_back(r);
        acc += static_cast<double>(sigma[k]) * static_cast<double>(deltas[k]);
      }
      kept_offsets.push_back(kept_delta.size());
    }
    positions.swap(kept_pos);
    deltas.swap(kept_delta);
    ray_of_sample.swap(kept_ray);
    offsets.swap(kept_offsets);
  }

  RenderResult<T> result;
  result.samples_evaluated = deltas.size();
  if (deltas.empty()) {
    result.rgb = Tensor<T>(Shape{rays.size(), 3});
    for (std::size_t r = 0; r < rays.size(); ++r) {
      for (int c = 0; c < 3; ++c) result.rgb.values()[3 * r + c] = static_cast<T>(options.background[c]);
    }
    return result;
  }
  auto decoded = sample_fn(positions, ray_of_sample, dirs);
  result.rgb = composite_rays<T>(decoded.sigma, decoded.rgb, deltas, offsets, options.background);
  return result;
}

template <typename T>
std::vector<float> render_image(const Camera& camera, const SampleFn<T>& sample_fn, const RenderOptions& options,
                                std::size_t chunk, const DensityFn<T>& density_fn) {
  const std::size_t n = camera.width * camera.height;
  std::vector<float> image(3 * n);
  std::vector<std::size_t> pixels;
  NoGradScope<T> no_grad;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    pixels.resize(count);
    for (std::size_t i = 0; i < count; ++i) pixels[i] = start + i;
    auto rays = generate_rays(camera, pixels);
    auto out = render_rays<T>(rays, sample_fn, options, density_fn);
    auto v = out.rgb.values();
    for (std::size_t i = 0; i < 3 * count; ++i) image[3 * start + i] = static_cast<float>(v[i]);
  }
  return image;
}

#define ZERORF_INSTANTIATE_RENDERER(T)                                                                            \
  template Tensor<T> composite_rays<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,                    \
                                       std::span<const std::size_t>, const Vec3&);                                \
  template Tensor<T> render_loss<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template void update_occupancy<T>(OccupancyGrid&, const DensityFn<T>&, std::uint64_t, double, std::size_t);     \
  template RenderResult<T> render_rays<T>(std::span<const Ray>, const SampleFn<T>&, const RenderOptions&,         \
                                          const DensityFn<T>&);                                                   \
  template std::vector<float> render_image<T>(const Camera&, const SampleFn<T>&, const RenderOptions&,            \
                                              std::size_t, const DensityFn<T>&);

ZERORF_INSTANTIATE_RENDERER(float)
ZERORF_INSTANTIATE_RENDERER(double)

}  // namespace zerorf
