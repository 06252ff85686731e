#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "zerorf/decoder.hpp"
#include "zerorf/tensor.hpp"

namespace zerorf {

using Vec3 = std::array<double, 3>;

// Pinhole camera, camera-to-world pose in row-major 4x4 form. The camera
// looks along -z of its own frame with +y up.
struct Camera {
  std::size_t width = 0;
  std::size_t height = 0;
  double focal = 0.0;
  std::array<double, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static double focal_from_fov(std::size_t width, double camera_angle_x);
  Vec3 position() const { return {pose[3], pose[7], pose[11]}; }
  // Throws std::invalid_argument on a non-orthonormal rotation or focal <= 0.
  void validate() const;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
};

struct Aabb {
  Vec3 lo;
  Vec3 hi;
  static Aabb cube(double half_extent) { return {{-half_extent, -half_extent, -half_extent}, {half_extent, half_extent, half_extent}}; }
};

struct Interval {
  double t_near;
  double t_far;
};

// Pixel index = y * width + x, through the pixel centre.
std::vector<Ray> generate_rays(const Camera& camera, std::span<const std::size_t> pixels);

// Slab test; t_near clamped to >= 0. nullopt on a miss.
std::optional<Interval> intersect_aabb(const Ray& ray, const Aabb& box);

struct RaySamples {
  std::vector<double> t;
  std::vector<Vec3> positions;
  std::vector<double> deltas;
};

// n midpoint samples of equal length on the interval.
RaySamples sample_uniform(const Ray& ray, Interval interval, std::size_t n);

struct CompositeResult {
  Vec3 rgb;
  std::vector<double> weights;
  std::vector<double> transmittance;  // T_1..T_{N+1}
};

// Reference compositing of one ray:
//   T_i = exp(-sum_{j<i} sigma_j delta_j), w_i = T_i (1 - exp(-sigma_i delta_i)),
//   C   = sum_i w_i c_i + T_{N+1} background.
CompositeResult composite(std::span<const double> sigma, std::span<const double> rgb, std::span<const double> delta,
                          const Vec3& background);

// Differentiable compositing of packed rays. Samples of ray r occupy
// [offsets[r], offsets[r+1]); sigma is [P,1], rgb [P,3]. Returns [R,3].
template <typename T>
Tensor<T> composite_rays(const Tensor<T>& sigma, const Tensor<T>& rgb, std::span<const T> deltas,
                         std::span<const std::size_t> offsets, const Vec3& background);

// Mean over rays of the squared error summed over channels.
template <typename T>
Tensor<T> render_loss(const Tensor<T>& predicted, const Tensor<T>& target);

// Binary occupancy over the cube [-h, h]^3.
struct OccupancyGrid {
  std::size_t resolution = 32;
  double half_extent = 1.5;
  // A cell is empty when every probe density is below this value.
  double density_threshold = 0.0;
  std::vector<std::uint8_t> occupied;

  static OccupancyGrid full(std::size_t resolution, double half_extent);
  std::size_t cell_of(const Vec3& p) const;
  bool is_occupied(const Vec3& p) const { return occupied[cell_of(p)] != 0; }
  std::size_t occupied_count() const;
};

template <typename T>
using DensityFn = std::function<std::vector<T>(std::span<const T> points)>;

// Re-probes every cell with a stratified 2x2x2 jittered pattern.
template <typename T>
void update_occupancy(OccupancyGrid& grid, const DensityFn<T>& density, std::uint64_t seed, double density_threshold,
                      std::size_t batch = 1 << 15);

// Density threshold equivalent to sigma * delta < opacity for a given step.
inline double occupancy_threshold(double step, double opacity = 1e-3) { return opacity / step; }

// Evaluates density and color at packed sample positions ([P*3] xyz);
// `ray_dirs` holds one unit direction per ray.
template <typename T>
using SampleFn = std::function<DecodedSamples<T>(std::span<const T> positions,
                                                 std::span<const std::size_t> ray_of_sample,
                                                 std::span<const Vec3> ray_dirs)>;

struct RenderOptions {
  std::size_t samples_per_ray = 128;
  double half_extent = 1.5;
  Vec3 background{1.0, 1.0, 1.0};
  const OccupancyGrid* occupancy = nullptr;
  // Drop samples behind the point where transmittance falls below
  // termination_transmittance, found with a density-only pre-pass.
  bool early_termination = false;
  double termination_transmittance = 1e-4;
};

template <typename T>
struct RenderResult {
  Tensor<T> rgb;  // [R,3]
  std::size_t samples_evaluated = 0;
};

template <typename T>
RenderResult<T> render_rays(std::span<const Ray> rays, const SampleFn<T>& sample_fn, const RenderOptions& options,
                            const DensityFn<T>& density_fn = {});

// Full image, row-major HxWx3, rendered in chunks without recording.
template <typename T>
std::vector<float> render_image(const Camera& camera, const SampleFn<T>& sample_fn, const RenderOptions& options,
                                std::size_t chunk = 4096, const DensityFn<T>& density_fn = {});

}  // namespace zerorf
