#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zerorf/image.hpp"
#include "zerorf/renderer.hpp"

namespace zerorf {

struct Frame {
  std::string file_path;
  std::array<double, 16> transform{};  // camera-to-world, row-major
};

// Blender/NeRF-style transforms manifest.
struct SceneManifest {
  double camera_angle_x = 0.0;
  std::vector<Frame> frames;
  std::size_t width = 0;
  std::size_t height = 0;

  Camera camera(std::size_t frame) const;
};

// Manifest with its RGB images, already composited over the background.
struct Scene {
  SceneManifest manifest;
  std::vector<Image> images;
  std::array<double, 3> background{1.0, 1.0, 1.0};

  std::size_t size() const { return images.size(); }
  Camera camera(std::size_t frame) const { return manifest.camera(frame); }
  // Views restricted to `indices`, order kept.
  Scene subset(std::span<const std::size_t> indices) const;
};

// Parses a transforms manifest. Frame paths keep their text; image size is
// left at zero.
SceneManifest parse_manifest(const std::string& json_text);
std::string manifest_to_json(const SceneManifest& manifest);

// Reads `<dir>/<manifest_name>` and every referenced image (".png" is
// appended to paths without an extension).
Scene load_blender_scene(const std::filesystem::path& dir, const std::array<double, 3>& background = {1, 1, 1},
                         const std::string& manifest_name = "transforms_train.json");

// Writes the manifest and one PNG per frame at each frame's file_path.
void save_blender_scene(const std::filesystem::path& dir, const SceneManifest& manifest,
                        std::span<const Image> images, const std::string& manifest_name = "transforms_train.json");

struct ToySphere {
  Vec3 center{0, 0, 0};
  double radius = 0.5;
  Vec3 albedo{0.8, 0.3, 0.2};
};

struct ToySceneSpec {
  std::vector<ToySphere> spheres{ToySphere{}};
  std::size_t width = 64;
  std::size_t height = 64;
  double camera_angle_x = 0.6911112070083618;
  double half_extent = 1.5;
  Vec3 light_direction{0.3, -0.4, 0.866};
  double ambient = 0.25;
  std::array<double, 3> background{1, 1, 1};

  // Radius of the smallest origin-centred ball holding every sphere.
  double scene_radius() const;
  // Cameras sit at 4 * scene_radius from the origin.
  double camera_distance() const { return 4.0 * scene_radius(); }
  void validate() const;

  static ToySceneSpec single_sphere();
  static ToySceneSpec three_spheres();
};

// Nearest sphere hit along a ray: (depth, sphere index).
std::optional<std::pair<double, std::size_t>> toy_hit(const ToySceneSpec& spec, const Ray& ray);

// Lambertian shading at a hit, or the background on a miss.
Vec3 toy_shade(const ToySceneSpec& spec, const Ray& ray);

// Camera-to-world pose at `eye` looking at the origin, world +z up.
std::array<double, 16> look_at_origin(const Vec3& eye);

// n cameras on a Fibonacci sphere under a seeded random rotation, with
// RGBA renders (alpha 0 on background pixels).
struct ToyScene {
  SceneManifest manifest;
  std::vector<Image> rgba;
};
ToyScene make_toy_scene(const ToySceneSpec& spec, std::size_t n_views, std::uint64_t seed,
                        const std::string& prefix = "train");

// In-memory scene with the renders composited over `background`.
Scene to_scene(const ToyScene& toy, const std::array<double, 3>& background = {1, 1, 1});

// k-means over camera positions (k-means++ init, <= 100 Lloyd steps,
// several seeded restarts), returning the distinct view nearest each centroid.
std::vector<std::size_t> select_views_kmeans(std::span<const Vec3> positions, std::size_t k, std::uint64_t seed);

std::vector<Vec3> camera_positions(const SceneManifest& manifest);

}  // namespace zerorf
