#include "zerorf/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace zerorf {

using nlohmann::json;

Camera SceneManifest::camera(std::size_t frame) const {
  Camera c;
  c.width = width;
  c.height = height;
  c.focal = Camera::focal_from_fov(width, camera_angle_x);
  c.pose = frames.at(frame).transform;
  return c;
}

Scene Scene::subset(std::span<const std::size_t> indices) const {
  Scene s;
  s.background = background;
  s.manifest.camera_angle_x = manifest.camera_angle_x;
  s.manifest.width = manifest.width;
  s.manifest.height = manifest.height;
  for (std::size_t i : indices) {
    s.manifest.frames.push_back(manifest.frames.at(i));
    s.images.push_back(images.at(i));
  }
  return s;
}

SceneManifest parse_manifest(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("malformed manifest: ") + e.what());
  }
  SceneManifest m;
  if (!j.is_object() || !j.contains("camera_angle_x") || !j["camera_angle_x"].is_number()) {
    throw std::runtime_error("manifest: missing numeric camera_angle_x");
  }
  m.camera_angle_x = j["camera_angle_x"].get<double>();
  if (!j.contains("frames") || !j["frames"].is_array()) throw std::runtime_error("manifest: missing frames list");
  std::size_t index = 0;
  for (const auto& f : j["frames"]) {
    const std::string where = "manifest frame " + std::to_string(index++);
    if (!f.contains("file_path") || !f["file_path"].is_string()) throw std::runtime_error(where + ": missing file_path");
    Frame frame;
    frame.file_path = f["file_path"].get<std::string>();
    const auto& mat = f.contains("transform_matrix") ? f["transform_matrix"] : json();
    if (!mat.is_array() || mat.size() != 4) throw std::runtime_error(where + ": transform_matrix must be 4x4");
    for (std::size_t r = 0; r < 4; ++r) {
      if (!mat[r].is_array() || mat[r].size() != 4) throw std::runtime_error(where + ": transform_matrix must be 4x4");
      for (std::size_t c = 0; c < 4; ++c) {
        if (!mat[r][c].is_number()) throw std::runtime_error(where + ": non-numeric transform entry");
        frame.transform[4 * r + c] = mat[r][c].get<double>();
      }
    }
    m.frames.push_back(std::move(frame));
  }
  return m;
}

std::string manifest_to_json(const SceneManifest& manifest) {
  json j;
  j["camera_angle_x"] = manifest.camera_angle_x;
  j["frames"] = json::array();
  for (const auto& f : manifest.frames) {
    json mat = json::array();
    for (std::size_t r = 0; r < 4; ++r) {
      mat.push_back({f.transform[4 * r], f.transform[4 * r + 1], f.transform[4 * r + 2], f.transform[4 * r + 3]});
    }
    j["frames"].push_back({{"file_path", f.file_path}, {"transform_matrix", mat}});
  }
  return j.dump(2);
}

namespace {

std::filesystem::path image_path(const std::filesystem::path& dir, const std::string& file_path) {
  std::filesystem::path p = dir / file_path;
  if (!p.has_extension()) p += ".png";
  return p;
}

}  // namespace

Scene load_blender_scene(const std::filesystem::path& dir, const std::array<double, 3>& background,
                         const std::string& manifest_name) {
  const auto manifest_path = dir / manifest_name;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("scene manifest not found: " + manifest_path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  Scene scene;
  scene.background = background;
  scene.manifest = parse_manifest(buffer.str());
  for (std::size_t i = 0; i < scene.manifest.frames.size(); ++i) {
    const auto& frame = scene.manifest.frames[i];
    Camera cam;
    cam.focal = 1.0;
    cam.width = cam.height = 1;
    cam.pose = frame.transform;
    try {
      cam.validate();
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("frame " + frame.file_path + ": " + e.what());
    }
    Image img = to_rgb(read_png(image_path(dir, frame.file_path)), background);
    if (i == 0) {
      scene.manifest.width = img.width;
      scene.manifest.height = img.height;
    } else if (img.width != scene.manifest.width || img.height != scene.manifest.height) {
      throw std::runtime_error("image " + frame.file_path + " is " + std::to_string(img.width) + "x" +
                               std::to_string(img.height) + ", expected " + std::to_string(scene.manifest.width) +
                               "x" + std::to_string(scene.manifest.height));
    }
    scene.images.push_back(std::move(img));
  }
  return scene;
}

void save_blender_scene(const std::filesystem::path& dir, const SceneManifest& manifest,
                        std::span<const Image> images, const std::string& manifest_name) {
  if (images.size() != manifest.frames.size()) throw std::invalid_argument("save_blender_scene: one image per frame");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto p = image_path(dir, manifest.frames[i].file_path);
    std::filesystem::create_directories(p.parent_path());
    write_png(p, images[i]);
  }
  std::ofstream out(dir / manifest_name);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest_to_json(manifest) << "\n";
}

double ToySceneSpec::scene_radius() const {
  double r = 0.0;
  for (const auto& s : spheres) r = std::max(r, std::hypot(s.center[0], s.center[1], s.center[2]) + s.radius);
  return r;
}

void ToySceneSpec::validate() const {
  if (spheres.empty() || spheres.size() > 4) throw std::invalid_argument("toy scene: need 1 to 4 spheres");
  for (const auto& s : spheres) {
    if (!(s.radius > 0.0)) throw std::invalid_argument("toy scene: sphere radius must be positive");
    for (int a = 0; a < 3; ++a) {
      if (std::abs(s.center[a]) + s.radius > half_extent) {
        throw std::invalid_argument("toy scene: sphere extends outside the bounding box");
      }
    }
  }
  if (width == 0 || height == 0) throw std::invalid_argument("toy scene: empty image size");
}

ToySceneSpec ToySceneSpec::single_sphere() {
  ToySceneSpec s;
  s.spheres = {ToySphere{{0, 0, 0}, 0.75, {0.8, 0.35, 0.2}}};
  return s;
}

ToySceneSpec ToySceneSpec::three_spheres() {
  ToySceneSpec s;
  s.spheres = {ToySphere{{-0.45, -0.2, -0.1}, 0.4, {0.85, 0.2, 0.15}},
               ToySphere{{0.4, 0.3, -0.05}, 0.35, {0.2, 0.75, 0.25}},
               ToySphere{{0.05, -0.05, 0.45}, 0.3, {0.2, 0.3, 0.9}}};
  return s;
}

std::optional<std::pair<double, std::size_t>> toy_hit(const ToySceneSpec& spec, const Ray& ray) {
  std::optional<std::pair<double, std::size_t>> best;
  for (std::size_t i = 0; i < spec.spheres.size(); ++i) {
    const auto& s = spec.spheres[i];
    Vec3 oc{ray.origin[0] - s.center[0], ray.origin[1] - s.center[1], ray.origin[2] - s.center[2]};
    const double b = oc[0] * ray.direction[0] + oc[1] * ray.direction[1] + oc[2] * ray.direction[2];
    const double c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    // Stable root pair of t^2 + 2bt + c = 0.
    const double q = -b - std::copysign(std::sqrt(disc), b);
    double t0 = q, t1 = q != 0.0 ? c / q : 0.0;
    if (t0 > t1) std::swap(t0, t1);
    const double t = t0 > 0.0 ? t0 : t1;
    if (t <= 0.0) continue;
    if (!best || t < best->first) best = std::make_pair(t, i);
  }
  return best;
}

Vec3 toy_shade(const ToySceneSpec& spec, const Ray& ray) {
  auto hit = toy_hit(spec, ray);
  if (!hit) return spec.background;
  const auto& s = spec.spheres[hit->second];
  Vec3 n{};
  for (int a = 0; a < 3; ++a) n[a] = (ray.origin[a] + hit->first * ray.direction[a] - s.center[a]) / s.radius;
  const auto& l = spec.light_direction;
  const double ll = std::hypot(l[0], l[1], l[2]);
  const double lambert = std::max(0.0, (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / ll);
  const double shade = spec.ambient + (1.0 - spec.ambient) * lambert;
  return {s.albedo[0] * shade, s.albedo[1] * shade, s.albedo[2] * shade};
}

std::array<double, 16> look_at_origin(const Vec3& eye) {
  const double d = std::hypot(eye[0], eye[1], eye[2]);
  if (d == 0.0) throw std::invalid_argument("look_at_origin: eye at origin");
  const Vec3 back{eye[0] / d, eye[1] / d, eye[2] / d};
  Vec3 up{0, 0, 1};
  if (std::abs(back[2]) > 0.999) up = {0, 1, 0};
  Vec3 right{up[1] * back[2] - up[2] * back[1], up[2] * back[0] - up[0] * back[2], up[0] * back[1] - up[1] * back[0]};
  const double rn = std::hypot(right[0], right[1], right[2]);
  for (auto& v : right) v /= rn;
  const Vec3 cam_up{back[1] * right[2] - back[2] * right[1], back[2] * right[0] - back[0] * right[2],
                    back[0] * right[1] - back[1] * right[0]};
  return {right[0], cam_up[0], back[0], eye[0], right[1], cam_up[1], back[1], eye[1],
          right[2], cam_up[2], back[2], eye[2], 0,        0,         0,       1};
}

ToyScene make_toy_scene(const ToySceneSpec& spec, std::size_t n_views, std::uint64_t seed,
                        const std::string& prefix) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  // Uniform random rotation from a normalized Gaussian quaternion.
  double q[4];
  double qn = 0.0;
  for (auto& v : q) {
    v = normal(rng);
    qn += v * v;
  }
  qn = std::sqrt(qn);
  for (auto& v : q) v /= qn;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double rot[9] = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};

  ToyScene out;
  out.manifest.camera_angle_x = spec.camera_angle_x;
  out.manifest.width = spec.width;
  out.manifest.height = spec.height;
  const double radius = spec.camera_distance();
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<std::size_t> pixels(spec.width * spec.height);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = i;
  for (std::size_t v = 0; v < n_views; ++v) {
    const double zf = 1.0 - 2.0 * (static_cast<double>(v) + 0.5) / static_cast<double>(n_views);
    const double rr = std::sqrt(std::max(0.0, 1.0 - zf * zf));
    const double phi = golden * static_cast<double>(v);
    const Vec3 p{rr * std::cos(phi), rr * std::sin(phi), zf};
    Vec3 eye{};
    for (int a = 0; a < 3; ++a) eye[a] = radius * (rot[3 * a] * p[0] + rot[3 * a + 1] * p[1] + rot[3 * a + 2] * p[2]);
    Frame frame;
    frame.file_path = "./" + prefix + "/r_" + std::to_string(v);
    frame.transform = look_at_origin(eye);
    out.manifest.frames.push_back(frame);

    Camera cam = out.manifest.camera(v);
    Image img(spec.width, spec.height, 4);
    auto rays = generate_rays(cam, pixels);
    for (std::size_t i = 0; i < rays.size(); ++i) {
      const bool hit = toy_hit(spec, rays[i]).has_value();
      const Vec3 c = toy_shade(spec, rays[i]);
      for (int ch = 0; ch < 3; ++ch) img.data[4 * i + ch] = hit ? static_cast<float>(c[ch]) : 0.0f;
      img.data[4 * i + 3] = hit ? 1.0f : 0.0f;
    }
    out.rgba.push_back(std::move(img));
  }
  return out;
}

std::vector<Vec3> camera_positions(const SceneManifest& manifest) {
  std::vector<Vec3> out;
  for (const auto& f : manifest.frames) out.push_back({f.transform[3], f.transform[7], f.transform[11]});
  return out;
}

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
  return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]);
}

struct KMeansFit {
  std::vector<Vec3> centroids;
  double inertia = std::numeric_limits<double>::infinity();
};

KMeansFit kmeans_once(std::span<const Vec3> pts, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = pts.size();
  KMeansFit fit;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  fit.centroids.push_back(pts[first(rng)]);
  std::vector<double> d2(n);
  while (fit.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : fit.centroids) d2[i] = std::min(d2[i], sq_dist(pts[i], c));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    fit.centroids.push_back(pts[pick]);
  }
  std::vector<std::size_t> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(pts[i], fit.centroids[c]);
        if (d < best) {
          best = d;
          assign[i] = c;
        }
      }
    }
    std::vector<Vec3> next(k, Vec3{0, 0, 0});
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) next[assign[i]][a] += pts[i][a];
      ++count[assign[i]];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        next[c] = fit.centroids[c];
        continue;
      }
      for (int a = 0; a < 3; ++a) next[c][a] /= static_cast<double>(count[c]);
      shift = std::max(shift, sq_dist(next[c], fit.centroids[c]));
    }
    fit.centroids = next;
    if (shift < 1e-9) break;
  }
  fit.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : fit.centroids) best = std::min(best, sq_dist(pts[i], c));
    fit.inertia += best;
  }
  return fit;
}

}  // namespace

Scene to_scene(const ToyScene& toy, const std::array<double, 3>& background) {
  Scene scene;
  scene.manifest = toy.manifest;
  scene.background = background;
  for (const auto& img : toy.rgba) scene.images.push_back(to_rgb(img, background));
  if (!scene.images.empty()) {
    scene.manifest.width = scene.images[0].width;
    scene.manifest.height = scene.images[0].height;
  }
  return scene;
}

std::vector<std::size_t> select_views_kmeans(std::span<const Vec3> positions, std::size_t k, std::uint64_t seed) {
  const std::size_t n = positions.size();
  if (k > n) {
    throw std::invalid_argument("select_views_kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(n) +
                                " views");
  }
  if (k == 0) return {};
  if (k == n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  std::mt19937_64 rng(seed);
  KMeansFit best;
  constexpr int kRestarts = 10;
  for (int r = 0; r < kRestarts; ++r) {
    auto fit = kmeans_once(positions, k, rng);
    if (fit.inertia < best.inertia) best = std::move(fit);
  }
  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  for (const auto& c : best.centroids) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sq_dist(positions[a], c) < sq_dist(positions[b], c);
    });
    for (std::size_t i : order) {
      if (!used[i]) {
        used[i] = true;
        chosen.push_back(i);
        break;
      }
    }
  }
  return chosen;
}

}  // namespace zerorf
