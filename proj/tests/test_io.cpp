#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "support/metric_oracles.hpp"
#include "support/temp_dir.hpp"
#include "zerorf/checkpoint.hpp"
#include "zerorf/metrics.hpp"
#include "zerorf/scene.hpp"

using namespace zerorf;
using namespace zerorf::testing;

namespace {

SceneManifest two_frame_manifest() {
  SceneManifest m;
  m.camera_angle_x = 0.6911112070083618;
  Frame a{"./train/r_0", {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}};
  Frame b{"./train/r_1", look_at_origin({0.1234567890123, -3.3333333333333, 1.0000000000001})};
  m.frames = {a, b};
  return m;
}

}  // namespace

TEST_CASE("png round trip stays within 8-bit quantization") {
  TempDir dir;
  std::mt19937_64 rng(1);
  for (std::size_t ch : {1u, 3u, 4u}) {
    auto img = random_image(rng, 13, 7, ch);
    const auto path = dir.path() / ("img" + std::to_string(ch) + ".png");
    write_png(path, img);
    auto back = read_png(path);
    REQUIRE(back.width == 13);
    REQUIRE(back.height == 7);
    REQUIRE(back.channels == ch);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5f / 255 + 1e-6f);
  }
  CHECK_THROWS(read_png(dir.path() / "missing.png"));
  std::ofstream(dir.path() / "junk.png") << "not a png";
  CHECK_THROWS(read_png(dir.path() / "junk.png"));
}

TEST_CASE("alpha compositing over the background") {
  Image rgba(2, 1, 4);
  rgba.data = {0.2f, 0.4f, 0.6f, 0.0f, 0.2f, 0.4f, 0.6f, 1.0f};
  auto rgb = to_rgb(rgba, {1, 1, 1});
  for (int c = 0; c < 3; ++c) CHECK(rgb.data[c] == 1.0f);
  CHECK(rgb.data[3] == doctest::Approx(0.2f));
  auto black = to_rgb(rgba, {0, 0, 0});
  for (int c = 0; c < 3; ++c) CHECK(black.data[c] == 0.0f);
}

TEST_CASE("manifest round trip is pose-exact") {
  TempDir dir;
  auto m = two_frame_manifest();
  std::vector<Image> imgs{Image(4, 3, 4, 1.0f), Image(4, 3, 4, 0.5f)};
  save_blender_scene(dir.path(), m, imgs);
  auto scene = load_blender_scene(dir.path());
  REQUIRE(scene.size() == 2);
  CHECK(scene.manifest.width == 4);
  CHECK(scene.manifest.height == 3);
  CHECK(scene.manifest.camera_angle_x == m.camera_angle_x);
  for (std::size_t f = 0; f < 2; ++f) {
    CHECK(scene.manifest.frames[f].file_path == m.frames[f].file_path);
    for (int i = 0; i < 16; ++i) CHECK(scene.manifest.frames[f].transform[i] == m.frames[f].transform[i]);
  }
  auto again = parse_manifest(manifest_to_json(scene.manifest));
  for (int i = 0; i < 16; ++i) CHECK(again.frames[1].transform[i] == m.frames[1].transform[i]);
}

TEST_CASE("identity frame gives a camera at the origin looking down -z") {
  TempDir dir;
  SceneManifest m;
  m.camera_angle_x = 1.0;
  m.frames = {Frame{"img.png", {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}}};
  Image transparent(5, 5, 4, 0.0f);
  save_blender_scene(dir.path(), m, std::vector<Image>{transparent});
  auto scene = load_blender_scene(dir.path());
  auto cam = scene.camera(0);
  for (double c : cam.position()) CHECK(c == 0.0);
  std::vector<std::size_t> centre{12};
  auto ray = generate_rays(cam, centre)[0];
  CHECK(ray.direction[2] == doctest::Approx(-1.0));
  for (float v : scene.images[0].data) CHECK(v == 1.0f);
}

TEST_CASE("scene loading reports descriptive errors") {
  TempDir dir;
  CHECK_THROWS_WITH_AS(load_blender_scene(dir.path() / "nothing"), doctest::Contains("not found"), std::runtime_error);
  std::ofstream(dir.path() / "transforms_train.json")
      << R"({"camera_angle_x": 0.5, "frames": [{"file_path": "a", "transform_matrix": [[1,0,0],[0,1,0],[0,0,1]]}]})";
  CHECK_THROWS_WITH_AS(load_blender_scene(dir.path()), doctest::Contains("4x4"), std::runtime_error);
  std::ofstream(dir.path() / "transforms_train.json") << R"({"frames": []})";
  CHECK_THROWS_WITH_AS(load_blender_scene(dir.path()), doctest::Contains("camera_angle_x"), std::runtime_error);

  auto m = two_frame_manifest();
  save_blender_scene(dir.path(), m, std::vector<Image>{Image(4, 3, 3), Image(5, 3, 3)});
  CHECK_THROWS_WITH_AS(load_blender_scene(dir.path()), doctest::Contains("expected 4x3"), std::runtime_error);
  std::filesystem::remove(dir.path() / "train" / "r_1.png");
  CHECK_THROWS_WITH_AS(load_blender_scene(dir.path()), doctest::Contains("r_1"), std::runtime_error);
}

TEST_CASE("toy sphere hits match the quadratic formula") {
  auto spec = ToySceneSpec::three_spheres();
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  int hits = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    Vec3 o{n(rng) * 3, n(rng) * 3, n(rng) * 3};
    const auto& aim = spec.spheres[trial % spec.spheres.size()].center;
    Vec3 d{aim[0] - o[0] + 0.5 * n(rng), aim[1] - o[1] + 0.5 * n(rng), aim[2] - o[2] + 0.5 * n(rng)};
    const double len = std::hypot(d[0], d[1], d[2]);
    for (auto& c : d) c /= len;
    double best = INFINITY;
    for (const auto& s : spec.spheres) {
      const double a = 1.0;
      double b = 0, c = -s.radius * s.radius;
      for (int k = 0; k < 3; ++k) {
        b += 2 * d[k] * (o[k] - s.center[k]);
        c += (o[k] - s.center[k]) * (o[k] - s.center[k]);
      }
      const double disc = b * b - 4 * a * c;
      if (disc < 0) continue;
      const double t0 = (-b - std::sqrt(disc)) / (2 * a), t1 = (-b + std::sqrt(disc)) / (2 * a);
      const double t = t0 > 0 ? t0 : t1;
      if (t > 0) best = std::min(best, t);
    }
    auto hit = toy_hit(spec, {o, d});
    CHECK(hit.has_value() == std::isfinite(best));
    if (hit) {
      ++hits;
      CHECK(std::abs(hit->first - best) < 1e-9);
    }
  }
  CHECK(hits > 500);
  CHECK(hits < 2000);
}

TEST_CASE("single-sphere toy views show a centred disk over exact background") {
  auto spec = ToySceneSpec::single_sphere();
  auto toy = make_toy_scene(spec, 6, 3);
  REQUIRE(toy.rgba.size() == 6);
  for (const auto& img : toy.rgba) {
    double sx = 0, sy = 0, count = 0;
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        if (img.at(x, y, 3) > 0.5f) {
          sx += x + 0.5;
          sy += y + 0.5;
          ++count;
        }
      }
    }
    REQUIRE(count > 100);
    CHECK(sx / count == doctest::Approx(32.0).epsilon(0.01));
    CHECK(sy / count == doctest::Approx(32.0).epsilon(0.01));
    auto rgb = to_rgb(img, spec.background);
    CHECK(rgb.at(0, 0, 0) == 1.0f);
    CHECK(rgb.at(63, 63, 2) == 1.0f);
  }
  auto again = make_toy_scene(spec, 6, 3);
  CHECK(again.rgba[2].data == toy.rgba[2].data);
  for (const auto& f : toy.manifest.frames) {
    const double r = std::hypot(f.transform[3], f.transform[7], f.transform[11]);
    CHECK(r == doctest::Approx(4.0 * 0.75));
  }
  auto bad = spec;
  bad.spheres[0].center = {1.2, 0, 0};
  CHECK_THROWS_AS(make_toy_scene(bad, 2, 1), std::invalid_argument);
}

TEST_CASE("kmeans view selection") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  CHECK(select_views_kmeans(pts, 3, 1) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(select_views_kmeans(pts, 4, 1), std::invalid_argument);

  std::vector<Vec3> groups{{5, 5, 5}, {-5, -5, -5}, {5.2, 5, 5}, {-5, -5.3, -5}, {5, 4.9, 5.1}, {-4.8, -5, -5}};
  auto sel = select_views_kmeans(groups, 2, 7);
  REQUIRE(sel.size() == 2);
  CHECK((groups[sel[0]][0] > 0) != (groups[sel[1]][0] > 0));
  CHECK(select_views_kmeans(groups, 2, 7) == sel);

  std::vector<Vec3> dup{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {9, 9, 9}};
  auto d = select_views_kmeans(dup, 3, 2);
  std::sort(d.begin(), d.end());
  CHECK(std::adjacent_find(d.begin(), d.end()) == d.end());
}

TEST_CASE("kmeans agrees with brute force over assignments") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t count = 6 + trial % 3;
    std::vector<Vec3> pts(count);
    for (std::size_t i = 0; i < count; ++i) {
      const double off = i % 2 ? 4.0 : -4.0;
      pts[i] = {off + 0.5 * n(rng), 0.5 * n(rng), 0.5 * n(rng)};
    }
    // Optimal 2-partition by enumeration.
    double best = INFINITY;
    std::size_t best_mask = 0;
    for (std::size_t mask = 1; mask + 1 < (1u << count); ++mask) {
      double cost = 0.0;
      for (int side = 0; side < 2; ++side) {
        Vec3 c{0, 0, 0};
        double m = 0;
        for (std::size_t i = 0; i < count; ++i)
          if (((mask >> i) & 1) == std::size_t(side)) {
            for (int a = 0; a < 3; ++a) c[a] += pts[i][a];
            ++m;
          }
        for (auto& v : c) v /= m;
        for (std::size_t i = 0; i < count; ++i)
          if (((mask >> i) & 1) == std::size_t(side))
            for (int a = 0; a < 3; ++a) cost += (pts[i][a] - c[a]) * (pts[i][a] - c[a]);
      }
      if (cost < best) {
        best = cost;
        best_mask = mask;
      }
    }
    auto sel = select_views_kmeans(pts, 2, trial);
    CHECK(((best_mask >> sel[0]) & 1) != ((best_mask >> sel[1]) & 1));

    std::vector<std::size_t> perm(count);
    for (std::size_t i = 0; i < count; ++i) perm[i] = count - 1 - i;
    std::vector<Vec3> shuffled(count);
    for (std::size_t i = 0; i < count; ++i) shuffled[i] = pts[perm[i]];
    auto sel2 = select_views_kmeans(shuffled, 2, trial);
    std::vector<std::size_t> a{sel[0], sel[1]}, b{perm[sel2[0]], perm[sel2[1]]};
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("psnr examples and literal oracle") {
  std::mt19937_64 rng(2);
  auto a = random_image(rng, 16, 16, 3);
  CHECK(psnr(a.data, a.data) == 99.0);
  std::vector<float> x(100, 0.5f), y(100, 0.6f);
  CHECK(psnr(x, y) == doctest::Approx(20.0).epsilon(1e-6));
  for (int i = 0; i < 50; ++i) {
    auto p = random_image(rng, 16, 12, 3), q = random_image(rng, 16, 12, 3);
    CHECK(std::abs(psnr(p.data, q.data) - literal_psnr(p, q)) < 1e-6);
  }
  CHECK_THROWS_AS(psnr(x, std::vector<float>(3)), std::invalid_argument);
}

TEST_CASE("ssim examples and literal oracle") {
  std::mt19937_64 rng(3);
  auto a = random_image(rng, 24, 20, 3);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  Image inv = a;
  for (auto& v : inv.data) v = 1.0f - v;
  CHECK(ssim(a, inv) < 1.0);
  const double c = 0.3;
  Image k1(16, 16, 3, float(c)), k2(16, 16, 3, float(c + 0.1));
  const double mu_y = double(float(c + 0.1)), mu_x = double(float(c));
  const double closed = (2 * mu_x * mu_y + 1e-4) / (mu_x * mu_x + mu_y * mu_y + 1e-4);
  CHECK(ssim(k1, k2) == doctest::Approx(closed).epsilon(1e-9));
  for (int i = 0; i < 50; ++i) {
    auto p = random_image(rng, 20, 17, 3), q = random_image(rng, 20, 17, 3);
    for (std::size_t j = 0; j < q.data.size(); ++j) q.data[j] = 0.7f * q.data[j] + 0.3f * p.data[j];
    CHECK(std::abs(ssim(p, q) - literal_ssim(p, q)) < 1e-6);
  }
  CHECK_THROWS_AS(ssim(Image(8, 8, 3), Image(8, 8, 3)), std::invalid_argument);
}

TEST_CASE("metric report means and files") {
  MetricReport empty;
  CHECK_FALSE(empty.mean_psnr());
  CHECK(empty.to_text().find("views=0") != std::string::npos);
  MetricReport r;
  r.views = {{"a", 20.0, 0.5}, {"b", 30.0, 0.7}, {"c", 25.0, 0.9}};
  CHECK(*r.mean_psnr() == doctest::Approx(25.0));
  CHECK(*r.mean_ssim() == doctest::Approx(0.7));
  TempDir dir;
  r.write(dir.path() / "report");
  std::ifstream js(dir.path() / "report.json");
  auto j = nlohmann::json::parse(js);
  CHECK(j["views"].size() == 3);
  CHECK(j["mean_psnr"].get<double>() == doctest::Approx(25.0));
  CHECK(std::filesystem::exists(dir.path() / "report.txt"));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  Checkpoint ck;
  std::vector<float> f(37);
  std::vector<double> d(12);
  for (auto& v : f) v = static_cast<float>(n(rng));
  for (auto& v : d) v = n(rng);
  f[3] = -0.0f;
  d[5] = std::numeric_limits<double>::denorm_min();
  std::vector<std::uint64_t> u{0, 1, ~0ull};
  ck.put<float>("a.weight", f, {37});
  ck.put<double>("b", d, {3, 4});
  ck.put<std::uint64_t>("rng", u, {3});
  ck.meta["iteration"] = 17;
  ck.meta["rng_state"] = "1 2 3";
  TempDir dir;
  save_checkpoint(ck, dir.path() / "run" / "ck.bin");
  auto back = load_checkpoint(dir.path() / "run" / "ck.bin");
  CHECK(std::memcmp(back.get<float>("a.weight").data(), f.data(), f.size() * 4) == 0);
  CHECK(std::memcmp(back.get<double>("b").data(), d.data(), d.size() * 8) == 0);
  CHECK(back.get<std::uint64_t>("rng") == u);
  CHECK(back.record("b").shape == Shape{3, 4});
  CHECK(back.meta["iteration"] == 17);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));
  CHECK_FALSE(std::filesystem::exists(dir.path() / "run" / "ck.bin.tmp"));
  CHECK_THROWS(back.get<double>("a.weight"));
  Tensor<double> wrong(Shape{4, 3});
  CHECK_THROWS(back.load_into("b", wrong));
}

TEST_CASE("checkpoint corruption is detected") {
  Checkpoint ck;
  std::vector<double> d(10, 1.5);
  ck.put<double>("x", d, {10});
  const std::string good = serialize_checkpoint(ck);
  CHECK_THROWS_WITH(deserialize_checkpoint(good.substr(0, good.size() - 3)), doctest::Contains("truncated"));
  std::string bad_len = good;
  bad_len.replace(bad_len.find("\"nbytes\":80"), 11, "\"nbytes\":88");
  CHECK_THROWS_WITH(deserialize_checkpoint(bad_len), doctest::Contains("payload length"));
  std::string version = good;
  version.replace(version.find("version 1"), 9, "version 9");
  CHECK_THROWS_WITH(deserialize_checkpoint(version), doctest::Contains("unsupported"));
  CHECK_THROWS_WITH(deserialize_checkpoint("hello\n"), doctest::Contains("magic"));
  CHECK_THROWS_WITH(deserialize_checkpoint(good + "x"), doctest::Contains("trailing"));
}

TEST_CASE("feature plane export") {
  TempDir dir;
  auto constant = Tensor<double>::filled({2, 5, 5}, 3.0);
  auto img = feature_plane_image(constant, 1);
  for (float v : img.data) CHECK(v == 0.5f);
  export_feature_plane(constant, 0, dir.path() / "c.png");
  auto back = read_png(dir.path() / "c.png");
  CHECK(back.channels == 1);
  CHECK(back.data[0] == doctest::Approx(128.0 / 255.0));

  Tensor<double> spike(Shape{1, 4, 6});
  spike.values()[2 * 6 + 5] = 7.0;
  export_feature_plane(spike, 0, dir.path() / "s.png");
  auto s = read_png(dir.path() / "s.png");
  CHECK(s.width == 6);
  CHECK(s.height == 4);
  for (std::size_t i = 0; i < 24; ++i) CHECK(s.data[i] == (i == 17 ? 1.0f : 0.0f));

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-3, 5);
  Tensor<double> plane(Shape{3, 8, 8});
  for (auto& v : plane.values()) v = u(rng);
  export_feature_plane(plane, 2, dir.path() / "r.png");
  auto r = read_png(dir.path() / "r.png");
  auto ch = plane.values().subspan(128, 64);
  const double lo = *std::min_element(ch.begin(), ch.end()), hi = *std::max_element(ch.begin(), ch.end());
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(std::abs(r.data[i] * (hi - lo) + lo - ch[i]) <= (hi - lo) / 255.0);
  }
  CHECK_THROWS_AS(feature_plane_image(plane, 3), std::invalid_argument);
}
