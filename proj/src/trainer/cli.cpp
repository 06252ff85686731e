#include "zerorf/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

#include "zerorf/checkpoint.hpp"
#include "zerorf/config.hpp"
#include "zerorf/model.hpp"
#include "zerorf/scene.hpp"
#include "zerorf/trainer.hpp"

namespace zerorf {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string precision = "f32";
  bool precision_given = false;
  std::string config_path;
  std::vector<std::string> overrides;
};

TrainConfig build_config(const GlobalOptions& g, const TrainConfig& base) {
  try {
    TrainConfig c = g.config_path.empty() ? base : TrainConfig::load(g.config_path);
    for (const auto& s : g.overrides) c.apply_override(s);
    if (g.seed) c.set_seed(*g.seed);
    c.validate();
    return c;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

template <typename F>
auto with_precision(const std::string& precision, F&& f) {
  if (precision == "f64") return f(double{});
  return f(float{});
}

Image to_image(const std::vector<float>& rgb, std::size_t width, std::size_t height) {
  Image img(width, height, 3);
  img.data = rgb;
  return img;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct FitOptions {
  std::string scene_dir;
  std::string resume;
  std::optional<std::size_t> val_view;
};

template <typename T>
int fit(const GlobalOptions& g, const FitOptions& o) {
  std::optional<Checkpoint> resume;
  TrainConfig base;
  if (!o.resume.empty()) {
    resume = load_checkpoint(o.resume);
    base = checkpoint_config(*resume);
  }
  const TrainConfig config = build_config(g, base);
  const Scene scene = load_blender_scene(o.scene_dir, config.background);
  std::vector<std::size_t> train_views;
  for (std::size_t v = 0; v < scene.size(); ++v) {
    if (!o.val_view || v != *o.val_view) train_views.push_back(v);
  }
  if (o.val_view && (*o.val_view >= scene.size() || train_views.empty())) {
    throw UsageError("--val-view " + std::to_string(*o.val_view) + " needs a scene with more than that many views");
  }
  const Scene train_scene = scene.subset(train_views);

  const fs::path out = g.out_dir;
  fs::create_directories(out);
  write_text(out / "config.json", config.to_json().dump(2) + "\n");

  Trainer<T> trainer(config, train_scene);
  if (resume) trainer.restore(*resume);
  std::ofstream log(out / "train_log.txt", resume ? std::ios::app : std::ios::trunc);

  double best_val = -1.0;
  auto on_log = [&](const Trainer<T>& t) {
    std::cout << format_log(t.history().back()) << std::endl;
    if (!o.val_view) return;
    const std::size_t view = *o.val_view;
    const auto report = evaluate(t.model(), t.occupancy_ptr(), scene, std::span<const std::size_t>(&view, 1));
    const double val = *report.mean_psnr();
    log << "val_view=" << view << " iter=" << t.iteration() << " val_psnr=" << val << std::endl;
    if (val > best_val) {
      best_val = val;
      save_checkpoint(t.checkpoint(), out / "best.ckpt");
    }
  };

  const std::uint64_t every = config.checkpoint_every;
  while (trainer.iteration() < config.iterations) {
    std::uint64_t stop = config.iterations;
    if (every > 0) stop = std::min(stop, (trainer.iteration() / every + 1) * every);
    trainer.train_until(stop, &log, on_log);
    if (every > 0 && trainer.iteration() % every == 0 && trainer.iteration() < config.iterations) {
      save_checkpoint(trainer.checkpoint(), out / ("checkpoint_" + std::to_string(trainer.iteration()) + ".ckpt"));
    }
  }
  save_checkpoint(trainer.checkpoint(), out / "model.ckpt");
  std::cout << "wrote " << (out / "model.ckpt").string() << " after " << trainer.iteration() << " steps\n";
  if (o.val_view) std::cout << "best val_psnr=" << best_val << " in " << (out / "best.ckpt").string() << "\n";
  return 0;
}

struct RenderCommand {
  std::string checkpoint;
  std::string poses;
  std::size_t views = 8;
  std::size_t width = 64;
  std::size_t height = 64;
  double radius = 2.0;
  double elevation_deg = 30.0;
  double fov = 0.6911112070083618;
};

std::vector<Camera> render_cameras(const RenderCommand& o) {
  std::vector<Camera> cams;
  if (!o.poses.empty()) {
    SceneManifest m = parse_manifest(read_text(o.poses));
    m.width = o.width;
    m.height = o.height;
    for (std::size_t i = 0; i < m.frames.size(); ++i) cams.push_back(m.camera(i));
    return cams;
  }
  const double elev = o.elevation_deg * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < o.views; ++i) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(o.views);
    const Vec3 eye{o.radius * std::cos(elev) * std::cos(phi), o.radius * std::cos(elev) * std::sin(phi),
                   o.radius * std::sin(elev)};
    Camera cam;
    cam.width = o.width;
    cam.height = o.height;
    cam.focal = Camera::focal_from_fov(o.width, o.fov);
    cam.pose = look_at_origin(eye);
    cams.push_back(cam);
  }
  return cams;
}

template <typename T>
int render(const GlobalOptions& g, const RenderCommand& o, const Checkpoint& ck) {
  const auto loaded = load_model<T>(ck);
  const fs::path out = g.out_dir;
  fs::create_directories(out);
  const auto cams = render_cameras(o);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "render_%03zu.png", i);
    write_png(out / name, to_image(render_view(loaded.model, loaded.occupancy_ptr(), cams[i]), cams[i].width,
                                   cams[i].height));
  }
  std::cout << "wrote " << cams.size() << " views to " << out.string() << "\n";
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  std::string scene_dir;
  std::string split = "test";
};

template <typename T>
int eval(const GlobalOptions& g, const EvalOptions& o, const Checkpoint& ck) {
  const auto loaded = load_model<T>(ck);
  const TrainConfig config = loaded.model.config();
  const Scene scene = load_blender_scene(o.scene_dir, config.background, "transforms_" + o.split + ".json");
  std::vector<std::size_t> views(scene.size());
  for (std::size_t i = 0; i < views.size(); ++i) views[i] = i;
  const auto report = evaluate(loaded.model, loaded.occupancy_ptr(), scene, views);
  const fs::path out = g.out_dir;
  fs::create_directories(out);
  report.write(out / ("metrics_" + o.split));
  std::cout << report.to_text();
  return 0;
}

struct CompareOptions {
  std::string scene_dir;
  std::size_t k = 4;
  std::string split = "train";
};

template <typename T>
int compare(const GlobalOptions& g, const CompareOptions& o) {
  const TrainConfig config = build_config(g, TrainConfig{});
  const Scene scene = load_blender_scene(o.scene_dir, config.background, "transforms_" + o.split + ".json");
  if (o.k == 0 || scene.size() < o.k + 4) {
    throw UsageError("compare needs at least k+4 = " + std::to_string(o.k + 4) + " views, scene has " +
                     std::to_string(scene.size()));
  }
  const fs::path out = g.out_dir;
  fs::create_directories(out);
  std::ofstream log(out / "compare_log.txt");
  const auto cmp = compare_prior<T>(config, scene, o.k, &log);
  write_text(out / "compare.txt", cmp.to_text());
  write_text(out / "compare.json", cmp.to_json().dump(2) + "\n");
  std::cout << cmp.to_text();
  return 0;
}

struct VizOptions {
  std::string checkpoint;
  std::vector<std::size_t> planes;
  std::vector<std::size_t> channels;
};

template <typename T>
int viz_features(const GlobalOptions& g, const VizOptions& o, const Checkpoint& ck) {
  const auto loaded = load_model<T>(ck);
  NoGradScope<T> no_grad;
  const auto field = loaded.model.field();
  const std::size_t ch = loaded.model.config().feature_channels;
  std::vector<std::size_t> planes = o.planes, channels = o.channels;
  if (planes.empty()) planes = {0, 1, 2};
  if (channels.empty()) {
    for (std::size_t c = 0; c < ch; ++c) channels.push_back(c);
  }
  for (auto a : planes) {
    if (a > 2) throw UsageError("plane index " + std::to_string(a) + " out of range 0..2");
  }
  for (auto c : channels) {
    if (c >= ch) throw UsageError("channel " + std::to_string(c) + " out of range (model has " + std::to_string(ch) + ")");
  }
  const fs::path out = fs::path(g.out_dir) / "features";
  fs::create_directories(out);
  for (auto a : planes) {
    for (auto c : channels) {
      export_feature_plane(field.matrices[a], c,
                           out / ("plane" + std::to_string(a) + "_ch" + std::to_string(c) + ".png"));
    }
  }
  std::cout << "wrote " << planes.size() * channels.size() << " feature images to " << out.string() << "\n";
  return 0;
}

struct ToyOptions {
  std::string dir;
  std::string preset = "single";
  std::size_t views = 8;
  std::size_t test_views = 8;
  std::size_t size = 64;
};

int make_toy(const GlobalOptions& g, const ToyOptions& o) {
  ToySceneSpec spec = o.preset == "three" ? ToySceneSpec::three_spheres() : ToySceneSpec::single_sphere();
  spec.width = spec.height = o.size;
  const std::uint64_t seed = g.seed.value_or(0);
  const auto train = make_toy_scene(spec, o.views, derive_seed(seed, 0), "train");
  const auto test = make_toy_scene(spec, o.test_views, derive_seed(seed, 1), "test");
  save_blender_scene(o.dir, train.manifest, train.rgba, "transforms_train.json");
  save_blender_scene(o.dir, test.manifest, test.rgba, "transforms_test.json");
  std::cout << "wrote " << o.views << " train and " << o.test_views << " test views to " << o.dir << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Sparse-view radiance fields with untrained convolutional generators"};
  app.fallthrough();
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--seed", g.seed, "Base seed; noise, parameter and data seeds derive from it");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  auto* precision_opt = app.add_option("--precision", g.precision, "Scalar type for training")
                            ->check(CLI::IsMember({"f32", "f64"}))
                            ->capture_default_str();
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Config override section.key=value (repeatable)")->allow_extra_args(false);

  FitOptions fo;
  auto* fit_cmd = app.add_subcommand("fit", "Optimize a model on a scene directory");
  fit_cmd->add_option("scene_dir", fo.scene_dir, "Directory holding transforms_train.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  fit_cmd->add_option("--resume", fo.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  fit_cmd->add_option("--val-view", fo.val_view, "Hold out this view and keep the best checkpoint by its PSNR");

  RenderCommand ro;
  auto* render_cmd = app.add_subcommand("render", "Render novel views from a checkpoint");
  render_cmd->add_option("checkpoint", ro.checkpoint)->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--poses", ro.poses, "Transforms JSON with camera poses")->check(CLI::ExistingFile);
  render_cmd->add_option("--views", ro.views, "Views on the circular path")->capture_default_str();
  render_cmd->add_option("--width", ro.width)->capture_default_str();
  render_cmd->add_option("--height", ro.height)->capture_default_str();
  render_cmd->add_option("--radius", ro.radius, "Circular path radius")->capture_default_str();
  render_cmd->add_option("--elevation", ro.elevation_deg, "Circular path elevation in degrees")->capture_default_str();
  render_cmd->add_option("--fov", ro.fov, "Horizontal field of view in radians")->capture_default_str();

  EvalOptions eo;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a scene split");
  eval_cmd->add_option("checkpoint", eo.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("scene_dir", eo.scene_dir)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--split", eo.split, "Reads transforms_<split>.json")->capture_default_str();

  CompareOptions co;
  auto* compare_cmd = app.add_subcommand("compare", "Generator prior against direct grids on k sparse views");
  compare_cmd->add_option("scene_dir", co.scene_dir)->required()->check(CLI::ExistingDirectory);
  compare_cmd->add_option("-k", co.k, "Training views")->capture_default_str();
  compare_cmd->add_option("--split", co.split, "Reads transforms_<split>.json")->capture_default_str();

  VizOptions vo;
  auto* viz_cmd = app.add_subcommand("viz-features", "Export factor planes as grayscale PNGs");
  viz_cmd->add_option("checkpoint", vo.checkpoint)->required()->check(CLI::ExistingFile);
  viz_cmd->add_option("--planes", vo.planes, "Plane indices (default all)")->delimiter(',');
  viz_cmd->add_option("--channels", vo.channels, "Channel indices (default all)")->delimiter(',');

  ToyOptions to;
  auto* toy_cmd = app.add_subcommand("make-toy", "Write a procedural sphere scene");
  toy_cmd->add_option("dir", to.dir)->required();
  toy_cmd->add_option("--preset", to.preset)->check(CLI::IsMember({"single", "three"}))->capture_default_str();
  toy_cmd->add_option("--views", to.views, "Training views")->capture_default_str();
  toy_cmd->add_option("--test-views", to.test_views, "Test views")->capture_default_str();
  toy_cmd->add_option("--size", to.size, "Image width and height")->capture_default_str();

  const std::vector<CLI::App*> commands{fit_cmd, render_cmd, eval_cmd, compare_cmd, viz_cmd, toy_cmd};
  auto usage = [&]() {
    for (auto* cmd : commands) {
      if (cmd->parsed()) return cmd->help();
    }
    return app.help();
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return 0;
    }
    std::cerr << "error: " << e.what() << "\n\n" << usage();
    return 1;
  }
  g.precision_given = precision_opt->count() > 0;

  try {
    auto checkpoint_precision_for = [&](const Checkpoint& ck) {
      const std::string p = checkpoint_precision(ck);
      if (g.precision_given && p != g.precision) {
        throw UsageError("checkpoint precision is " + p + " but --precision " + g.precision + " was given");
      }
      return p;
    };
    if (fit_cmd->parsed()) {
      std::string precision = g.precision;
      if (!fo.resume.empty()) precision = checkpoint_precision_for(load_checkpoint(fo.resume));
      return with_precision(precision, [&](auto t) { return fit<decltype(t)>(g, fo); });
    }
    if (render_cmd->parsed()) {
      const auto ck = load_checkpoint(ro.checkpoint);
      return with_precision(checkpoint_precision_for(ck), [&](auto t) { return render<decltype(t)>(g, ro, ck); });
    }
    if (eval_cmd->parsed()) {
      const auto ck = load_checkpoint(eo.checkpoint);
      return with_precision(checkpoint_precision_for(ck), [&](auto t) { return eval<decltype(t)>(g, eo, ck); });
    }
    if (compare_cmd->parsed()) {
      return with_precision(g.precision, [&](auto t) { return compare<decltype(t)>(g, co); });
    }
    if (viz_cmd->parsed()) {
      const auto ck = load_checkpoint(vo.checkpoint);
      return with_precision(checkpoint_precision_for(ck),
                            [&](auto t) { return viz_features<decltype(t)>(g, vo, ck); });
    }
    if (toy_cmd->parsed()) return make_toy(g, to);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << usage();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << usage();
  return 1;
}

}  // namespace zerorf
