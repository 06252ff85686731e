#include "zerorf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace zerorf {

using nlohmann::json;

std::string format_log(const LogEntry& e) {
  std::ostringstream out;
  out << "iter=" << e.iteration << " lr=" << std::setprecision(6) << e.lr << " loss=" << std::setprecision(6)
      << e.loss << " train_psnr=" << std::fixed << std::setprecision(3) << e.train_psnr;
  return out.str();
}

TrainingDiverged::TrainingDiverged(std::uint64_t iteration, double lr, double max_abs_grad, const std::string& what)
    : std::runtime_error(what + " at iteration " + std::to_string(iteration) + " (lr=" + std::to_string(lr) +
                         ", max |grad|=" + std::to_string(max_abs_grad) + ")"),
      iteration_(iteration),
      lr_(lr),
      max_abs_grad_(max_abs_grad) {}

PixelSet scene_pixels(const Scene& scene) {
  PixelSet set;
  for (std::size_t v = 0; v < scene.size(); ++v) {
    const Camera cam = scene.camera(v);
    std::vector<std::size_t> ids(cam.width * cam.height);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    auto rays = generate_rays(cam, ids);
    set.rays.insert(set.rays.end(), rays.begin(), rays.end());
    const auto& img = scene.images[v];
    set.colors.insert(set.colors.end(), img.data.begin(), img.data.end());
  }
  return set;
}

RenderOptions render_options(const TrainConfig& config, const OccupancyGrid* occupancy) {
  RenderOptions o;
  o.samples_per_ray = config.samples_per_ray;
  o.half_extent = config.half_extent;
  o.background = config.background;
  o.occupancy = occupancy;
  o.early_termination = config.early_termination;
  return o;
}

namespace {

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

// Step length of the longest chord through the box.
double max_sample_step(const TrainConfig& config) {
  return 2.0 * config.half_extent * std::sqrt(3.0) / static_cast<double>(config.samples_per_ray);
}

template <typename T>
std::vector<float> render_field(const RadianceModel<T>& model, const FactorizedField<T>& field,
                                const OccupancyGrid* occupancy, const Camera& camera) {
  const auto& config = model.config();
  DensityFn<T> density = config.early_termination ? model.density_fn(field) : DensityFn<T>{};
  return render_image<T>(camera, model.sample_fn(field), render_options(config, occupancy), 4096, density);
}

}  // namespace

template <typename T>
std::vector<float> render_view(const RadianceModel<T>& model, const OccupancyGrid* occupancy, const Camera& camera) {
  NoGradScope<T> no_grad;
  return render_field(model, model.field(), occupancy, camera);
}

template <typename T>
Trainer<T>::Trainer(const TrainConfig& config, const Scene& scene)
    : config_(config),
      pixels_(scene_pixels(scene)),
      model_(config),
      optimizer_(std::make_unique<AdamW<T>>(model_.parameters(), config.adam)),
      rng_(derive_seed(config.data_seed, 0)),
      occupancy_(OccupancyGrid::full(config.occupancy_resolution, config.half_extent)) {
  if (pixels_.size() == 0) throw std::invalid_argument("trainer: scene has no pixels");
}

template <typename T>
void Trainer<T>::step() {
  const double lr = cosine_lr(iteration_, config_.iterations, config_.lr_start, config_.lr_end);
  const std::size_t batch = config_.rays_per_batch;
  std::uniform_int_distribution<std::size_t> pick(0, pixels_.size() - 1);
  std::vector<Ray> rays(batch);
  Tensor<T> target(Shape{batch, 3});
  auto tv = target.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t idx = pick(rng_);
    rays[b] = pixels_.rays[idx];
    for (std::size_t c = 0; c < 3; ++c) tv[3 * b + c] = static_cast<T>(pixels_.colors[3 * idx + c]);
  }

  double loss_value = 0.0;
  {
    TapeScope<T> scope;
    const auto field = model_.field();
    DensityFn<T> density = config_.early_termination ? model_.density_fn(field) : DensityFn<T>{};
    auto result = render_rays<T>(rays, model_.sample_fn(field), render_options(config_, occupancy_ptr()), density);
    auto loss = render_loss(result.rgb, target);
    loss_value = static_cast<double>(loss.item());
    if (loss.requires_grad()) scope.backward(loss);
  }
  if (!std::isfinite(loss_value)) {
    const double g = optimizer_->max_abs_grad();
    optimizer_->zero_grad();
    throw TrainingDiverged(iteration_, lr, g, "non-finite loss");
  }
  try {
    optimizer_->step(lr);
  } catch (const NonFiniteGradient& e) {
    const double g = optimizer_->max_abs_grad();
    optimizer_->zero_grad();
    throw TrainingDiverged(iteration_, lr, g, std::string(e.what()));
  }
  optimizer_->zero_grad();
  ++iteration_;
  last_loss_ = loss_value;
  if (config_.occupancy &&
      (iteration_ % config_.occupancy_every == 0 || iteration_ == config_.occupancy_warmup)) {
    refresh_occupancy();
  }
  if (iteration_ % config_.log_every == 0) {
    history_.push_back({iteration_, lr, loss_value, psnr_from_mse(loss_value / 3.0)});
  }
}

template <typename T>
void Trainer<T>::train_until(std::uint64_t target, std::ostream* log, const std::function<void(const Trainer&)>& on_log) {
  while (iteration_ < target) {
    step();
    if (iteration_ % config_.log_every == 0) {
      if (log) *log << format_log(history_.back()) << std::endl;
      if (on_log) on_log(*this);
    }
  }
}

template <typename T>
void Trainer<T>::refresh_occupancy() {
  NoGradScope<T> no_grad;
  const auto field = model_.field();
  update_occupancy<T>(occupancy_, model_.density_fn(field), derive_seed(config_.data_seed, 1000 + iteration_),
                      occupancy_threshold(max_sample_step(config_)));
}

template <typename T>
double Trainer<T>::loss_on(std::span<const std::size_t> pixels) const {
  NoGradScope<T> no_grad;
  const auto field = model_.field();
  const auto fn = model_.sample_fn(field);
  const auto options = render_options(config_, occupancy_ptr());
  double total = 0.0;
  constexpr std::size_t kChunk = 4096;
  for (std::size_t c0 = 0; c0 < pixels.size(); c0 += kChunk) {
    const std::size_t n = std::min(kChunk, pixels.size() - c0);
    std::vector<Ray> rays(n);
    for (std::size_t i = 0; i < n; ++i) rays[i] = pixels_.rays[pixels[c0 + i]];
    const auto result = render_rays<T>(rays, fn, options);
    const auto rgb = result.rgb.values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = static_cast<double>(rgb[3 * i + c]) - pixels_.colors[3 * pixels[c0 + i] + c];
        total += d * d;
      }
    }
  }
  return total / static_cast<double>(pixels.size());
}

template <typename T>
std::vector<float> Trainer<T>::render(const Camera& camera) const {
  return render_view(model_, occupancy_ptr(), camera);
}

namespace {

json history_json(const std::vector<LogEntry>& history) {
  json arr = json::array();
  for (const auto& e : history) arr.push_back({e.iteration, e.lr, e.loss, e.train_psnr});
  return arr;
}

std::vector<LogEntry> history_from_json(const json& arr) {
  std::vector<LogEntry> out;
  for (const auto& e : arr) out.push_back({e[0].get<std::uint64_t>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()});
  return out;
}

void save_occupancy(Checkpoint& ck, const OccupancyGrid& grid) {
  const std::size_t r = grid.resolution;
  ck.put<std::uint8_t>("occupancy", grid.occupied, {r, r, r});
  ck.meta["occupancy"] = {{"resolution", r}, {"half_extent", grid.half_extent}, {"threshold", grid.density_threshold}};
}

OccupancyGrid load_occupancy(const Checkpoint& ck) {
  const auto& m = ck.meta.at("occupancy");
  OccupancyGrid grid = OccupancyGrid::full(m.at("resolution").get<std::size_t>(), m.at("half_extent").get<double>());
  grid.density_threshold = m.at("threshold").get<double>();
  grid.occupied = ck.get<std::uint8_t>("occupancy");
  if (grid.occupied.size() != grid.resolution * grid.resolution * grid.resolution) {
    throw std::runtime_error("checkpoint: occupancy grid size mismatch");
  }
  return grid;
}

}  // namespace

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ck;
  ck.meta["config"] = config_.to_json();
  ck.meta["precision"] = precision_name<T>();
  ck.meta["iteration"] = iteration_;
  ck.meta["last_loss"] = last_loss_;
  ck.meta["history"] = history_json(history_);
  std::ostringstream rng;
  rng << rng_;
  ck.meta["rng"] = rng.str();
  model_.save(ck);
  const auto& state = optimizer_->state();
  ck.meta["optimizer_step"] = state.step;
  const auto& params = optimizer_->params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params[i].tensor.shape();
    ck.put<T>("adam_m/" + params[i].name, state.first_moment[i], shape);
    ck.put<T>("adam_v/" + params[i].name, state.second_moment[i], shape);
  }
  save_occupancy(ck, occupancy_);
  return ck;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ck) {
  if (checkpoint_precision(ck) != precision_name<T>()) {
    throw std::runtime_error("checkpoint precision " + checkpoint_precision(ck) + " does not match " +
                             precision_name<T>());
  }
  json mine = config_.to_json(), theirs = checkpoint_config(ck).to_json();
  mine.erase("train");
  theirs.erase("train");
  if (mine != theirs) throw std::runtime_error("checkpoint was written with a different model configuration");
  model_.load(ck);
  OptimizerState<T> state;
  state.step = ck.meta.at("optimizer_step").get<std::uint64_t>();
  for (const auto& p : optimizer_->params()) {
    state.first_moment.push_back(ck.get<T>("adam_m/" + p.name));
    state.second_moment.push_back(ck.get<T>("adam_v/" + p.name));
  }
  optimizer_->set_state(std::move(state));
  std::istringstream rng(ck.meta.at("rng").get<std::string>());
  rng >> rng_;
  if (!rng) throw std::runtime_error("checkpoint: malformed sampler state");
  occupancy_ = load_occupancy(ck);
  iteration_ = ck.meta.at("iteration").get<std::uint64_t>();
  last_loss_ = ck.meta.at("last_loss").get<double>();
  history_ = history_from_json(ck.meta.at("history"));
}

TrainConfig checkpoint_config(const Checkpoint& ck) {
  if (!ck.meta.contains("config")) throw std::runtime_error("checkpoint has no training configuration");
  return TrainConfig::from_json(ck.meta.at("config"));
}

std::string checkpoint_precision(const Checkpoint& ck) {
  return ck.meta.value("precision", std::string("f32"));
}

template <typename T>
LoadedModel<T> load_model(const Checkpoint& ck) {
  if (checkpoint_precision(ck) != precision_name<T>()) {
    throw std::runtime_error("checkpoint precision " + checkpoint_precision(ck) + " does not match " +
                             precision_name<T>());
  }
  const TrainConfig config = checkpoint_config(ck);
  LoadedModel<T> out{RadianceModel<T>(config), load_occupancy(ck), config.occupancy,
                     ck.meta.value("iteration", std::uint64_t{0})};
  out.model.load(ck);
  return out;
}

template <typename T>
MetricReport evaluate(const RadianceModel<T>& model, const OccupancyGrid* occupancy, const Scene& scene,
                      std::span<const std::size_t> views) {
  MetricReport report;
  if (views.empty()) return report;
  NoGradScope<T> no_grad;
  const auto field = model.field();
  for (std::size_t v : views) {
    if (v >= scene.size()) throw std::out_of_range("evaluate: view " + std::to_string(v) + " out of range");
    const Camera cam = scene.camera(v);
    Image pred(cam.width, cam.height, 3);
    pred.data = render_field(model, field, occupancy, cam);
    const Image& gt = scene.images[v];
    const std::string name = std::filesystem::path(scene.manifest.frames[v].file_path).stem().string();
    report.views.push_back({name, psnr(pred.data, gt.data), ssim(pred, gt)});
  }
  return report;
}

double PriorComparison::delta_psnr() const {
  if (!prior.mean_psnr() || !direct.mean_psnr()) return 0.0;
  return *prior.mean_psnr() - *direct.mean_psnr();
}

double PriorComparison::delta_ssim() const {
  if (!prior.mean_ssim() || !direct.mean_ssim()) return 0.0;
  return *prior.mean_ssim() - *direct.mean_ssim();
}

std::string PriorComparison::to_text() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "train_views=";
  for (std::size_t i = 0; i < train_views.size(); ++i) out << (i ? "," : "") << train_views[i];
  out << "\nview " << to_string(prior_mode) << "_psnr " << to_string(direct_mode) << "_psnr "
      << to_string(prior_mode) << "_ssim " << to_string(direct_mode) << "_ssim\n";
  for (std::size_t i = 0; i < prior.views.size() && i < direct.views.size(); ++i) {
    out << prior.views[i].name << ' ' << prior.views[i].psnr << ' ' << direct.views[i].psnr << ' '
        << prior.views[i].ssim << ' ' << direct.views[i].ssim << '\n';
  }
  if (prior.mean_psnr() && direct.mean_psnr()) {
    out << "mean " << *prior.mean_psnr() << ' ' << *direct.mean_psnr() << ' ' << *prior.mean_ssim() << ' '
        << *direct.mean_ssim() << '\n';
  }
  out << "delta_psnr=" << delta_psnr() << " delta_ssim=" << delta_ssim() << '\n';
  return out.str();
}

json PriorComparison::to_json() const {
  return {{"train_views", train_views},
          {"held_out_views", held_out_views},
          {"prior_mode", to_string(prior_mode)},
          {"direct_mode", to_string(direct_mode)},
          {"prior", prior.to_json()},
          {"direct", direct.to_json()},
          {"delta_psnr", delta_psnr()},
          {"delta_ssim", delta_ssim()}};
}

template <typename T>
PriorComparison compare_prior(const TrainConfig& config, const Scene& scene, std::size_t k, std::ostream* log) {
  if (k == 0 || scene.size() < k + 4) {
    throw std::invalid_argument("compare: need at least k+4 = " + std::to_string(k + 4) + " views, scene has " +
                                std::to_string(scene.size()));
  }
  PriorComparison cmp;
  const auto positions = camera_positions(scene.manifest);
  cmp.train_views = select_views_kmeans(positions, k, config.data_seed);
  for (std::size_t v = 0; v < scene.size(); ++v) {
    if (std::find(cmp.train_views.begin(), cmp.train_views.end(), v) == cmp.train_views.end()) {
      cmp.held_out_views.push_back(v);
    }
  }
  const Scene train_scene = scene.subset(cmp.train_views);
  cmp.prior_mode = uses_generators(config.mode) ? config.mode : counterpart(config.mode);
  cmp.direct_mode = counterpart(cmp.prior_mode);
  auto run = [&](ModelMode mode) {
    TrainConfig c = config;
    c.mode = mode;
    Trainer<T> trainer(c, train_scene);
    if (log) *log << "# " << to_string(mode) << " on views " << json(cmp.train_views).dump() << std::endl;
    trainer.train(log);
    return evaluate(trainer.model(), trainer.occupancy_ptr(), scene, cmp.held_out_views);
  };
  cmp.prior = run(cmp.prior_mode);
  cmp.direct = run(cmp.direct_mode);
  return cmp;
}

#define ZERORF_INSTANTIATE_TRAINER(T)                                                                        \
  template std::vector<float> render_view<T>(const RadianceModel<T>&, const OccupancyGrid*, const Camera&); \
  template class Trainer<T>;                                                                                 \
  template LoadedModel<T> load_model<T>(const Checkpoint&);                                                  \
  template MetricReport evaluate<T>(const RadianceModel<T>&, const OccupancyGrid*, const Scene&,            \
                                    std::span<const std::size_t>);                                           \
  template PriorComparison compare_prior<T>(const TrainConfig&, const Scene&, std::size_t, std::ostream*);

ZERORF_INSTANTIATE_TRAINER(float)
ZERORF_INSTANTIATE_TRAINER(double)

}  // namespace zerorf
