#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "zerorf/checkpoint.hpp"
#include "zerorf/config.hpp"
#include "zerorf/metrics.hpp"
#include "zerorf/model.hpp"
#include "zerorf/optim.hpp"
#include "zerorf/renderer.hpp"
#include "zerorf/scene.hpp"

namespace zerorf {

struct LogEntry {
  std::uint64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_psnr = 0.0;
};

// "iter=<n> lr=<v> loss=<v> train_psnr=<v>"
std::string format_log(const LogEntry& entry);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t iteration, double lr, double max_abs_grad, const std::string& what);
  std::uint64_t iteration() const { return iteration_; }
  double lr() const { return lr_; }
  double max_abs_grad() const { return max_abs_grad_; }

 private:
  std::uint64_t iteration_;
  double lr_;
  double max_abs_grad_;
};

// Every pixel of a scene as a ray with its target color.
struct PixelSet {
  std::vector<Ray> rays;
  std::vector<float> colors;  // rgb per ray
  std::size_t size() const { return rays.size(); }
};
PixelSet scene_pixels(const Scene& scene);

// Render options implied by a config and an optional occupancy grid.
RenderOptions render_options(const TrainConfig& config, const OccupancyGrid* occupancy);

// Full image (H*W*3, row-major) from a model, without recording gradients.
template <typename T>
std::vector<float> render_view(const RadianceModel<T>& model, const OccupancyGrid* occupancy, const Camera& camera);

// Per-scene optimization state: model, optimizer moments, ray sampler,
// occupancy grid, iteration counter and log history.
template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& config, const Scene& scene);

  // One optimization step. Throws TrainingDiverged on a non-finite loss or
  // gradient, with nothing updated.
  void step();
  // Steps until iteration() == target, writing one log line per log_every
  // steps to `log` when given.
  void train_until(std::uint64_t target, std::ostream* log = nullptr,
                   const std::function<void(const Trainer&)>& on_log = {});
  void train(std::ostream* log = nullptr) { train_until(config_.iterations, log); }

  std::uint64_t iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  const RadianceModel<T>& model() const { return model_; }
  const AdamW<T>& optimizer() const { return *optimizer_; }
  const OccupancyGrid& occupancy() const { return occupancy_; }
  const OccupancyGrid* occupancy_ptr() const { return config_.occupancy ? &occupancy_ : nullptr; }
  const std::vector<LogEntry>& history() const { return history_; }
  double last_loss() const { return last_loss_; }

  // Loss over the given pixels with the current parameters, no update.
  double loss_on(std::span<const std::size_t> pixels) const;
  std::vector<float> render(const Camera& camera) const;

  Checkpoint checkpoint() const;
  // Restores a checkpoint written by a trainer with the same config.
  void restore(const Checkpoint& checkpoint);

  void refresh_occupancy();

 private:
  TrainConfig config_;
  PixelSet pixels_;
  RadianceModel<T> model_;
  std::unique_ptr<AdamW<T>> optimizer_;
  std::mt19937_64 rng_;
  OccupancyGrid occupancy_;
  std::uint64_t iteration_ = 0;
  std::vector<LogEntry> history_;
  double last_loss_ = 0.0;
};

// Model and occupancy as stored in a checkpoint.
template <typename T>
struct LoadedModel {
  RadianceModel<T> model;
  OccupancyGrid occupancy;
  bool use_occupancy = true;
  std::uint64_t iteration = 0;
  const OccupancyGrid* occupancy_ptr() const { return use_occupancy ? &occupancy : nullptr; }
};
TrainConfig checkpoint_config(const Checkpoint& checkpoint);
std::string checkpoint_precision(const Checkpoint& checkpoint);
template <typename T>
LoadedModel<T> load_model(const Checkpoint& checkpoint);

// PSNR/SSIM on the listed views; view names are file path stems.
template <typename T>
MetricReport evaluate(const RadianceModel<T>& model, const OccupancyGrid* occupancy, const Scene& scene,
                      std::span<const std::size_t> views);

struct PriorComparison {
  std::vector<std::size_t> train_views;
  std::vector<std::size_t> held_out_views;
  ModelMode prior_mode = ModelMode::kZeroRFVM;
  ModelMode direct_mode = ModelMode::kDirectVM;
  MetricReport prior;
  MetricReport direct;
  double delta_psnr() const;
  double delta_ssim() const;
  std::string to_text() const;
  nlohmann::json to_json() const;
};

// Trains the generator-parametrized model and its direct counterpart on the
// same k views (k-means over camera positions) and evaluates both on the
// remaining views.
template <typename T>
PriorComparison compare_prior(const TrainConfig& config, const Scene& scene, std::size_t k,
                              std::ostream* log = nullptr);

}  // namespace zerorf
