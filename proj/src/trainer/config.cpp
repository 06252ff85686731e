#include "zerorf/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace zerorf {

using nlohmann::json;

std::string to_string(ModelMode mode) {
  switch (mode) {
    case ModelMode::kZeroRFVM: return "zerorf-vm";
    case ModelMode::kZeroRFTriplane: return "zerorf-triplane";
    case ModelMode::kDirectVM: return "direct-vm";
    case ModelMode::kDirectTriplane: return "direct-triplane";
  }
  return "?";
}

ModelMode parse_model_mode(const std::string& name) {
  for (auto m : {ModelMode::kZeroRFVM, ModelMode::kZeroRFTriplane, ModelMode::kDirectVM, ModelMode::kDirectTriplane}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected zerorf-vm, zerorf-triplane, direct-vm or direct-triplane)");
}

bool uses_generators(ModelMode mode) {
  return mode == ModelMode::kZeroRFVM || mode == ModelMode::kZeroRFTriplane;
}

FactorMode factor_mode(ModelMode mode) {
  return mode == ModelMode::kZeroRFVM || mode == ModelMode::kDirectVM ? FactorMode::kVM : FactorMode::kTriplane;
}

ModelMode counterpart(ModelMode mode) {
  switch (mode) {
    case ModelMode::kZeroRFVM: return ModelMode::kDirectVM;
    case ModelMode::kZeroRFTriplane: return ModelMode::kDirectTriplane;
    case ModelMode::kDirectVM: return ModelMode::kZeroRFVM;
    case ModelMode::kDirectTriplane: return ModelMode::kZeroRFTriplane;
  }
  return mode;
}

GeneratorConfig TrainConfig::resolved_generator() const {
  GeneratorConfig g = generator;
  g.out_channels = feature_channels;
  g.noise_resolution = grid_resolution / g.stage_scales.back();
  return g;
}

void TrainConfig::set_seed(std::uint64_t base) {
  noise_seed = base;
  param_seed = base + 1;
  data_seed = base + 2;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (rays_per_batch == 0) fail("train.rays_per_batch must be > 0");
  if (log_every == 0) fail("train.log_every must be > 0");
  if (occupancy && occupancy_every == 0) fail("train.occupancy_every must be > 0");
  if (occupancy_resolution == 0) fail("train.occupancy_resolution must be > 0");
  if (grid_resolution < 2) fail("model.grid_resolution must be >= 2");
  if (feature_channels == 0) fail("model.feature_channels must be > 0");
  if (!(half_extent > 0)) fail("model.half_extent must be positive");
  if (!(direct_init_std >= 0)) fail("model.direct_init_std must be >= 0");
  if (decoder.hidden == 0) fail("model.decoder_hidden must be > 0");
  if (decoder.sh_degree < 1 || decoder.sh_degree > kMaxShDegree) fail("model.sh_degree must be in 1..4");
  if (samples_per_ray == 0) fail("render.samples_per_ray must be > 0");
  if (!(lr_start > 0) || !(lr_end > 0)) fail("optim learning rates must be positive");
  if (uses_generators(mode)) {
    const std::size_t up = generator.stage_scales.empty() ? 0 : generator.stage_scales.back();
    if (up == 0 || grid_resolution % up != 0) {
      fail("model.grid_resolution " + std::to_string(grid_resolution) + " must be a multiple of the generator's " +
           std::to_string(up) + "x upsampling");
    }
    resolved_generator().validate();
  }
}

json TrainConfig::to_json() const {
  json j;
  j["train"] = {{"iterations", iterations},
                {"rays_per_batch", rays_per_batch},
                {"log_every", log_every},
                {"occupancy", occupancy},
                {"occupancy_every", occupancy_every},
                {"occupancy_warmup", occupancy_warmup},
                {"occupancy_resolution", occupancy_resolution},
                {"checkpoint_every", checkpoint_every}};
  j["model"] = {{"mode", to_string(mode)},
                {"grid_resolution", grid_resolution},
                {"feature_channels", feature_channels},
                {"half_extent", half_extent},
                {"zero_noise", zero_noise},
                {"decoder_hidden", decoder.hidden},
                {"sh_degree", decoder.sh_degree},
                {"density_bias", decoder.density_bias},
                {"direct_init_std", direct_init_std}};
  j["generator"] = {{"arch", to_string(generator_arch)},
                    {"noise_channels", generator.noise_channels},
                    {"stage_scales", generator.stage_scales},
                    {"blocks_per_stage", generator.blocks_per_stage},
                    {"base_width", generator.base_width},
                    {"min_width", generator.min_width},
                    {"deep_decoder_norm", generator.deep_decoder_norm}};
  j["render"] = {{"samples_per_ray", samples_per_ray},
                 {"background", background},
                 {"early_termination", early_termination}};
  j["optim"] = {{"lr_start", lr_start},   {"lr_end", lr_end}, {"beta1", adam.beta1},
                {"beta2", adam.beta2},    {"eps", adam.eps},  {"weight_decay", adam.weight_decay}};
  j["seeds"] = {{"noise", noise_seed}, {"params", param_seed}, {"data", data_seed}};
  return j;
}

namespace {

// Copies j[section][key] into `out` when present, recording the key as seen.
class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {
    if (!root.is_object()) throw std::invalid_argument("config: top level must be an object");
  }

  template <typename V>
  void read(const std::string& section, const std::string& key, V& out) {
    seen_.insert(section + "." + key);
    if (!root_.contains(section)) return;
    const json& s = root_.at(section);
    if (!s.contains(key)) return;
    try {
      out = s.at(key).get<V>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: " + section + "." + key + " has the wrong type (" +
                                  s.at(key).dump() + ")");
    }
  }

  void check_unknown() const {
    for (const auto& [section, body] : root_.items()) {
      if (!body.is_object()) throw std::invalid_argument("config: section '" + section + "' must be an object");
      for (const auto& [key, value] : body.items()) {
        if (!seen_.count(section + "." + key)) {
          throw std::invalid_argument("config: unknown key '" + section + "." + key + "'");
        }
      }
    }
  }

 private:
  const json& root_;
  std::set<std::string> seen_;
};

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  Reader r(j);
  r.read("train", "iterations", c.iterations);
  r.read("train", "rays_per_batch", c.rays_per_batch);
  r.read("train", "log_every", c.log_every);
  r.read("train", "occupancy", c.occupancy);
  r.read("train", "occupancy_every", c.occupancy_every);
  r.read("train", "occupancy_warmup", c.occupancy_warmup);
  r.read("train", "occupancy_resolution", c.occupancy_resolution);
  r.read("train", "checkpoint_every", c.checkpoint_every);
  std::string mode = to_string(c.mode);
  r.read("model", "mode", mode);
  c.mode = parse_model_mode(mode);
  r.read("model", "grid_resolution", c.grid_resolution);
  r.read("model", "feature_channels", c.feature_channels);
  r.read("model", "half_extent", c.half_extent);
  r.read("model", "zero_noise", c.zero_noise);
  r.read("model", "decoder_hidden", c.decoder.hidden);
  r.read("model", "sh_degree", c.decoder.sh_degree);
  r.read("model", "density_bias", c.decoder.density_bias);
  r.read("model", "direct_init_std", c.direct_init_std);
  std::string arch = to_string(c.generator_arch);
  r.read("generator", "arch", arch);
  c.generator_arch = parse_generator_arch(arch);
  r.read("generator", "noise_channels", c.generator.noise_channels);
  r.read("generator", "stage_scales", c.generator.stage_scales);
  r.read("generator", "blocks_per_stage", c.generator.blocks_per_stage);
  r.read("generator", "base_width", c.generator.base_width);
  r.read("generator", "min_width", c.generator.min_width);
  r.read("generator", "deep_decoder_norm", c.generator.deep_decoder_norm);
  r.read("render", "samples_per_ray", c.samples_per_ray);
  r.read("render", "background", c.background);
  r.read("render", "early_termination", c.early_termination);
  r.read("optim", "lr_start", c.lr_start);
  r.read("optim", "lr_end", c.lr_end);
  r.read("optim", "beta1", c.adam.beta1);
  r.read("optim", "beta2", c.adam.beta2);
  r.read("optim", "eps", c.adam.eps);
  r.read("optim", "weight_decay", c.adam.weight_decay);
  r.read("seeds", "noise", c.noise_seed);
  r.read("seeds", "params", c.param_seed);
  r.read("seeds", "data", c.data_seed);
  r.check_unknown();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void TrainConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw std::invalid_argument("override '" + assignment + "' must look like section.key=value");
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json j = to_json();
  if (!j.contains(section) || !j[section].contains(key)) {
    throw std::invalid_argument("override: unknown key '" + section + "." + key + "'");
  }
  j[section][key] = value;
  *this = from_json(j);
}

TrainConfig TrainConfig::paper_scale() {
  TrainConfig c;
  c.iterations = 10000;
  c.grid_resolution = 320;
  c.samples_per_ray = 1024;
  c.generator = GeneratorConfig::paper_scale();
  return c;
}

}  // namespace zerorf
