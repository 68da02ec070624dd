#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixdet/errors.hpp"

namespace mixdet {

/// Shape of the model: grid layout, latent dimensions, glimpse geometry.
struct ModelConfig {
  int64_t image_height = 128;
  int64_t image_width = 128;
  int64_t grid_h = 16;
  int64_t grid_w = 16;
  int64_t what_dim = 256;     // appearance latent dimension
  int64_t num_clusters = 10;  // mixture components / categories
  int64_t glimpse_h = 32;
  int64_t glimpse_w = 32;
  double anchor_h = 72.0;  // base box size in pixels
  double anchor_w = 72.0;
  int64_t mc_samples = 1;
  double gumbel_temperature = 1.0;
  std::string backbone = "resnet18";  // "resnet18" or "tiny"
  bool sample_where_for_glimpse = false;
  bool hard_cat_samples = false;
  bool hard_pres_samples = true;

  int64_t cells() const { return grid_h * grid_w; }
  double cell_h() const { return double(image_height) / double(grid_h); }
  double cell_w() const { return double(image_width) / double(grid_w); }

  void validate() const;
};

struct LossWeights {
  double alpha_recon = 8.0;
  double alpha_overlap = 2.0;
  double alpha_pres = 1.0;
  double alpha_where = 1.0;
  double alpha_depth = 1.0;
  double alpha_cat = 1.0;
  double alpha_what = 1.0;

  void validate() const;
};

/// Piecewise ramp between two values over a step interval.
struct Schedule {
  enum class Interp { linear, exponential };

  std::string name;
  double start_value = 0.0;
  double end_value = 0.0;
  int64_t start_step = 0;
  int64_t end_step = 0;
  Interp interpolation = Interp::linear;

  void validate() const;

  bool operator==(const Schedule&) const = default;
};

double schedule_value(const Schedule& s, int64_t step);

struct TrainConfig {
  int64_t batch_size = 16;
  double lr = 1e-4;
  int64_t iterations = 10000;
  int64_t log_interval = 100;
  int64_t ckpt_interval = 5000;
  int64_t eval_interval = 10000;
  int64_t seed = 0;
  double grad_clip = 1.0;
  double lr_mult_encoder = 1.0;
  double lr_mult_decoder = 1.0;
  double lr_mult_mixture = 1.0;
  int64_t num_threads = 1;

  void validate() const;
};

struct Config {
  ModelConfig model;
  LossWeights loss;
  std::vector<Schedule> schedules;
  TrainConfig train;

  void validate() const;

  /// Schedule by name, or nullptr when none is configured.
  const Schedule* find_schedule(const std::string& name) const;
  Schedule* find_schedule(const std::string& name);
};

/// Defaults with the two standard ramps (pres_prior, alpha_overlap) attached.
Config default_config();

/// Parse a YAML config file, applying `overrides` ("model.num_clusters=5", ...)
/// on top. Missing fields keep defaults; unknown keys are ConfigError.
Config load_config(const std::string& path,
                   const std::vector<std::string>& overrides = {});

/// Same, from an in-memory YAML document.
Config parse_config(const std::string& yaml_text,
                    const std::vector<std::string>& overrides = {});

std::string to_yaml(const Config& cfg);
void save_config(const Config& cfg, const std::string& path);

bool operator==(const ModelConfig& a, const ModelConfig& b);
bool operator==(const LossWeights& a, const LossWeights& b);
bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const Config& a, const Config& b);

}  // namespace mixdet
