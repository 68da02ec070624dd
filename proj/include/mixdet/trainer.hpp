#pragma once

#include <torch/torch.h>

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mixdet/config.hpp"
#include "mixdet/datasets.hpp"
#include "mixdet/metrics.hpp"
#include "mixdet/model.hpp"
#include "mixdet/objective.hpp"

namespace mixdet {

/// One line of the training log. Loss fields are the unweighted breakdown
/// terms plus the weighted total; eval is present only on evaluation steps.
struct MetricsLogRow {
  int64_t step = 0;
  double recon = 0, overlap = 0, pres = 0, where = 0, depth = 0, cat = 0,
         what = 0, total = 0;
  double pres_prior = 1.0;
  double alpha_overlap = 0.0;
  double lr = 0.0;
  std::optional<EvalReport> eval;
};

/// Parse a metrics log (newline-delimited records). Rows must be strictly
/// increasing in step.
std::vector<MetricsLogRow> read_metrics_log(const std::string& path);

struct TrainResult {
  int64_t final_step = 0;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string report_path;
  std::optional<EvalReport> last_eval;
};

/// Owns one training stream: model, adaptive-moment optimizer with separate
/// encoder / decoder / mixture groups, sampling rng, and the output
/// directory. Data order is a fixed per-epoch permutation derived from
/// (seed, epoch), so a restored checkpoint continues the exact trajectory.
class Trainer {
 public:
  /// Fresh state: seeded weight init, optimizer at step 0.
  Trainer(const Config& cfg, Dataset data, std::string out_dir,
          std::optional<Dataset> eval_data = std::nullopt);

  /// Restore model, optimizer, rng, and step from a checkpoint; the stored
  /// config governs the continued run.
  Trainer(const std::string& checkpoint_path, Dataset data, std::string out_dir,
          std::optional<Dataset> eval_data = std::nullopt);

  /// Train until cfg.train.iterations (or `until`, if smaller). Logs every
  /// log_interval steps, checkpoints every ckpt_interval steps and at the
  /// stopping step, evaluates every eval_interval steps when an eval set was
  /// given, and writes the final report when the full budget completes.
  /// A non-finite loss dumps the offending batch and breakdown under
  /// out_dir and raises NumericalError.
  TrainResult run(std::optional<int64_t> until = std::nullopt);

  SceneModel& model() { return model_; }
  const Config& config() const { return cfg_; }
  int64_t step() const { return step_; }

 private:
  void init_data();
  void build_optimizer();
  std::pair<torch::Tensor, std::vector<int64_t>> batch_at(int64_t step);
  std::string checkpoint_at(int64_t step);

  Config cfg_;
  Dataset data_;
  std::optional<Dataset> eval_data_;
  std::string out_dir_;
  SceneModel model_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_;
  torch::Generator gen_;
  int64_t step_ = 0;
  torch::Tensor cache_;  // [n, 1, H, W] uint8 copy of the training images
  int64_t epoch_ = -1;
  std::vector<int64_t> perm_;
};

/// One-call form of the loop above.
TrainResult train(const Config& cfg, Dataset data, const std::string& out_dir,
                  std::optional<Dataset> eval_data = std::nullopt);

}  // namespace mixdet
