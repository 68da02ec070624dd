#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixdet/config.hpp"
#include "mixdet/generation.hpp"
#include "mixdet/inference.hpp"
#include "mixdet/latents.hpp"

namespace mixdet {

/// Everything one training forward pass produces: posterior parameters (the
/// glimpse-dependent ones from the rendered Monte Carlo sample), the sampled
/// latents behind the reconstruction, the composited scene, and the per-cell
/// conditional KL terms averaged over mc_samples.
struct ForwardOutput {
  PosteriorParams post;
  LatentGrid latents;
  RenderResult render;
  torch::Tensor kl_cat_cells;   // [B, N]
  torch::Tensor kl_what_cells;  // [B, N]
  torch::Tensor overlap;        // scalar
};

/// Parameter lists for per-group learning-rate multipliers.
struct ParamGroups {
  std::vector<torch::Tensor> encoder;
  std::vector<torch::Tensor> decoder;
  std::vector<torch::Tensor> mixture;
};

/// The full detector: encoder, glimpse decoder, and the learnable mixture
/// prior over appearance latents.
class SceneModelImpl : public torch::nn::Module {
 public:
  explicit SceneModelImpl(const ModelConfig& cfg);

  /// Training pass. Sampling order: grid posterior, then presence
  /// (straight-through binary, hard by default), depth, and per Monte Carlo
  /// sample the box, glimpse, category (relaxed unless hard_cat_samples),
  /// and appearance.
  /// Glimpses are cropped at the posterior-mean boxes unless
  /// sample_where_for_glimpse. The reconstruction uses sample 0.
  ForwardOutput forward(const torch::Tensor& x, torch::Generator& gen);

  /// Mode-based inference, no sampling: posterior means for the Gaussian
  /// latents, argmax one-hot category, presence thresholded at 1/2. Wrap in
  /// NoGradGuard / eval() as appropriate; repeated calls are bitwise equal.
  std::pair<PosteriorParams, LatentGrid> encode_modes(const torch::Tensor& x);

  /// Decode and composite a latent grid (e.g. after manipulation).
  RenderResult render_latents(const LatentGrid& grid);

  ParamGroups param_groups() const;

  const ModelConfig& config() const { return cfg_; }

  InferenceNet encoder{nullptr};
  GlimpseDecoder decoder{nullptr};
  MixturePrior mixture{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(SceneModel);

inline constexpr uint32_t kCheckpointVersion = 1;

/// Header fields of a checkpoint, readable without instantiating the model.
struct CheckpointMeta {
  Config config;
  int64_t step = 0;
  bool has_optimizer = false;
};

/// Write a checkpoint: model parameters keyed by module path, optional
/// optimizer state, rng state, the config, and the step, wrapped in a
/// versioned, checksummed container.
void save_checkpoint(const std::string& path, const SceneModel& model,
                     const torch::optim::Optimizer* optimizer,
                     const torch::Generator& gen, const Config& cfg, int64_t step);

/// Validate the container (magic, version, checksum) and return the stored
/// config and step. CheckpointError on version mismatch or corruption,
/// IoError when unreadable.
CheckpointMeta read_checkpoint_meta(const std::string& path);

/// Restore parameters (and optimizer/rng state when given) into an
/// already-constructed model. Returns the stored meta. CheckpointError when
/// the container is bad or the stored tensors do not fit the model.
CheckpointMeta load_checkpoint(const std::string& path, SceneModel& model,
                               torch::optim::Optimizer* optimizer = nullptr,
                               torch::Generator* gen = nullptr);

}  // namespace mixdet
