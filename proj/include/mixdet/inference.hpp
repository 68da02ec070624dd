#pragma once

#include <torch/torch.h>

#include "mixdet/config.hpp"
#include "mixdet/latents.hpp"

namespace mixdet {

/// Feature extractor mapping an image [B, 3, H, W] to a grid of cell
/// features [B, F, grid_h, grid_w].
///
/// "resnet18": the standard 18-layer residual stack without its classifier,
/// followed by two stride-2 transposed convolutions. Net downsampling is 8,
/// so it requires cell size 8.
/// "tiny": a short strided conv stack for small images and tests; accepts
/// any power-of-two cell size up to 64.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const ModelConfig& cfg);

  torch::Tensor forward(const torch::Tensor& x);
  int64_t out_channels() const { return out_channels_; }

 private:
  torch::nn::Sequential body_{nullptr};
  int64_t out_channels_ = 0;
};
TORCH_MODULE(Backbone);

/// Per-cell prediction head: a small conv trunk shared by a 1x1 mean branch
/// and (optionally) a parallel 1x1 log-std branch.
class ConvHeadImpl : public torch::nn::Module {
 public:
  ConvHeadImpl(int64_t in_channels, int64_t out_channels, bool with_log_std,
               int64_t hidden = 128);

  /// f [B, F, Gh, Gw] -> (mean [B, Gh*Gw, out], log_std or undefined).
  /// Cells are flattened row-major. log_std is clamped to [-5, 5].
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& f);

 private:
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Conv2d mean_out_{nullptr};
  torch::nn::Conv2d log_std_out_{nullptr};
  bool with_log_std_;
};
TORCH_MODULE(ConvHead);

/// Map raw box latents [B, N, 4] (tx, ty, tw, th) to pixel-space boxes
/// (cx, cy, w, h): the center lands inside cell n = row * grid_w + col via a
/// sigmoid offset, the size scales the anchor by exp of a tanh-bounded
/// log-factor.
torch::Tensor decode_where(const torch::Tensor& raw, const ModelConfig& cfg);

/// (cx, cy, w, h) -> (x_min, y_min, x_max, y_max), last dimension size 4.
torch::Tensor boxes_to_corners(const torch::Tensor& boxes);

/// Bilinear crop of one glimpse per box. image [B, C, H, W], boxes
/// [B, N, 4] in pixel (cx, cy, w, h) -> [B, N, C, gh, gw]. Regions outside
/// the image read as zero.
torch::Tensor extract_glimpses(const torch::Tensor& image, const torch::Tensor& boxes,
                               int64_t gh, int64_t gw);

/// Glimpse -> category logits.
class CatEncoderImpl : public torch::nn::Module {
 public:
  CatEncoderImpl(int64_t glimpse_numel, int64_t num_clusters);

  /// glimpses [B, N, C, gh, gw] -> logits [B, N, num_clusters]
  torch::Tensor forward(const torch::Tensor& glimpses);

 private:
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(CatEncoder);

/// Glimpse + category -> appearance posterior. The category vector is
/// concatenated onto the flattened glimpse so the posterior is conditioned
/// on the sampled cluster.
class WhatEncoderImpl : public torch::nn::Module {
 public:
  WhatEncoderImpl(int64_t glimpse_numel, int64_t num_clusters, int64_t what_dim);

  /// glimpses [B, N, C, gh, gw], z_cat [B, N, num_clusters]
  /// -> (mean [B, N, A], log_std [B, N, A]), log_std clamped to [-5, 5].
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& glimpses,
                                                  const torch::Tensor& z_cat);

 private:
  torch::nn::Sequential mlp_{nullptr};
  torch::nn::Linear mean_out_{nullptr};
  torch::nn::Linear log_std_out_{nullptr};
};
TORCH_MODULE(WhatEncoder);

/// Grid-level posterior parameters (everything computable without glimpses).
struct GridPosterior {
  torch::Tensor pres_prob;                  // [B, N]
  torch::Tensor where_mean, where_log_std;  // [B, N, 4]
  torch::Tensor depth_mean, depth_log_std;  // [B, N]
};

/// The full encoder: backbone, per-cell heads, glimpse encoders.
class InferenceNetImpl : public torch::nn::Module {
 public:
  explicit InferenceNetImpl(const ModelConfig& cfg);

  /// Stage one: image -> grid posterior (presence, box, depth).
  GridPosterior grid(const torch::Tensor& x);

  /// Stage two, per box sample: glimpses -> category logits.
  torch::Tensor cat_logits(const torch::Tensor& glimpses);

  /// Stage three: glimpses + sampled category -> appearance posterior.
  std::pair<torch::Tensor, torch::Tensor> what_params(const torch::Tensor& glimpses,
                                                      const torch::Tensor& z_cat);

  Backbone backbone{nullptr};
  ConvHead pres_head{nullptr};
  ConvHead where_head{nullptr};
  ConvHead depth_head{nullptr};
  CatEncoder cat_encoder{nullptr};
  WhatEncoder what_encoder{nullptr};
};
TORCH_MODULE(InferenceNet);

}  // namespace mixdet
