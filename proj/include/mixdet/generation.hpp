#pragma once

#include <torch/torch.h>

#include "mixdet/config.hpp"
#include "mixdet/latents.hpp"

namespace mixdet {

/// Appearance latent -> glimpse image. A linear layer lifts z_what to a
/// 256-channel 1x1 feature, a stack of stride-2 transposed convolutions with
/// group norm grows it to glimpse resolution, and a final conv produces four
/// sigmoid channels: rgb content plus an alpha support mask.
class GlimpseDecoderImpl : public torch::nn::Module {
 public:
  explicit GlimpseDecoderImpl(const ModelConfig& cfg);

  /// z_what [B, N, A] -> rgba glimpses [B, N, 4, gh, gw], values in [0,1].
  torch::Tensor forward(const torch::Tensor& z_what);

 private:
  torch::nn::Linear input_{nullptr};
  torch::nn::Sequential stack_{nullptr};
  int64_t gh_, gw_;
};
TORCH_MODULE(GlimpseDecoder);

/// Inverse spatial transform: resample each glimpse into its box on an
/// otherwise-zero full-size canvas. glimpses [B, N, c, gh, gw], boxes
/// [B, N, 4] in pixel (cx, cy, w, h) -> [B, N, c, H, W].
torch::Tensor paste_glimpse(const torch::Tensor& glimpses, const torch::Tensor& boxes,
                            int64_t H, int64_t W);

struct RenderResult {
  torch::Tensor image;         // [B, 3, H, W], in [0,1]
  torch::Tensor rgb_canvas;    // [B, N, 3, H, W] per-object pasted rgb
  torch::Tensor alpha_canvas;  // [B, N, 1, H, W] per-object pasted support
};

/// Composite all objects onto a black background. Per-object pixel weight
/// w_i = z_pres_i * alpha_i * sigmoid(z_depth_i); the image is
/// sum_i w_i * rgb_i / max(sum_i w_i, 1).
RenderResult render_scene(const torch::Tensor& rgba_glimpses, const LatentGrid& grid,
                          const ModelConfig& cfg);

/// Penalty for explaining one pixel with several objects: with
/// c_i = pres_i * rgb_canvas_i, the mean over pixels and channels of
/// sum_i c_i - max_i c_i. Zero iff supports are pairwise disjoint.
torch::Tensor overlap_penalty(const torch::Tensor& rgb_canvas, const torch::Tensor& pres);

}  // namespace mixdet
