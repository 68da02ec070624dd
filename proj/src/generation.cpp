#include "mixdet/generation.hpp"

#include <cmath>
#include <vector>

#include "mixdet/inference.hpp"

namespace mixdet {

namespace {

bool is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

GlimpseDecoderImpl::GlimpseDecoderImpl(const ModelConfig& cfg)
    : gh_(cfg.glimpse_h), gw_(cfg.glimpse_w) {
  if (gh_ != gw_ || !is_pow2(gh_) || gh_ < 4 || gh_ > 64)
    throw ValidationError("glimpse decoder requires a square power-of-two glimpse in [4, 64]");

  input_ = register_module("input", torch::nn::Linear(cfg.what_dim, 256));

  // Growth stages 1 -> gh: all but the last are taken from the channel plan
  // (widest first), the last always has 16 channels with a mid conv before it.
  const int64_t n = int64_t(std::log2(double(gh_)));
  std::vector<int64_t> widths;
  for (int64_t i = 0; i < n - 3; ++i) widths.push_back(128);
  for (int64_t w : {64, 32}) {
    if (int64_t(widths.size()) >= n - 1) break;
    widths.push_back(w);
  }

  torch::nn::Sequential stack;
  int64_t in = 256;
  auto add_norm_relu = [&stack](int64_t ch) {
    stack->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(ch >= 32 ? 8 : 4, ch)));
    stack->push_back(torch::nn::Functional(torch::relu));
  };
  for (int64_t ch : widths) {
    stack->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(in, ch, 4).stride(2).padding(1).bias(false)));
    add_norm_relu(ch);
    in = ch;
  }
  stack->push_back(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, in, 3).padding(1).bias(false)));
  add_norm_relu(in);
  stack->push_back(torch::nn::ConvTranspose2d(
      torch::nn::ConvTranspose2dOptions(in, 16, 4).stride(2).padding(1).bias(false)));
  add_norm_relu(16);
  stack->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 4, 3).padding(1)));
  stack_ = register_module("stack", stack);
}

torch::Tensor GlimpseDecoderImpl::forward(const torch::Tensor& z_what) {
  TORCH_CHECK(z_what.dim() == 3, "decode_glimpse expects z_what [B, N, A]");
  const int64_t B = z_what.size(0), N = z_what.size(1);
  auto h = torch::relu(input_(z_what.reshape({B * N, -1})));
  auto out = stack_->forward(h.reshape({B * N, 256, 1, 1}));
  return torch::sigmoid(out).reshape({B, N, 4, gh_, gw_});
}

torch::Tensor paste_glimpse(const torch::Tensor& glimpses, const torch::Tensor& boxes,
                            int64_t H, int64_t W) {
  TORCH_CHECK(glimpses.dim() == 5, "paste_glimpse expects glimpses [B, N, c, gh, gw]");
  TORCH_CHECK(boxes.dim() == 3 && boxes.size(-1) == 4,
              "paste_glimpse expects boxes [B, N, 4]");
  const int64_t B = glimpses.size(0), N = glimpses.size(1), c = glimpses.size(2);
  auto b = boxes.reshape({B * N, 4}).unbind(-1);
  TORCH_CHECK((b[2] > 0).all().item<bool>() && (b[3] > 0).all().item<bool>(),
              "paste_glimpse: box sizes must be positive");

  // Inverse of the crop transform: canvas coordinates -> glimpse coordinates.
  auto sx = b[2] / double(W), sy = b[3] / double(H);
  auto tx = 2.0 * b[0] / double(W) - 1.0, ty = 2.0 * b[1] / double(H) - 1.0;
  auto zero = torch::zeros_like(sx);
  auto theta = torch::stack({torch::stack({1.0 / sx, zero, -tx / sx}, -1),
                             torch::stack({zero, 1.0 / sy, -ty / sy}, -1)},
                            1);  // [B*N, 2, 3]
  auto grid = torch::nn::functional::affine_grid(theta, {B * N, c, H, W},
                                                 /*align_corners=*/false);
  auto canvas = torch::nn::functional::grid_sample(
      glimpses.reshape({B * N, c, glimpses.size(3), glimpses.size(4)}), grid,
      torch::nn::functional::GridSampleFuncOptions()
          .mode(torch::kBilinear)
          .padding_mode(torch::kZeros)
          .align_corners(false));
  return canvas.reshape({B, N, c, H, W});
}

RenderResult render_scene(const torch::Tensor& rgba_glimpses, const LatentGrid& grid,
                          const ModelConfig& cfg) {
  TORCH_CHECK(rgba_glimpses.dim() == 5 && rgba_glimpses.size(2) == 4,
              "render_scene expects rgba glimpses [B, N, 4, gh, gw]");
  const int64_t B = rgba_glimpses.size(0), N = rgba_glimpses.size(1);
  auto boxes = decode_where(grid.z_where, cfg);
  auto canvas = paste_glimpse(rgba_glimpses, boxes, cfg.image_height, cfg.image_width);

  RenderResult r;
  r.rgb_canvas = canvas.narrow(2, 0, 3);
  r.alpha_canvas = canvas.narrow(2, 3, 1);
  auto w = grid.z_pres.reshape({B, N, 1, 1, 1}) * r.alpha_canvas *
           torch::sigmoid(grid.z_depth).reshape({B, N, 1, 1, 1});
  auto num = (w * r.rgb_canvas).sum(1);         // [B, 3, H, W]
  auto den = w.sum(1).clamp_min(1.0);           // [B, 1, H, W]
  r.image = num / den;
  return r;
}

torch::Tensor overlap_penalty(const torch::Tensor& rgb_canvas, const torch::Tensor& pres) {
  TORCH_CHECK(rgb_canvas.dim() == 5, "overlap_penalty expects canvases [B, N, c, H, W]");
  TORCH_CHECK(pres.dim() == 2, "overlap_penalty expects presence [B, N]");
  const int64_t B = rgb_canvas.size(0), N = rgb_canvas.size(1);
  TORCH_CHECK(pres.size(0) == B && pres.size(1) == N,
              "overlap_penalty: presence shape mismatch");
  auto c = pres.reshape({B, N, 1, 1, 1}) * rgb_canvas;
  auto total = c.sum(1);
  auto top = std::get<0>(c.max(1));
  return (total - top).reshape({B, -1}).mean(-1).mean();
}

}  // namespace mixdet
