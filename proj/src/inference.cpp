#include "mixdet/inference.hpp"

#include <cmath>

namespace mixdet {

namespace {

constexpr double kScaleBound = 1.5;  // |log size factor| <= 1.5

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1_ = register_module("conv1", conv3x3(in, out, stride));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
    conv2_ = register_module("conv2", conv3x3(out, out));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      down_ = register_module(
          "down", torch::nn::Sequential(
                      torch::nn::Conv2d(
                          torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                      torch::nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1_(conv1_(x)));
    out = bn2_(conv2_(out));
    auto skip = down_ ? down_->forward(x) : x;
    return torch::relu(out + skip);
  }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential down_{nullptr};
};
TORCH_MODULE(BasicBlock);

torch::nn::Sequential make_resnet18_trunk() {
  torch::nn::Sequential body;
  body->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  body->push_back(torch::nn::BatchNorm2d(64));
  body->push_back(torch::nn::Functional(torch::relu));
  body->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));
  int64_t in = 64;
  for (auto [out, stride] : {std::pair<int64_t, int64_t>{64, 1},
                             {64, 1},
                             {128, 2},
                             {128, 1},
                             {256, 2},
                             {256, 1},
                             {512, 2},
                             {512, 1}}) {
    body->push_back(BasicBlock(in, out, stride));
    in = out;
  }
  // recover cell resolution: /32 from the residual stack, x4 from here
  body->push_back(torch::nn::ConvTranspose2d(
      torch::nn::ConvTranspose2dOptions(512, 256, 4).stride(2).padding(1).bias(false)));
  body->push_back(torch::nn::BatchNorm2d(256));
  body->push_back(torch::nn::Functional(torch::relu));
  body->push_back(torch::nn::ConvTranspose2d(
      torch::nn::ConvTranspose2dOptions(256, 128, 4).stride(2).padding(1).bias(false)));
  body->push_back(torch::nn::BatchNorm2d(128));
  body->push_back(torch::nn::Functional(torch::relu));
  return body;
}

torch::nn::Sequential make_tiny_trunk(int64_t cell) {
  torch::nn::Sequential body;
  int64_t in = 3;
  for (int64_t size = cell; size > 1; size /= 2) {
    int64_t out = in == 3 ? 32 : 64;
    body->push_back(conv3x3(in, out, 2));
    body->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, out)));
    body->push_back(torch::nn::Functional(torch::relu));
    in = out;
  }
  body->push_back(conv3x3(in, 64, 1));
  body->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, 64)));
  body->push_back(torch::nn::Functional(torch::relu));
  return body;
}

bool is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
  const double ch = cfg.cell_h(), cw = cfg.cell_w();
  if (ch != cw || ch != std::floor(ch))
    throw ValidationError("backbone: cells must be square with integer size");
  const int64_t cell = int64_t(ch);
  if (cfg.backbone == "resnet18") {
    if (cell != 8)
      throw ValidationError("backbone 'resnet18' requires cell size 8, got " +
                            std::to_string(cell));
    if (cfg.image_height < 64 || cfg.image_width < 64)
      throw ValidationError("backbone 'resnet18' requires images of at least 64x64");
    body_ = make_resnet18_trunk();
    out_channels_ = 128;
  } else if (cfg.backbone == "tiny") {
    if (!is_pow2(cell) || cell > 64)
      throw ValidationError("backbone 'tiny' requires a power-of-two cell size up to 64");
    body_ = make_tiny_trunk(cell);
    out_channels_ = 64;
  } else {
    throw ValidationError("unknown backbone '" + cfg.backbone + "'");
  }
  register_module("body", body_);
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) {
  return body_->forward(x);
}

ConvHeadImpl::ConvHeadImpl(int64_t in_channels, int64_t out_channels, bool with_log_std,
                           int64_t hidden)
    : with_log_std_(with_log_std) {
  torch::nn::Sequential trunk;
  int64_t in = in_channels;
  for (int i = 0; i < 3; ++i) {
    trunk->push_back(conv3x3(in, hidden));
    trunk->push_back(torch::nn::Functional(torch::relu));
    in = hidden;
  }
  trunk_ = register_module("trunk", trunk);
  mean_out_ = register_module(
      "mean_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, out_channels, 1)));
  if (with_log_std_) {
    log_std_out_ = register_module(
        "log_std_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, out_channels, 1)));
  }
}

std::pair<torch::Tensor, torch::Tensor> ConvHeadImpl::forward(const torch::Tensor& f) {
  auto h = trunk_->forward(f);
  auto flatten = [](torch::Tensor t) {
    // [B, c, Gh, Gw] -> [B, Gh*Gw, c], row-major cells
    return t.permute({0, 2, 3, 1}).reshape({t.size(0), t.size(2) * t.size(3), t.size(1)});
  };
  auto mean = flatten(mean_out_(h));
  torch::Tensor log_std;
  if (with_log_std_)
    log_std = flatten(log_std_out_(h)).clamp(-kLogStdClamp, kLogStdClamp);
  return {mean, log_std};
}

torch::Tensor decode_where(const torch::Tensor& raw, const ModelConfig& cfg) {
  TORCH_CHECK(raw.dim() == 3 && raw.size(-1) == 4, "decode_where expects [B, N, 4]");
  TORCH_CHECK(raw.size(1) == cfg.cells(), "decode_where: cell count mismatch");
  const auto opts = raw.options();
  const int64_t N = cfg.cells();
  auto idx = torch::arange(N, opts);
  auto col = torch::remainder(idx, cfg.grid_w);
  auto row = torch::div(idx, cfg.grid_w, /*rounding_mode=*/"floor");

  auto t = raw.unbind(-1);
  auto cx = (col + torch::sigmoid(t[0])) * cfg.cell_w();
  auto cy = (row + torch::sigmoid(t[1])) * cfg.cell_h();
  auto w = cfg.anchor_w * torch::exp(kScaleBound * torch::tanh(t[2] / kScaleBound));
  auto h = cfg.anchor_h * torch::exp(kScaleBound * torch::tanh(t[3] / kScaleBound));
  return torch::stack({cx, cy, w, h}, -1);
}

torch::Tensor boxes_to_corners(const torch::Tensor& boxes) {
  auto b = boxes.unbind(-1);
  auto half_w = b[2] / 2.0, half_h = b[3] / 2.0;
  return torch::stack({b[0] - half_w, b[1] - half_h, b[0] + half_w, b[1] + half_h}, -1);
}

torch::Tensor extract_glimpses(const torch::Tensor& image, const torch::Tensor& boxes,
                               int64_t gh, int64_t gw) {
  TORCH_CHECK(image.dim() == 4, "extract_glimpses expects an image batch [B, C, H, W]");
  TORCH_CHECK(boxes.dim() == 3 && boxes.size(-1) == 4,
              "extract_glimpses expects boxes [B, N, 4]");
  const int64_t B = image.size(0), C = image.size(1);
  const int64_t H = image.size(2), W = image.size(3);
  const int64_t N = boxes.size(1);

  auto b = boxes.reshape({B * N, 4}).unbind(-1);
  auto zero = torch::zeros_like(b[0]);
  // Maps glimpse coordinates in [-1, 1] onto the box in image coordinates.
  auto theta = torch::stack({torch::stack({b[2] / W, zero, 2.0 * b[0] / W - 1.0}, -1),
                             torch::stack({zero, b[3] / H, 2.0 * b[1] / H - 1.0}, -1)},
                            1);  // [B*N, 2, 3]
  auto grid = torch::nn::functional::affine_grid(theta, {B * N, C, gh, gw},
                                                 /*align_corners=*/false);
  // One sampling call over the batch: pack the per-cell grids along height.
  auto packed = grid.reshape({B, N * gh, gw, 2});
  auto sampled = torch::nn::functional::grid_sample(
      image, packed,
      torch::nn::functional::GridSampleFuncOptions()
          .mode(torch::kBilinear)
          .padding_mode(torch::kZeros)
          .align_corners(false));  // [B, C, N*gh, gw]
  return sampled.reshape({B, C, N, gh, gw}).permute({0, 2, 1, 3, 4}).contiguous();
}

namespace {

torch::nn::Sequential make_glimpse_mlp(int64_t in_dim) {
  torch::nn::Sequential mlp;
  int64_t in = in_dim;
  for (int64_t width : {128, 256, 512}) {
    mlp->push_back(torch::nn::Linear(in, width));
    mlp->push_back(torch::nn::Functional(torch::relu));
    in = width;
  }
  return mlp;
}

}  // namespace

CatEncoderImpl::CatEncoderImpl(int64_t glimpse_numel, int64_t num_clusters) {
  auto mlp = make_glimpse_mlp(glimpse_numel);
  mlp->push_back(torch::nn::Linear(512, num_clusters));
  mlp_ = register_module("mlp", mlp);
}

torch::Tensor CatEncoderImpl::forward(const torch::Tensor& glimpses) {
  const int64_t B = glimpses.size(0), N = glimpses.size(1);
  auto flat = glimpses.reshape({B * N, -1});
  return mlp_->forward(flat).reshape({B, N, -1});
}

WhatEncoderImpl::WhatEncoderImpl(int64_t glimpse_numel, int64_t num_clusters,
                                 int64_t what_dim) {
  mlp_ = register_module("mlp", make_glimpse_mlp(glimpse_numel + num_clusters));
  mean_out_ = register_module("mean_out", torch::nn::Linear(512, what_dim));
  log_std_out_ = register_module("log_std_out", torch::nn::Linear(512, what_dim));
}

std::pair<torch::Tensor, torch::Tensor> WhatEncoderImpl::forward(
    const torch::Tensor& glimpses, const torch::Tensor& z_cat) {
  const int64_t B = glimpses.size(0), N = glimpses.size(1);
  auto flat = torch::cat({glimpses.reshape({B * N, -1}), z_cat.reshape({B * N, -1})}, -1);
  auto h = mlp_->forward(flat);
  auto mean = mean_out_(h).reshape({B, N, -1});
  auto log_std = log_std_out_(h).reshape({B, N, -1}).clamp(-kLogStdClamp, kLogStdClamp);
  return {mean, log_std};
}

InferenceNetImpl::InferenceNetImpl(const ModelConfig& cfg) {
  backbone = register_module("backbone", Backbone(cfg));
  const int64_t F = backbone->out_channels();
  pres_head = register_module("pres_head", ConvHead(F, 1, /*with_log_std=*/false));
  where_head = register_module("where_head", ConvHead(F, 4, /*with_log_std=*/true));
  depth_head = register_module("depth_head", ConvHead(F, 1, /*with_log_std=*/true));
  const int64_t glimpse_numel = 3 * cfg.glimpse_h * cfg.glimpse_w;
  cat_encoder =
      register_module("cat_encoder", CatEncoder(glimpse_numel, cfg.num_clusters));
  what_encoder = register_module(
      "what_encoder", WhatEncoder(glimpse_numel, cfg.num_clusters, cfg.what_dim));
}

GridPosterior InferenceNetImpl::grid(const torch::Tensor& x) {
  auto f = backbone->forward(x);
  GridPosterior g;
  auto [pres_raw, pres_ls] = pres_head->forward(f);
  g.pres_prob = torch::sigmoid(pres_raw.squeeze(-1));
  std::tie(g.where_mean, g.where_log_std) = where_head->forward(f);
  auto [dm, dls] = depth_head->forward(f);
  g.depth_mean = dm.squeeze(-1);
  g.depth_log_std = dls.squeeze(-1);
  return g;
}

torch::Tensor InferenceNetImpl::cat_logits(const torch::Tensor& glimpses) {
  return cat_encoder->forward(glimpses);
}

std::pair<torch::Tensor, torch::Tensor> InferenceNetImpl::what_params(
    const torch::Tensor& glimpses, const torch::Tensor& z_cat) {
  return what_encoder->forward(glimpses, z_cat);
}

}  // namespace mixdet
