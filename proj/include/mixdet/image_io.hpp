#pragma once

#include <torch/torch.h>

#include <string>

namespace mixdet {

/// Write a [1|3, H, W] float tensor in [0,1] as an 8-bit PNG (single channel
/// saved grayscale). Values are rounded to the 8-bit grid.
void save_png(const torch::Tensor& chw, const std::string& path,
              int compression = 1);

/// Read a PNG (or any OpenCV-decodable image) as [3, H, W] float in [0,1],
/// grayscale replicated to three channels. IoError names the path.
torch::Tensor load_png(const std::string& path);

}  // namespace mixdet
