#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "mixdet/trainer.hpp"

namespace mixdet {

/// Parsed latent export file: one row per correctly detected object.
struct LatentTable {
  std::vector<std::string> scene_ids;
  std::vector<int64_t> clusters;
  std::vector<int64_t> classes;
  torch::Tensor features;  // [N, A] float32
};

/// Read a latent export CSV (header scene_id,cluster,class,dim_0,...).
/// IoError when unreadable, ValidationError on a malformed header or row.
LatentTable read_latents_csv(const std::string& path);

/// Project feature rows onto their two largest principal components.
/// Accepts [N, A] with any A >= 1; missing directions are zero-filled.
torch::Tensor pca_2d(const torch::Tensor& features);  // [N, 2] float32

/// Render loss curves plus one marker per logged evaluation row to a PNG.
/// ValidationError when `rows` is empty.
void plot_training_curves(const std::vector<MetricsLogRow>& rows,
                          const std::string& out_path);

/// Render a 2-D PCA scatter of the table colored by ground-truth class,
/// with one legend entry per class present. ValidationError when empty.
void plot_latent_scatter(const LatentTable& table, const std::string& out_path);

}  // namespace mixdet
