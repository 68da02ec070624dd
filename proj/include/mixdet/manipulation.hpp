#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mixdet/datasets.hpp"
#include "mixdet/generation.hpp"
#include "mixdet/latents.hpp"
#include "mixdet/model.hpp"

namespace mixdet {

/// One present object with its appearance split into the assigned cluster's
/// mean and a residual. The split is carried in double precision so that
/// z_avg + z_local reproduces the original float appearance bit for bit.
struct ObjectLatent {
  int64_t cell = 0;     // flat grid index the object occupies
  int64_t cluster = 0;  // argmax of the cell's hard category
  torch::Tensor z_avg;    // [A] double, mean of the assigned cluster
  torch::Tensor z_local;  // [A] double, z_what - z_avg
  torch::Tensor z_where;  // [4] raw box latent, stays with the cell
  torch::Tensor z_depth;  // scalar
};

struct ManipulationResult {
  LatentGrid grid;
  RenderResult render;
};

/// Posterior modes as one latent grid: presence thresholded at 0.5, hard
/// one-hot category, mean appearance/box/depth. No sampling, no gradients;
/// repeated calls are bitwise identical.
LatentGrid deterministic_infer(SceneModel& model, const torch::Tensor& x);

/// Split every present object of a single-scene grid around its cluster
/// mean. Requires hard (exactly one-hot) z_cat; a relaxed grid is rejected
/// with a hint to run deterministic_infer.
std::vector<ObjectLatent> decompose(const LatentGrid& grid,
                                    const MixturePrior& mixture);

/// Write objects back into a copy of the grid: z_what = z_avg + z_local,
/// category one-hot from the cluster id, box and depth as stored.
LatentGrid recompose(const LatentGrid& grid,
                     const std::vector<ObjectLatent>& objects);

/// Give every object the target cluster's mean appearance while keeping its
/// residual, then re-render. Objects already in the target cluster are left
/// untouched.
ManipulationResult swap_category(SceneModel& model, const LatentGrid& grid,
                                 int64_t target_k);

/// Replace every object's residual with a fresh draw from N(0, noise_scale^2)
/// per dimension, keeping the cluster means, then re-render.
ManipulationResult vary_local(SceneModel& model, const LatentGrid& grid,
                              double noise_scale, torch::Generator& gen);

/// Permute the appearance tuples (z_what, z_depth, z_cat) among the present
/// cells; z_where and z_pres stay with their cells. perm must be a
/// permutation of 0..n_present-1; position i receives the tuple of present
/// cell perm[i].
LatentGrid shuffle_objects(const LatentGrid& grid,
                           const std::vector<int64_t>& perm);

/// Random shuffle drawn from gen, plus the re-rendered scene.
ManipulationResult shuffle_objects(SceneModel& model, const LatentGrid& grid,
                                   torch::Generator& gen);

/// Deterministic inference over the dataset; for every correct detection
/// (best ground-truth overlap at or above iou_threshold) write one CSV row
/// `scene_id,cluster,class,dim_0..dim_{A-1}` with the cell's appearance
/// vector. Returns the number of rows written.
int64_t export_latents(SceneModel& model, const Dataset& dataset,
                       const std::string& out_path, double iou_threshold = 0.5,
                       double alpha_threshold = 0.1);

}  // namespace mixdet
