#pragma once

#include <torch/torch.h>

#include "mixdet/config.hpp"

namespace mixdet {

/// Per-cell posterior parameters from the encoder. All tensors carry a batch
/// dimension and a flattened cell dimension N = grid_h * grid_w:
///   pres_prob      [B, N]
///   where_mean     [B, N, 4]     where_log_std [B, N, 4]
///   depth_mean     [B, N]        depth_log_std [B, N]
///   cat_logits     [B, N, C]
///   what_mean      [B, N, A]     what_log_std  [B, N, A]
struct PosteriorParams {
  torch::Tensor pres_prob;
  torch::Tensor where_mean, where_log_std;
  torch::Tensor depth_mean, depth_log_std;
  torch::Tensor cat_logits;
  torch::Tensor what_mean, what_log_std;
};

/// One sampled (or mode-selected) latent per cell.
///   z_pres [B, N] in [0,1]      z_what [B, N, A]
///   z_cat  [B, N, C] on simplex z_where [B, N, 4] (normalized units)
///   z_depth [B, N]
struct LatentGrid {
  torch::Tensor z_pres;
  torch::Tensor z_what;
  torch::Tensor z_cat;
  torch::Tensor z_where;
  torch::Tensor z_depth;

  int64_t batch() const { return z_pres.size(0); }
  int64_t cells() const { return z_pres.size(1); }
};

/// Learnable Gaussian-mixture parameters for the appearance prior: one
/// (mu_k, sigma_k) diagonal Gaussian per cluster, realized as affine maps
/// from the one-hot category vector.
class MixturePriorImpl : public torch::nn::Module {
 public:
  MixturePriorImpl(int64_t num_clusters, int64_t what_dim);

  /// (mu, log_sigma) for a relaxed or hard category vector z_cat [.., C]
  /// -> two tensors [.., A]. Hard one-hot selects a row exactly.
  std::pair<torch::Tensor, torch::Tensor> params_for(const torch::Tensor& z_cat) const;

  torch::Tensor mu;         // [C, A]
  torch::Tensor log_sigma;  // [C, A], clamped to [-5, 5] on use
};
TORCH_MODULE(MixturePrior);

/// Fixed priors plus the learnable mixture. `pres_prob` follows the
/// pres_prior schedule during training.
struct PriorParams {
  double pres_prob = 1.0;
  torch::Tensor cat_pi;  // [C], uniform
  double where_mean = 0.0, where_std = 1.0;
  double depth_mean = 0.0, depth_std = 1.0;
  MixturePrior mixture = nullptr;

  static PriorParams make(const ModelConfig& cfg, MixturePrior mixture,
                          torch::TensorOptions opts = {});
};

inline constexpr double kLogStdClamp = 5.0;

/// mu(z_cat), sigma(z_cat): convex combination of rows for relaxed inputs,
/// exact row selection for hard one-hots. Returns (mu [.., A], sigma [.., A]).
std::pair<torch::Tensor, torch::Tensor> mixture_params(const MixturePrior& mp,
                                                       const torch::Tensor& z_cat);

/// log sum_k pi_k prod_d N(x_d; mu_kd, sigma_kd^2) for x [.., A].
torch::Tensor mixture_log_density(const MixturePrior& mp, const torch::Tensor& pi,
                                  const torch::Tensor& x);

/// Reparameterized draw mean + exp(log_std) * eps, eps ~ N(0, I).
torch::Tensor sample_gaussian(const torch::Tensor& mean, const torch::Tensor& log_std,
                              torch::Generator& gen);

/// Gumbel-Softmax draw over the last dimension. `hard` returns a
/// straight-through one-hot (forward value is the argmax of the soft sample).
torch::Tensor sample_gumbel_softmax(const torch::Tensor& logits, double temperature,
                                    torch::Generator& gen, bool hard = false);

/// Binary special case for presence: returns the probability-of-one component
/// of a 2-way Gumbel-Softmax over (logit, 0).
torch::Tensor sample_gumbel_binary(const torch::Tensor& prob, double temperature,
                                   torch::Generator& gen, bool hard = false);

torch::Generator make_generator(uint64_t seed);

}  // namespace mixdet
