#pragma once

#include <torch/torch.h>

#include "mixdet/config.hpp"
#include "mixdet/latents.hpp"

namespace mixdet {

/// Unweighted loss terms plus the weighted total. All scalars keep their
/// autograd history; `total` is what the optimizer steps on.
struct LossBreakdown {
  torch::Tensor recon, overlap, pres, where, depth, cat, what;
  torch::Tensor total;
  double scheduled_pres_prior = 1.0;
  double scheduled_alpha_overlap = 0.0;
};

/// Elementwise KL(Bernoulli(q) || Bernoulli(p)); inputs clamped to
/// [1e-6, 1-1e-6].
torch::Tensor kl_bernoulli(const torch::Tensor& q_prob, const torch::Tensor& p_prob);

inline torch::Tensor kl_bernoulli(const torch::Tensor& q_prob, double p_prob) {
  return kl_bernoulli(q_prob, torch::full_like(q_prob, p_prob));
}

/// KL between diagonal Gaussians given means and log-stds, summed over the
/// last dimension.
torch::Tensor kl_gaussian_diag(const torch::Tensor& q_mean, const torch::Tensor& q_log_std,
                               const torch::Tensor& p_mean, const torch::Tensor& p_log_std);

/// KL(softmax(q_logits) || pi), summed over the last dimension.
torch::Tensor kl_categorical(const torch::Tensor& q_logits, const torch::Tensor& pi);

/// KL between the appearance posterior and the mixture component selected by
/// z_cat (relaxed vectors mix component parameters affinely).
torch::Tensor kl_what_term(const torch::Tensor& what_mean, const torch::Tensor& what_log_std,
                           const torch::Tensor& z_cat_sample, const MixturePrior& mp);

/// Fixed-variance Gaussian negative log-likelihood (pixel std 0.15, additive
/// constant dropped): sum over pixels, mean over batch.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat);

inline constexpr double kPixelStd = 0.15;

/// Everything total_loss needs from one forward pass. kl_cat_cells and
/// kl_what_cells are per-cell conditional K{L}s [B, N], already averaged over
/// the forward pass's Monte Carlo samples.
struct TotalLossInputs {
  torch::Tensor x;
  torch::Tensor x_hat;
  const PosteriorParams* post = nullptr;
  torch::Tensor kl_cat_cells;
  torch::Tensor kl_what_cells;
  torch::Tensor overlap;
};

/// Assemble the full objective at `step`: schedules are applied to the
/// presence prior and the overlap weight, the conditional KL terms are
/// weighted per cell by the posterior presence probability, cells are summed
/// and the batch averaged.
LossBreakdown total_loss(const TotalLossInputs& in, const PriorParams& priors,
                         const LossWeights& weights, const Config& cfg, int64_t step);

}  // namespace mixdet
