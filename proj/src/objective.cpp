#include "mixdet/objective.hpp"

namespace mixdet {

torch::Tensor kl_bernoulli(const torch::Tensor& q_prob, const torch::Tensor& p_prob) {
  auto q = q_prob.clamp(1e-6, 1.0 - 1e-6);
  auto p = p_prob.clamp(1e-6, 1.0 - 1e-6);
  return q * (torch::log(q) - torch::log(p)) +
         (1.0 - q) * (torch::log1p(-q) - torch::log1p(-p));
}

torch::Tensor kl_gaussian_diag(const torch::Tensor& q_mean, const torch::Tensor& q_log_std,
                               const torch::Tensor& p_mean, const torch::Tensor& p_log_std) {
  auto var_ratio = torch::exp(2.0 * (q_log_std - p_log_std));
  auto mean_term = (q_mean - p_mean).square() * torch::exp(-2.0 * p_log_std);
  return ((p_log_std - q_log_std) + 0.5 * (var_ratio + mean_term) - 0.5).sum(-1);
}

torch::Tensor kl_categorical(const torch::Tensor& q_logits, const torch::Tensor& pi) {
  auto log_q = torch::log_softmax(q_logits, -1);
  auto q = torch::exp(log_q);
  return (q * (log_q - torch::log(pi))).sum(-1);
}

torch::Tensor kl_what_term(const torch::Tensor& what_mean, const torch::Tensor& what_log_std,
                           const torch::Tensor& z_cat_sample, const MixturePrior& mp) {
  auto p_mean = torch::matmul(z_cat_sample, mp->mu);
  auto p_log_std =
      torch::matmul(z_cat_sample, mp->log_sigma.clamp(-kLogStdClamp, kLogStdClamp));
  return kl_gaussian_diag(what_mean, what_log_std, p_mean, p_log_std);
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
  if (!x.sizes().equals(x_hat.sizes()))
    throw ShapeError("reconstruction_loss: shape mismatch between input and reconstruction");
  auto diff = (x - x_hat).square() / (2.0 * kPixelStd * kPixelStd);
  return diff.reshape({x.size(0), -1}).sum(-1).mean();
}

LossBreakdown total_loss(const TotalLossInputs& in, const PriorParams& priors,
                         const LossWeights& weights, const Config& cfg, int64_t step) {
  TORCH_CHECK(in.post != nullptr, "total_loss: posterior params missing");
  const auto& post = *in.post;
  const auto opts = post.pres_prob.options();

  double p_sched = priors.pres_prob;
  if (const Schedule* s = cfg.find_schedule("pres_prior")) p_sched = schedule_value(*s, step);
  double alpha_overlap = weights.alpha_overlap;
  if (const Schedule* s = cfg.find_schedule("alpha_overlap"))
    alpha_overlap = schedule_value(*s, step);

  auto q_pres = post.pres_prob;  // [B, N]

  LossBreakdown out;
  out.scheduled_pres_prior = p_sched;
  out.scheduled_alpha_overlap = alpha_overlap;

  out.recon = reconstruction_loss(in.x, in.x_hat);
  out.overlap = in.overlap.defined() ? in.overlap : torch::zeros({}, opts);

  auto p_prior = torch::full_like(q_pres, p_sched);
  out.pres = kl_bernoulli(q_pres, p_prior).sum(-1).mean();

  auto zeros4 = torch::zeros_like(post.where_mean);
  out.where = (q_pres * kl_gaussian_diag(post.where_mean, post.where_log_std,
                                         zeros4 + priors.where_mean,
                                         zeros4 + std::log(priors.where_std)))
                  .sum(-1)
                  .mean();

  auto dm = post.depth_mean.unsqueeze(-1);
  auto dls = post.depth_log_std.unsqueeze(-1);
  auto zeros1 = torch::zeros_like(dm);
  out.depth = (q_pres * kl_gaussian_diag(dm, dls, zeros1 + priors.depth_mean,
                                         zeros1 + std::log(priors.depth_std)))
                  .sum(-1)
                  .mean();

  out.cat = (q_pres * in.kl_cat_cells).sum(-1).mean();
  out.what = (q_pres * in.kl_what_cells).sum(-1).mean();

  out.total = weights.alpha_recon * out.recon + alpha_overlap * out.overlap +
              weights.alpha_pres * out.pres + weights.alpha_where * out.where +
              weights.alpha_depth * out.depth + weights.alpha_cat * out.cat +
              weights.alpha_what * out.what;
  return out;
}

}  // namespace mixdet
