#include "mixdet/latents.hpp"

#include <cmath>

namespace mixdet {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

MixturePriorImpl::MixturePriorImpl(int64_t num_clusters, int64_t what_dim) {
  // Spread means so components start distinct; a tight init tends to collapse
  // the mixture onto a single Gaussian early in training.
  mu = register_parameter("mu", torch::randn({num_clusters, what_dim}) * 0.5);
  log_sigma = register_parameter("log_sigma", torch::zeros({num_clusters, what_dim}));
}

std::pair<torch::Tensor, torch::Tensor> MixturePriorImpl::params_for(
    const torch::Tensor& z_cat) const {
  auto m = torch::matmul(z_cat, mu);
  auto ls = torch::matmul(z_cat, log_sigma.clamp(-kLogStdClamp, kLogStdClamp));
  return {m, torch::exp(ls)};
}

std::pair<torch::Tensor, torch::Tensor> mixture_params(const MixturePrior& mp,
                                                       const torch::Tensor& z_cat) {
  return mp->params_for(z_cat);
}

torch::Tensor mixture_log_density(const MixturePrior& mp, const torch::Tensor& pi,
                                  const torch::Tensor& x) {
  auto ls = mp->log_sigma.clamp(-kLogStdClamp, kLogStdClamp);  // [C, A]
  auto xe = x.unsqueeze(-2);                                   // [.., 1, A]
  auto diff = (xe - mp->mu) * torch::exp(-ls);
  auto comp_log = (-0.5 * diff.square() - ls - 0.5 * std::log(kTwoPi)).sum(-1);  // [.., C]
  return torch::logsumexp(comp_log + torch::log(pi), -1);
}

torch::Tensor sample_gaussian(const torch::Tensor& mean, const torch::Tensor& log_std,
                              torch::Generator& gen) {
  auto eps = torch::randn(mean.sizes(), gen, mean.options());
  return mean + torch::exp(log_std) * eps;
}

namespace {

torch::Tensor gumbel_noise(torch::IntArrayRef shape, const torch::TensorOptions& opts,
                           torch::Generator& gen) {
  auto u = torch::rand(shape, gen, opts);
  return -torch::log(-torch::log(u.clamp_min(1e-20)));
}

}  // namespace

torch::Tensor sample_gumbel_softmax(const torch::Tensor& logits, double temperature,
                                    torch::Generator& gen, bool hard) {
  if (!(temperature > 0))
    throw std::invalid_argument("gumbel-softmax temperature must be positive");
  auto g = gumbel_noise(logits.sizes(), logits.options(), gen);
  auto soft = torch::softmax((logits + g) / temperature, -1);
  if (!hard) return soft;
  auto idx = soft.argmax(-1, /*keepdim=*/true);
  auto one_hot = torch::zeros_like(soft).scatter_(-1, idx, 1.0);
  // Straight-through: one-hot forward value, soft-sample gradient. The inner
  // difference is exactly zero elementwise, so the forward value stays an
  // exact one-hot.
  return one_hot + (soft - soft.detach());
}

torch::Tensor sample_gumbel_binary(const torch::Tensor& prob, double temperature,
                                   torch::Generator& gen, bool hard) {
  auto p = prob.clamp(1e-6, 1.0 - 1e-6);
  auto logits = torch::stack({torch::log(p), torch::log1p(-p)}, -1);
  return sample_gumbel_softmax(logits, temperature, gen, hard).select(-1, 0);
}

torch::Generator make_generator(uint64_t seed) {
  return at::detail::createCPUGenerator(seed);
}

PriorParams PriorParams::make(const ModelConfig& cfg, MixturePrior mixture,
                              torch::TensorOptions opts) {
  PriorParams p;
  p.cat_pi = torch::full({cfg.num_clusters}, 1.0 / double(cfg.num_clusters), opts);
  p.mixture = std::move(mixture);
  return p;
}

}  // namespace mixdet
