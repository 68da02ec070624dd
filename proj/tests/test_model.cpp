#include <torch/torch.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mixdet/model.hpp"
#include "mixdet/objective.hpp"

#include "doctest_shim.hpp"

using namespace mixdet;

namespace {

Config tiny_train_config() {
  Config cfg = default_config();
  cfg.model.image_height = 32;
  cfg.model.image_width = 32;
  cfg.model.grid_h = 4;
  cfg.model.grid_w = 4;
  cfg.model.glimpse_h = 8;
  cfg.model.glimpse_w = 8;
  cfg.model.what_dim = 8;
  cfg.model.num_clusters = 3;
  cfg.model.anchor_h = 12.0;
  cfg.model.anchor_w = 12.0;
  cfg.model.backbone = "tiny";
  cfg.validate();
  return cfg;
}

bool binary_valued(const torch::Tensor& t) {
  return ((t == 0.0) | (t == 1.0)).all().item<bool>();
}

std::string temp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

LossBreakdown model_loss(SceneModel& model, const Config& cfg,
                         const torch::Tensor& x, ForwardOutput& out,
                         int64_t step) {
  TotalLossInputs in;
  in.x = x;
  in.x_hat = out.render.image;
  in.post = &out.post;
  in.kl_cat_cells = out.kl_cat_cells;
  in.kl_what_cells = out.kl_what_cells;
  in.overlap = out.overlap;
  auto priors = PriorParams::make(cfg.model, model->mixture, x.options());
  return total_loss(in, priors, cfg.loss, cfg, step);
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("forward produces coherent shapes and ranges") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  auto gen = make_generator(1);
  auto x = torch::rand({2, 3, 32, 32});

  auto out = model->forward(x, gen);
  const int64_t N = cfg.model.cells();

  CHECK(out.post.pres_prob.sizes() == torch::IntArrayRef({2, N}));
  CHECK(out.post.where_mean.sizes() == torch::IntArrayRef({2, N, 4}));
  CHECK(out.post.cat_logits.sizes() == torch::IntArrayRef({2, N, 3}));
  CHECK(out.post.what_mean.sizes() == torch::IntArrayRef({2, N, 8}));

  CHECK(binary_valued(out.latents.z_pres));
  CHECK(out.latents.z_cat.sizes() == torch::IntArrayRef({2, N, 3}));
  CHECK(torch::allclose(out.latents.z_cat.sum(-1), torch::ones({2, N}), 1e-5, 1e-5));
  CHECK(out.latents.z_where.sizes() == torch::IntArrayRef({2, N, 4}));
  CHECK(out.latents.z_depth.sizes() == torch::IntArrayRef({2, N}));
  CHECK(out.latents.z_what.sizes() == torch::IntArrayRef({2, N, 8}));

  CHECK(out.render.image.sizes() == torch::IntArrayRef({2, 3, 32, 32}));
  CHECK(out.render.image.min().item<double>() >= 0.0);
  CHECK(out.render.image.max().item<double>() <= 1.0);

  CHECK(out.kl_cat_cells.sizes() == torch::IntArrayRef({2, N}));
  CHECK(out.kl_what_cells.sizes() == torch::IntArrayRef({2, N}));
  CHECK(out.kl_cat_cells.min().item<double>() >= -1e-6);
  CHECK(out.kl_cat_cells.isfinite().all().item<bool>());
  CHECK(out.kl_what_cells.isfinite().all().item<bool>());
  CHECK(out.overlap.dim() == 0);
  CHECK(out.overlap.item<double>() >= 0.0);
}

TEST_CASE("forward is deterministic given the generator seed") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  auto x = torch::rand({1, 3, 32, 32});

  auto g1 = make_generator(7);
  auto g2 = make_generator(7);
  auto g3 = make_generator(8);
  auto a = model->forward(x, g1);
  auto b = model->forward(x, g2);
  auto c = model->forward(x, g3);

  CHECK(torch::equal(a.render.image, b.render.image));
  CHECK(torch::equal(a.kl_cat_cells, b.kl_cat_cells));
  CHECK(torch::equal(a.kl_what_cells, b.kl_what_cells));
  CHECK(torch::equal(a.latents.z_what, b.latents.z_what));
  CHECK(!torch::equal(a.latents.z_pres * a.latents.z_depth,
                      c.latents.z_pres * c.latents.z_depth));
}

TEST_CASE("forward follows the documented sampling order") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  auto x = torch::rand({1, 3, 32, 32});

  auto gen = make_generator(11);
  auto out = model->forward(x, gen);

  auto replay = make_generator(11);
  auto gp = model->encoder->grid(x);
  const double tau = cfg.model.gumbel_temperature;
  auto z_pres = sample_gumbel_binary(gp.pres_prob, tau, replay, true);
  auto z_depth = sample_gaussian(gp.depth_mean, gp.depth_log_std, replay);
  auto z_where = sample_gaussian(gp.where_mean, gp.where_log_std, replay);
  auto boxes = decode_where(gp.where_mean, cfg.model);
  auto glimpses = extract_glimpses(x, boxes, 8, 8);
  auto logits = model->encoder->cat_logits(glimpses);
  auto z_cat = sample_gumbel_softmax(logits, tau, replay, false);
  auto [what_mean, what_log_std] = model->encoder->what_params(glimpses, z_cat);
  auto z_what = sample_gaussian(what_mean, what_log_std, replay);

  CHECK(torch::equal(out.latents.z_pres, z_pres));
  CHECK(torch::equal(out.latents.z_depth, z_depth));
  CHECK(torch::equal(out.latents.z_where, z_where));
  CHECK(torch::equal(out.latents.z_cat, z_cat));
  CHECK(torch::equal(out.latents.z_what, z_what));
  CHECK(torch::equal(out.post.cat_logits, logits));
  CHECK(torch::equal(out.post.what_mean, what_mean));
  CHECK(torch::equal(out.post.what_log_std, what_log_std));
}

TEST_CASE("monte carlo terms average the per-sample conditional divergences") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  cfg.model.mc_samples = 3;
  cfg.model.sample_where_for_glimpse = true;
  SceneModel model(cfg.model);
  auto x = torch::rand({1, 3, 32, 32});

  auto gen = make_generator(5);
  auto out = model->forward(x, gen);

  auto replay = make_generator(5);
  auto gp = model->encoder->grid(x);
  const double tau = cfg.model.gumbel_temperature;
  sample_gumbel_binary(gp.pres_prob, tau, replay, true);
  sample_gaussian(gp.depth_mean, gp.depth_log_std, replay);
  auto pi = torch::full({3}, 1.0 / 3.0);
  torch::Tensor cat_sum, what_sum, first_where;
  for (int m = 0; m < 3; ++m) {
    auto z_where = sample_gaussian(gp.where_mean, gp.where_log_std, replay);
    auto boxes = decode_where(z_where, cfg.model);
    auto glimpses = extract_glimpses(x, boxes, 8, 8);
    auto logits = model->encoder->cat_logits(glimpses);
    auto z_cat = sample_gumbel_softmax(logits, tau, replay, false);
    auto [wm, wls] = model->encoder->what_params(glimpses, z_cat);
    auto kc = kl_categorical(logits, pi);
    auto kw = kl_what_term(wm, wls, z_cat, model->mixture);
    cat_sum = m == 0 ? kc : cat_sum + kc;
    what_sum = m == 0 ? kw : what_sum + kw;
    if (m == 0) {
      first_where = z_where;
      sample_gaussian(wm, wls, replay);
    }
  }

  CHECK(torch::allclose(out.kl_cat_cells, cat_sum / 3.0, 1e-6, 1e-7));
  CHECK(torch::allclose(out.kl_what_cells, what_sum / 3.0, 1e-6, 1e-7));
  CHECK(torch::equal(out.latents.z_where, first_where));
}

TEST_CASE("hard category sampling yields exact one-hots in the forward pass") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  cfg.model.hard_cat_samples = true;
  SceneModel model(cfg.model);
  auto gen = make_generator(3);
  auto x = torch::rand({2, 3, 32, 32});

  auto out = model->forward(x, gen);
  CHECK(binary_valued(out.latents.z_cat));
  CHECK(torch::equal(out.latents.z_cat.sum(-1), torch::ones({2, cfg.model.cells()})));
}

TEST_CASE("mode inference is sampling-free, thresholded, and bitwise stable") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  model->eval();
  torch::NoGradGuard ng;
  auto x = torch::rand({2, 3, 32, 32});

  auto [post1, grid1] = model->encode_modes(x);
  auto [post2, grid2] = model->encode_modes(x);

  CHECK(torch::equal(grid1.z_pres, grid2.z_pres));
  CHECK(torch::equal(grid1.z_what, grid2.z_what));
  CHECK(torch::equal(grid1.z_cat, grid2.z_cat));
  CHECK(torch::equal(grid1.z_where, grid2.z_where));
  CHECK(torch::equal(grid1.z_depth, grid2.z_depth));

  CHECK(binary_valued(grid1.z_cat));
  CHECK(torch::equal(grid1.z_cat.sum(-1), torch::ones({2, cfg.model.cells()})));
  CHECK(torch::equal(grid1.z_pres, (post1.pres_prob >= 0.5).to(torch::kFloat)));
  CHECK(torch::equal(grid1.z_what, post1.what_mean));
  CHECK(torch::equal(grid1.z_where, post1.where_mean));
  CHECK(torch::equal(grid1.z_depth, post1.depth_mean));
}

TEST_CASE("render_latents composites a mode grid into a bounded scene") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  model->eval();
  torch::NoGradGuard ng;
  auto x = torch::rand({1, 3, 32, 32});

  auto [post, grid] = model->encode_modes(x);
  auto r1 = model->render_latents(grid);
  auto r2 = model->render_latents(grid);
  CHECK(r1.image.sizes() == torch::IntArrayRef({1, 3, 32, 32}));
  CHECK(r1.rgb_canvas.sizes() == torch::IntArrayRef({1, cfg.model.cells(), 3, 32, 32}));
  CHECK(r1.image.min().item<double>() >= 0.0);
  CHECK(r1.image.max().item<double>() <= 1.0);
  CHECK(torch::equal(r1.image, r2.image));
}

TEST_CASE("parameter groups partition the parameter list") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  auto groups = model->param_groups();

  CHECK(groups.mixture.size() == 2);
  CHECK(groups.encoder.size() + groups.decoder.size() + groups.mixture.size() ==
        model->parameters().size());

  std::set<void*> seen;
  for (const auto* g : {&groups.encoder, &groups.decoder, &groups.mixture})
    for (const auto& p : *g) seen.insert(p.data_ptr());
  CHECK(seen.size() == model->parameters().size());
}

TEST_CASE("gradients reach every module group") {
  torch::manual_seed(0);
  auto cfg = tiny_train_config();
  SceneModel model(cfg.model);
  auto gen = make_generator(2);
  auto x = torch::rand({1, 3, 32, 32});

  auto out = model->forward(x, gen);
  auto bd = model_loss(model, cfg, x, out, 100);
  CHECK(bd.total.isfinite().item<bool>());
  bd.total.backward();

  for (const auto& item : model->named_parameters()) {
    auto g = item.value().grad();
    REQUIRE_MESSAGE(g.defined(), item.key());
    CHECK_MESSAGE(g.isfinite().all().item<bool>(), item.key());
  }
  CHECK(model->mixture->mu.grad().abs().sum().item<double>() > 0.0);
  auto dec_params = model->decoder->parameters();
  double dec_norm = 0.0;
  for (const auto& p : dec_params) dec_norm += p.grad().abs().sum().item<double>();
  CHECK(dec_norm > 0.0);
}

TEST_CASE("checkpoint round trip restores parameters, optimizer, rng, and meta") {
  auto cfg = tiny_train_config();
  const auto path = temp_path("mixdet_test_ckpt_roundtrip.bin");

  torch::manual_seed(1);
  SceneModel a(cfg.model);
  torch::optim::Adam opt_a(a->parameters(), torch::optim::AdamOptions(1e-3));
  auto gen_a = make_generator(40);
  torch::manual_seed(3);
  auto x = torch::rand({1, 3, 32, 32});

  auto out = a->forward(x, gen_a);
  auto bd = model_loss(a, cfg, x, out, 0);
  opt_a.zero_grad();
  bd.total.backward();
  opt_a.step();

  save_checkpoint(path, a, &opt_a, gen_a, cfg, 123);

  auto meta = read_checkpoint_meta(path);
  CHECK(meta.step == 123);
  CHECK(meta.has_optimizer);
  CHECK(meta.config == cfg);

  torch::manual_seed(2);
  SceneModel b(cfg.model);
  torch::optim::Adam opt_b(b->parameters(), torch::optim::AdamOptions(1e-3));
  auto gen_b = make_generator(9999);

  bool differed = false;
  auto pa = a->parameters();
  auto pb = b->parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    if (!torch::equal(pa[i], pb[i])) differed = true;
  CHECK(differed);

  auto loaded = load_checkpoint(path, b, &opt_b, &gen_b);
  CHECK(loaded.step == 123);
  pb = b->parameters();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));

  auto out_a = a->forward(x, gen_a);
  auto out_b = b->forward(x, gen_b);
  CHECK(torch::equal(out_a.render.image, out_b.render.image));

  auto bd_a = model_loss(a, cfg, x, out_a, 1);
  opt_a.zero_grad();
  bd_a.total.backward();
  opt_a.step();
  auto bd_b = model_loss(b, cfg, x, out_b, 1);
  opt_b.zero_grad();
  bd_b.total.backward();
  opt_b.step();
  pa = a->parameters();
  pb = b->parameters();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));

  std::remove(path.c_str());
}

TEST_CASE("checkpoint without optimizer state refuses an optimizer restore") {
  auto cfg = tiny_train_config();
  const auto path = temp_path("mixdet_test_ckpt_noopt.bin");
  torch::manual_seed(1);
  SceneModel a(cfg.model);
  auto gen = make_generator(1);
  save_checkpoint(path, a, nullptr, gen, cfg, 7);

  auto meta = read_checkpoint_meta(path);
  CHECK(!meta.has_optimizer);

  SceneModel b(cfg.model);
  torch::optim::Adam opt(b->parameters(), torch::optim::AdamOptions(1e-3));
  CHECK_THROWS_AS(load_checkpoint(path, b, &opt), CheckpointError);
  CHECK_NOTHROW(load_checkpoint(path, b));
  std::remove(path.c_str());
}

TEST_CASE("corrupted or foreign checkpoint files are rejected") {
  auto cfg = tiny_train_config();
  const auto path = temp_path("mixdet_test_ckpt_corrupt.bin");
  torch::manual_seed(1);
  SceneModel a(cfg.model);
  auto gen = make_generator(1);
  save_checkpoint(path, a, nullptr, gen, cfg, 1);

  auto slurp = [&]() {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  auto spit = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size()));
  };
  const std::string original = slurp();

  auto flipped = original;
  flipped[40] = char(flipped[40] ^ 0x5a);
  spit(flipped);
  CHECK_THROWS_WITH_AS(read_checkpoint_meta(path), doctest::Contains("checksum"),
                       CheckpointError);

  spit(original.substr(0, 10));
  CHECK_THROWS_WITH_AS(read_checkpoint_meta(path), doctest::Contains("truncated"),
                       CheckpointError);

  auto wrong_magic = original;
  wrong_magic[0] = 'X';
  spit(wrong_magic);
  CHECK_THROWS_WITH_AS(read_checkpoint_meta(path),
                       doctest::Contains("not a checkpoint"), CheckpointError);

  auto wrong_version = original;
  wrong_version[4] = char(wrong_version[4] + 1);
  spit(wrong_version);
  CHECK_THROWS_WITH_AS(read_checkpoint_meta(path), doctest::Contains("version"),
                       CheckpointError);

  std::remove(path.c_str());
  CHECK_THROWS_AS(read_checkpoint_meta(path), IoError);
}

TEST_CASE("checkpoint rejects a mismatched architecture") {
  auto cfg = tiny_train_config();
  const auto path = temp_path("mixdet_test_ckpt_arch.bin");
  torch::manual_seed(1);
  SceneModel a(cfg.model);
  auto gen = make_generator(1);
  save_checkpoint(path, a, nullptr, gen, cfg, 1);

  auto other = cfg;
  other.model.what_dim = 12;
  SceneModel b(other.model);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, b), doctest::Contains("fit"),
                       CheckpointError);
  std::remove(path.c_str());
}

TEST_SUITE_END();
