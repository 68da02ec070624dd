#include "mixdet/manipulation.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "mixdet/errors.hpp"
#include "mixdet/inference.hpp"
#include "mixdet/metrics.hpp"

namespace mixdet {

namespace {

void require_single_scene(const LatentGrid& grid, const char* op) {
  if (grid.batch() != 1)
    throw ValidationError(std::string(op) + " works on one scene at a time");
}

std::vector<int64_t> present_cells(const LatentGrid& grid) {
  std::vector<int64_t> cells;
  auto pres = grid.z_pres[0];
  for (int64_t c = 0; c < grid.cells(); ++c)
    if (pres[c].item<double>() > 0.5) cells.push_back(c);
  return cells;
}

void require_hard_cat(const LatentGrid& grid) {
  auto zc = grid.z_cat;
  const bool binary = torch::all((zc == 0.0) | (zc == 1.0)).item<bool>();
  const bool rows = torch::all(zc.sum(-1) == 1.0).item<bool>();
  if (!binary || !rows)
    throw ValidationError(
        "relaxed category vectors cannot be decomposed; run deterministic_infer "
        "to get hard modes");
}

RenderResult render_quiet(SceneModel& model, const LatentGrid& grid) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  auto render = model->render_latents(grid);
  model->train(was_training);
  return render;
}

}  // namespace

LatentGrid deterministic_infer(SceneModel& model, const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  auto grid = model->encode_modes(x).second;
  model->train(was_training);
  return grid;
}

std::vector<ObjectLatent> decompose(const LatentGrid& grid,
                                    const MixturePrior& mixture) {
  require_single_scene(grid, "decompose");
  require_hard_cat(grid);
  auto mu = mixture->mu.detach().to(torch::kDouble);
  if (mu.size(1) != grid.z_what.size(-1))
    throw ValidationError("mixture and grid appearance dimensions disagree");
  auto what = grid.z_what[0].to(torch::kDouble);

  std::vector<ObjectLatent> objects;
  for (const int64_t c : present_cells(grid)) {
    ObjectLatent o;
    o.cell = c;
    o.cluster = grid.z_cat[0][c].argmax().item<int64_t>();
    o.z_avg = mu[o.cluster].clone();
    o.z_local = what[c] - o.z_avg;
    o.z_where = grid.z_where[0][c].clone();
    o.z_depth = grid.z_depth[0][c].clone();
    objects.push_back(std::move(o));
  }
  return objects;
}

LatentGrid recompose(const LatentGrid& grid,
                     const std::vector<ObjectLatent>& objects) {
  require_single_scene(grid, "recompose");
  LatentGrid out{grid.z_pres.clone(), grid.z_what.clone(), grid.z_cat.clone(),
                 grid.z_where.clone(), grid.z_depth.clone()};
  const int64_t C = grid.z_cat.size(-1);
  for (const auto& o : objects) {
    if (o.cell < 0 || o.cell >= grid.cells())
      throw ValidationError("object cell index out of range");
    if (o.cluster < 0 || o.cluster >= C)
      throw ValidationError("object cluster id out of range");
    out.z_what[0][o.cell] =
        (o.z_avg + o.z_local).to(grid.z_what.scalar_type());
    out.z_cat[0][o.cell] =
        torch::one_hot(torch::tensor(o.cluster), C).to(grid.z_cat.scalar_type());
    out.z_where[0][o.cell] = o.z_where;
    out.z_depth[0][o.cell] = o.z_depth;
  }
  return out;
}

ManipulationResult swap_category(SceneModel& model, const LatentGrid& grid,
                                 int64_t target_k) {
  const int64_t C = model->config().num_clusters;
  if (target_k < 0 || target_k >= C)
    throw ValidationError("target cluster id out of range");
  auto objects = decompose(grid, model->mixture);
  auto mu = model->mixture->mu.detach().to(torch::kDouble);
  for (auto& o : objects) {
    if (o.cluster == target_k) continue;
    o.z_avg = mu[target_k].clone();
    o.cluster = target_k;
  }
  auto swapped = recompose(grid, objects);
  return {swapped, render_quiet(model, swapped)};
}

ManipulationResult vary_local(SceneModel& model, const LatentGrid& grid,
                              double noise_scale, torch::Generator& gen) {
  if (noise_scale < 0.0) throw ValidationError("noise_scale must be >= 0");
  auto objects = decompose(grid, model->mixture);
  const int64_t A = grid.z_what.size(-1);
  for (auto& o : objects)
    o.z_local = noise_scale * torch::randn({A}, gen, torch::dtype(torch::kDouble));
  auto varied = recompose(grid, objects);
  return {varied, render_quiet(model, varied)};
}

LatentGrid shuffle_objects(const LatentGrid& grid,
                           const std::vector<int64_t>& perm) {
  require_single_scene(grid, "shuffle_objects");
  const auto cells = present_cells(grid);
  if (cells.empty()) throw ValidationError("no present objects to shuffle");
  if (perm.size() != cells.size())
    throw ValidationError("permutation length does not match the object count");
  std::vector<int64_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int64_t> iota(perm.size());
  std::iota(iota.begin(), iota.end(), 0);
  if (sorted != iota) throw ValidationError("not a permutation of the objects");

  LatentGrid out{grid.z_pres.clone(), grid.z_what.clone(), grid.z_cat.clone(),
                 grid.z_where.clone(), grid.z_depth.clone()};
  for (size_t i = 0; i < cells.size(); ++i) {
    const int64_t dst = cells[i];
    const int64_t src = cells[size_t(perm[i])];
    out.z_what[0][dst] = grid.z_what[0][src];
    out.z_depth[0][dst] = grid.z_depth[0][src];
    out.z_cat[0][dst] = grid.z_cat[0][src];
  }
  return out;
}

ManipulationResult shuffle_objects(SceneModel& model, const LatentGrid& grid,
                                   torch::Generator& gen) {
  const auto cells = present_cells(grid);
  if (cells.empty()) throw ValidationError("no present objects to shuffle");
  auto idx = torch::randperm(int64_t(cells.size()), gen,
                             torch::dtype(torch::kInt64));
  std::vector<int64_t> perm(idx.data_ptr<int64_t>(),
                            idx.data_ptr<int64_t>() + idx.numel());
  auto shuffled = shuffle_objects(grid, perm);
  return {shuffled, render_quiet(model, shuffled)};
}

int64_t export_latents(SceneModel& model, const Dataset& dataset,
                       const std::string& out_path, double iou_threshold,
                       double alpha_threshold) {
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write latent export: " + out_path);
  const auto& cfg = model->config();
  out << "scene_id,cluster,class";
  for (int64_t a = 0; a < cfg.what_dim; ++a) out << ",dim_" << a;
  out << "\n";
  out << std::setprecision(9);

  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();

  int64_t rows = 0;
  for (int64_t i = 0; i < dataset.size(); ++i) {
    auto x = dataset.get(i).image.unsqueeze(0);
    auto [post, grid] = model->encode_modes(x);
    auto corners = boxes_to_corners(decode_where(grid.z_where, cfg))[0];
    auto rgba = model->decoder->forward(grid.z_what)[0];
    auto pres = post.pres_prob[0];
    auto cluster = grid.z_cat[0].argmax(-1);
    const auto& ann = dataset.annotation(i);

    for (int64_t c = 0; c < cfg.cells(); ++c) {
      const double p = pres[c].item<double>();
      if (p < 0.5) continue;
      Detection d;
      auto b = corners[c];
      d.box = {b[0].item<double>(), b[1].item<double>(), b[2].item<double>(),
               b[3].item<double>()};
      d.score = p;
      d.cluster = cluster[c].item<int64_t>();
      d = refine_box(d, rgba[c][3], alpha_threshold);

      int64_t best = -1;
      double best_iou = 0.0;
      for (int64_t g = 0; g < int64_t(ann.boxes.size()); ++g) {
        const double v = iou(d.box, ann.boxes[size_t(g)]);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best < 0 || best_iou < iou_threshold) continue;

      out << ann.id << "," << d.cluster << "," << ann.labels[size_t(best)];
      auto what = grid.z_what[0][c];
      for (int64_t a = 0; a < cfg.what_dim; ++a)
        out << "," << what[a].item<float>();
      out << "\n";
      ++rows;
    }
  }
  model->train(was_training);
  out.flush();
  if (!out.good()) throw IoError("failed writing latent export: " + out_path);
  return rows;
}

}  // namespace mixdet
