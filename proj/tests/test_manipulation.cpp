#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "mixdet/datasets.hpp"
#include "mixdet/errors.hpp"
#include "mixdet/manipulation.hpp"
#include "mixdet/metrics.hpp"
#include "mixdet/model.hpp"

#include "doctest_shim.hpp"

namespace fs = std::filesystem;
using namespace mixdet;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.image_height = 32;
  m.image_width = 32;
  m.grid_h = 4;
  m.grid_w = 4;
  m.what_dim = 8;
  m.num_clusters = 3;
  m.glimpse_h = 8;
  m.glimpse_w = 8;
  m.anchor_h = 12.0;
  m.anchor_w = 12.0;
  m.backbone = "tiny";
  return m;
}

/// Single-scene grid with chosen present cells and hard cluster assignments.
LatentGrid manual_grid(const ModelConfig& m, const std::vector<int64_t>& present,
                       const std::vector<int64_t>& clusters, uint64_t seed) {
  REQUIRE(present.size() == clusters.size());
  auto gen = make_generator(seed);
  const int64_t N = m.cells();
  LatentGrid g;
  g.z_pres = torch::zeros({1, N});
  g.z_what = torch::randn({1, N, m.what_dim}, gen);
  g.z_cat = torch::zeros({1, N, m.num_clusters});
  g.z_cat.select(-1, 0).fill_(1.0);
  g.z_where = torch::randn({1, N, 4}, gen) * 0.3;
  g.z_depth = torch::randn({1, N}, gen);
  for (size_t i = 0; i < present.size(); ++i) {
    g.z_pres[0][present[i]] = 1.0;
    g.z_cat[0][present[i]].zero_();
    g.z_cat[0][present[i]][clusters[i]] = 1.0;
  }
  return g;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("mixdet_mp_" + std::to_string(tick) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

bool grids_equal(const LatentGrid& a, const LatentGrid& b) {
  return torch::equal(a.z_pres, b.z_pres) && torch::equal(a.z_what, b.z_what) &&
         torch::equal(a.z_cat, b.z_cat) && torch::equal(a.z_where, b.z_where) &&
         torch::equal(a.z_depth, b.z_depth);
}

}  // namespace

TEST_SUITE("manipulation") {

TEST_CASE("deterministic inference is bitwise stable and mode-valued") {
  torch::manual_seed(41);
  SceneModel model(tiny_model());
  model->train();
  auto gen = make_generator(9);
  auto x = torch::rand({1, 3, 32, 32}, gen);

  auto g1 = deterministic_infer(model, x);
  auto g2 = deterministic_infer(model, x);
  CHECK(grids_equal(g1, g2));
  CHECK(model->is_training());

  CHECK(torch::all((g1.z_pres == 0.0) | (g1.z_pres == 1.0)).item<bool>());
  CHECK(torch::all((g1.z_cat == 0.0) | (g1.z_cat == 1.0)).item<bool>());
  CHECK(torch::all(g1.z_cat.sum(-1) == 1.0).item<bool>());
  CHECK_FALSE(g1.z_what.requires_grad());

  model->eval();
  auto direct = model->encode_modes(x).second;
  CHECK(grids_equal(g1, direct));
}

TEST_CASE("decomposition splits appearance around cluster means") {
  auto m = tiny_model();
  auto grid = manual_grid(m, {1, 4, 9, 14}, {0, 2, 1, 2}, 5);
  torch::manual_seed(6);
  MixturePrior mixture(m.num_clusters, m.what_dim);

  auto objects = decompose(grid, mixture);
  REQUIRE(objects.size() == 4);
  const std::vector<int64_t> want_cells{1, 4, 9, 14};
  const std::vector<int64_t> want_clusters{0, 2, 1, 2};
  auto mu64 = mixture->mu.detach().to(torch::kDouble);
  for (size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    CHECK(o.cell == want_cells[i]);
    CHECK(o.cluster == want_clusters[i]);
    CHECK(torch::equal(o.z_avg, mu64[o.cluster]));
    auto rebuilt = (o.z_avg + o.z_local).to(torch::kFloat);
    CHECK(torch::equal(rebuilt, grid.z_what[0][o.cell]));
    CHECK(torch::equal(o.z_where, grid.z_where[0][o.cell]));
    CHECK(torch::equal(o.z_depth, grid.z_depth[0][o.cell]));
  }

  {
    torch::NoGradGuard no_grad;
    grid.z_what[0][9] = mixture->mu.detach()[1];
  }
  auto again = decompose(grid, mixture);
  CHECK(torch::equal(again[2].z_local, torch::zeros({m.what_dim}, torch::kDouble)));

  auto soft = manual_grid(m, {1}, {0}, 5);
  soft.z_cat = torch::softmax(torch::randn({1, m.cells(), m.num_clusters}), -1);
  CHECK_THROWS_WITH_AS(decompose(soft, mixture),
                       doctest::Contains("deterministic_infer"), ValidationError);

  LatentGrid batched;
  batched.z_pres = torch::ones({2, m.cells()});
  batched.z_what = torch::zeros({2, m.cells(), m.what_dim});
  batched.z_cat = torch::zeros({2, m.cells(), m.num_clusters});
  batched.z_cat.select(-1, 0).fill_(1.0);
  batched.z_where = torch::zeros({2, m.cells(), 4});
  batched.z_depth = torch::zeros({2, m.cells()});
  CHECK_THROWS_AS(decompose(batched, mixture), ValidationError);
}

TEST_CASE("recomposition is the exact inverse of decomposition") {
  auto m = tiny_model();
  auto grid = manual_grid(m, {0, 3, 7, 11, 15}, {2, 0, 1, 1, 2}, 17);
  torch::manual_seed(18);
  MixturePrior mixture(m.num_clusters, m.what_dim);

  auto objects = decompose(grid, mixture);
  auto back = recompose(grid, objects);
  CHECK(grids_equal(grid, back));

  ObjectLatent rogue = objects[0];
  rogue.cell = m.cells() + 3;
  CHECK_THROWS_AS(recompose(grid, {rogue}), ValidationError);
  rogue = objects[0];
  rogue.cluster = m.num_clusters;
  CHECK_THROWS_AS(recompose(grid, {rogue}), ValidationError);
}

TEST_CASE("category swap rewrites the average component and renders") {
  auto m = tiny_model();
  torch::manual_seed(23);
  SceneModel model(m);
  auto grid = manual_grid(m, {2, 5, 8}, {1, 1, 1}, 29);

  auto same = swap_category(model, grid, 1);
  CHECK(torch::equal(same.grid.z_what, grid.z_what));
  CHECK(torch::equal(same.grid.z_cat, grid.z_cat));

  auto swapped = swap_category(model, grid, 2);
  auto mu64 = model->mixture->mu.detach().to(torch::kDouble);
  auto before = decompose(grid, model->mixture);
  auto after = decompose(swapped.grid, model->mixture);
  REQUIRE(after.size() == before.size());
  for (size_t i = 0; i < after.size(); ++i) {
    CHECK(after[i].cluster == 2);
    CHECK(torch::allclose(after[i].z_avg, mu64[2]));
    CHECK(torch::allclose(after[i].z_local, before[i].z_local, 1e-6, 1e-6));
    auto what = swapped.grid.z_what[0][after[i].cell].to(torch::kDouble);
    CHECK(torch::allclose(what - before[i].z_local, mu64[2], 1e-6, 1e-6));
  }
  CHECK_FALSE(torch::equal(swapped.grid.z_what, grid.z_what));
  CHECK_FALSE(torch::equal(swapped.render.image, same.render.image));

  auto restored = swap_category(model, swapped.grid, 1);
  CHECK(torch::allclose(restored.grid.z_what, grid.z_what, 1e-6, 1e-6));

  CHECK(same.render.image.sizes() == torch::IntArrayRef({1, 3, 32, 32}));
  CHECK_FALSE(same.render.image.requires_grad());
  CHECK_THROWS_AS(swap_category(model, grid, m.num_clusters), ValidationError);
}

TEST_CASE("local variation resamples style around the kept means") {
  auto m = tiny_model();
  torch::manual_seed(31);
  SceneModel model(m);
  auto grid = manual_grid(m, {1, 6, 12}, {0, 2, 1}, 33);

  auto gen0 = make_generator(2);
  auto flat = vary_local(model, grid, 0.0, gen0);
  auto mu = model->mixture->mu.detach();
  auto objs = decompose(grid, model->mixture);
  for (const auto& o : objs)
    CHECK(torch::equal(flat.grid.z_what[0][o.cell], mu[o.cluster]));

  auto ga = make_generator(3);
  auto gb = make_generator(3);
  auto gc = make_generator(4);
  auto va = vary_local(model, grid, 1.5, ga);
  auto vb = vary_local(model, grid, 1.5, gb);
  auto vc = vary_local(model, grid, 1.5, gc);
  CHECK(grids_equal(va.grid, vb.grid));
  CHECK_FALSE(torch::equal(va.grid.z_what, vc.grid.z_what));

  CHECK(torch::equal(va.grid.z_cat, grid.z_cat));
  CHECK(torch::equal(va.grid.z_where, grid.z_where));
  CHECK(torch::equal(va.grid.z_pres, grid.z_pres));
  auto va_objs = decompose(va.grid, model->mixture);
  for (size_t i = 0; i < va_objs.size(); ++i)
    CHECK(va_objs[i].cluster == objs[i].cluster);

  auto gen_neg = make_generator(5);
  CHECK_THROWS_AS(vary_local(model, grid, -0.1, gen_neg), ValidationError);
}

TEST_CASE("object shuffling permutes appearance tuples among occupied cells") {
  auto m = tiny_model();
  torch::manual_seed(37);
  SceneModel model(m);
  const std::vector<int64_t> cells{0, 2, 5, 11, 13};
  auto grid = manual_grid(m, cells, {0, 1, 2, 0, 1}, 39);

  auto same = shuffle_objects(grid, {0, 1, 2, 3, 4});
  CHECK(grids_equal(same, grid));

  const std::vector<int64_t> rot{1, 2, 3, 4, 0};
  auto moved = shuffle_objects(grid, rot);
  CHECK(torch::equal(moved.z_pres, grid.z_pres));
  CHECK(torch::equal(moved.z_where, grid.z_where));
  for (size_t i = 0; i < cells.size(); ++i) {
    const int64_t dst = cells[i];
    const int64_t src = cells[size_t(rot[i])];
    CHECK(torch::equal(moved.z_what[0][dst], grid.z_what[0][src]));
    CHECK(torch::equal(moved.z_cat[0][dst], grid.z_cat[0][src]));
    CHECK(torch::equal(moved.z_depth[0][dst], grid.z_depth[0][src]));
  }
  for (int64_t c = 0; c < m.cells(); ++c) {
    if (std::find(cells.begin(), cells.end(), c) != cells.end()) continue;
    CHECK(torch::equal(moved.z_what[0][c], grid.z_what[0][c]));
  }

  auto g_before = model->decoder->forward(grid.z_what);
  auto g_after = model->decoder->forward(moved.z_what);
  for (size_t i = 0; i < cells.size(); ++i)
    CHECK(torch::equal(g_after[0][cells[i]], g_before[0][cells[size_t(rot[i])]]));

  auto single = manual_grid(m, {7}, {1}, 40);
  auto gen1 = make_generator(11);
  auto one = shuffle_objects(model, single, gen1);
  CHECK(grids_equal(one.grid, single));

  auto ga = make_generator(12);
  auto gb = make_generator(12);
  auto sa = shuffle_objects(model, grid, ga);
  auto sb = shuffle_objects(model, grid, gb);
  CHECK(grids_equal(sa.grid, sb.grid));

  CHECK_THROWS_AS(shuffle_objects(grid, {0, 1}), ValidationError);
  CHECK_THROWS_AS(shuffle_objects(grid, {0, 1, 2, 3, 3}), ValidationError);
  auto nobody = manual_grid(m, {}, {}, 41);
  auto gen2 = make_generator(13);
  CHECK_THROWS_AS(shuffle_objects(model, nobody, gen2), ValidationError);
}

TEST_CASE("latent export lists one row per correct detection") {
  auto m = tiny_model();
  m.anchor_h = 28.0;
  m.anchor_w = 28.0;
  torch::manual_seed(43);
  SceneModel model(m);
  model->train();

  DigitSet ones{torch::ones({3, 28, 28}),
                torch::tensor(std::vector<int64_t>{1, 2, 3})};
  TempDir tmp;
  auto manifest = generate_multimnist(ones, 10, 47, tmp.str(), "train", 32);
  auto ds = load_dataset(manifest);

  const auto out = (tmp.path / "latents.csv").string();
  const int64_t rows = export_latents(model, ds, out);
  CHECK(model->is_training());

  CHECK(rows > 0);
  auto dets = detect_scenes(model, ds);
  auto pairs = filter_correct(dets, ds.annotations());
  CHECK(rows == int64_t(pairs.size()));

  std::ifstream in(out);
  REQUIRE(bool(in));
  std::string header;
  std::getline(in, header);
  std::string want = "scene_id,cluster,class";
  for (int64_t a = 0; a < m.what_dim; ++a) want += ",dim_" + std::to_string(a);
  CHECK(header == want);

  int64_t seen = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    REQUIRE(int64_t(fields.size()) == 3 + m.what_dim);
    CHECK(fields[0].rfind("scene_", 0) == 0);
    const int64_t cluster = std::stoll(fields[1]);
    const int64_t cls = std::stoll(fields[2]);
    CHECK(cluster >= 0);
    CHECK(cluster < m.num_clusters);
    CHECK(cls >= 1);
    CHECK(cls <= 3);
    CHECK(cluster == pairs[size_t(seen)].first);
    CHECK(cls == pairs[size_t(seen)].second);
    ++seen;
  }
  CHECK(seen == rows);
}

}  // TEST_SUITE
