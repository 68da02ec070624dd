#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <random>
#include <vector>

#include "mixdet/datasets.hpp"
#include "mixdet/errors.hpp"
#include "mixdet/metrics.hpp"
#include "mixdet/model.hpp"

#include "doctest_shim.hpp"

namespace fs = std::filesystem;
using namespace mixdet;

namespace {

using Box = std::array<double, 4>;
using Pairs = std::vector<std::pair<int64_t, int64_t>>;

/// Reference AP: recompute greedy matching from scratch for every prefix of
/// the ranked list, then integrate each distinct recall step against the
/// brute-force maximum precision at or beyond that recall.
double ap_oracle(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<SceneAnnotation>& gts, double thr) {
  struct Item {
    double score;
    int64_t scene, index;
  };
  std::vector<Item> ranked;
  for (int64_t s = 0; s < int64_t(dets.size()); ++s)
    for (int64_t i = 0; i < int64_t(dets[size_t(s)].size()); ++i)
      ranked.push_back({dets[size_t(s)][size_t(i)].score, s, i});
  std::sort(ranked.begin(), ranked.end(), [](const Item& a, const Item& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });

  int64_t total_gt = 0;
  for (const auto& g : gts) total_gt += int64_t(g.boxes.size());
  if (total_gt == 0 || ranked.empty()) return 0.0;

  auto prefix_tp = [&](size_t upto) {
    std::vector<std::vector<char>> used(gts.size());
    for (size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].boxes.size(), 0);
    int64_t tp = 0;
    for (size_t k = 0; k < upto; ++k) {
      const auto& r = ranked[k];
      const auto& db = dets[size_t(r.scene)][size_t(r.index)].box;
      int64_t best = -1;
      double best_iou = 0.0;
      for (int64_t g = 0; g < int64_t(gts[size_t(r.scene)].boxes.size()); ++g) {
        if (used[size_t(r.scene)][size_t(g)]) continue;
        const double v = iou(db, gts[size_t(r.scene)].boxes[size_t(g)]);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best >= 0 && best_iou >= thr) {
        used[size_t(r.scene)][size_t(best)] = 1;
        ++tp;
      }
    }
    return tp;
  };

  std::vector<double> prec(ranked.size()), rec(ranked.size());
  for (size_t k = 1; k <= ranked.size(); ++k) {
    const auto tp = prefix_tp(k);
    prec[k - 1] = double(tp) / double(k);
    rec[k - 1] = double(tp) / double(total_gt);
  }

  std::vector<double> levels = rec;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

  double ap = 0.0, prev = 0.0;
  for (const double r : levels) {
    if (r <= 0.0) continue;
    double best_p = 0.0;
    for (size_t k = 0; k < ranked.size(); ++k)
      if (rec[k] >= r) best_p = std::max(best_p, prec[k]);
    ap += (r - prev) * best_p;
    prev = r;
  }
  return ap;
}

double acc_oracle(const Pairs& pairs) {
  std::map<int64_t, std::map<int64_t, int64_t>> by_cluster;
  for (const auto& [k, j] : pairs) by_cluster[k][j] += 1;
  int64_t hit = 0;
  for (const auto& [k, hist] : by_cluster) {
    int64_t best = 0;
    for (const auto& [j, c] : hist) best = std::max(best, c);
    hit += best;
  }
  return double(hit) / double(pairs.size());
}

SceneAnnotation scene(std::vector<Box> boxes, std::vector<int64_t> labels,
                      const std::string& id = "s") {
  SceneAnnotation a;
  a.id = id;
  a.boxes = std::move(boxes);
  a.labels = std::move(labels);
  return a;
}

Detection det(Box b, double score, int64_t cluster = 0) {
  return Detection{b, score, cluster};
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    path = fs::temp_directory_path() /
           ("mixdet_mx_" + std::to_string(tick) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("intersection over union matches hand geometry") {
  CHECK(iou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {5, 5, 6, 6}) == 0.0);
  CHECK(iou({0, 0, 1, 1}, {1, 0, 2, 1}) == 0.0);
  CHECK(iou({0, 0, 1, 1}, {0.5, 0, 1.5, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.0, 50.0), w(1.0, 20.0);
  for (int t = 0; t < 50; ++t) {
    Box a{u(rng), u(rng), 0, 0}, b{u(rng), u(rng), 0, 0};
    a[2] = a[0] + w(rng);
    a[3] = a[1] + w(rng);
    b[2] = b[0] + w(rng);
    b[3] = b[1] + w(rng);
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("box refinement maps the alpha support through the box frame") {
  const Detection d = det({10, 20, 30, 40}, 0.9, 4);

  auto full = torch::ones({8, 8});
  auto r1 = refine_box(d, full);
  CHECK(r1.box == d.box);
  CHECK(r1.score == d.score);
  CHECK(r1.cluster == d.cluster);

  auto center = torch::zeros({8, 8});
  center.slice(0, 2, 6).slice(1, 2, 6).fill_(1.0);
  auto r2 = refine_box(d, center);
  CHECK(r2.box == Box{15, 25, 25, 35});

  auto empty = torch::zeros({8, 8});
  CHECK(refine_box(d, empty).box == d.box);

  auto faint = torch::full({8, 8}, 0.1);
  CHECK(refine_box(d, faint).box == d.box);
  faint[3][5] = 0.2;
  auto r3 = refine_box(d, faint);
  CHECK(r3.box == Box{10 + 20.0 * 5 / 8, 20 + 20.0 * 3 / 8, 10 + 20.0 * 6 / 8,
                      20 + 20.0 * 4 / 8});

  CHECK(refine_box(d, full.unsqueeze(0)).box == d.box);

  torch::manual_seed(3);
  for (int t = 0; t < 20; ++t) {
    auto alpha = torch::rand({8, 8});
    auto r = refine_box(d, alpha);
    CHECK(r.box[0] >= d.box[0]);
    CHECK(r.box[1] >= d.box[1]);
    CHECK(r.box[2] <= d.box[2]);
    CHECK(r.box[3] <= d.box[3]);
    CHECK(r.box[0] < r.box[2]);
    CHECK(r.box[1] < r.box[3]);
  }
}

TEST_CASE("average precision reproduces hand-computed curves") {
  const Box g0{0, 0, 10, 10}, g1{20, 20, 32, 30};

  std::vector<SceneAnnotation> gts{scene({g0, g1}, {1, 2})};
  std::vector<std::vector<Detection>> perfect{{det(g0, 0.6), det(g1, 0.4)}};
  CHECK(average_precision(perfect, gts) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<std::vector<Detection>> none{{}};
  CHECK(average_precision(none, gts) == 0.0);

  std::vector<SceneAnnotation> one_gt{scene({g0}, {1})};
  std::vector<std::vector<Detection>> miss_then_hit{
      {det({50, 50, 60, 60}, 0.9), det(g0, 0.5)}};
  CHECK(average_precision(miss_then_hit, one_gt) ==
        doctest::Approx(0.5).epsilon(1e-12));

  std::vector<std::vector<Detection>> duplicate{{det(g0, 0.9), det(g0, 0.5)}};
  CHECK(average_precision(duplicate, one_gt) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<std::vector<Detection>> half{{det(g0, 0.9)}};
  CHECK(average_precision(half, gts) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("average precision agrees with the brute-force oracle") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> pos(0.0, 100.0);
  std::uniform_real_distribution<double> side(6.0, 28.0);
  std::uniform_real_distribution<double> jitter(-8.0, 8.0);

  for (int inst = 0; inst < 50; ++inst) {
    const int scenes = 1 + int(rng() % 20);
    std::vector<SceneAnnotation> gts;
    std::vector<std::vector<Detection>> dets;
    for (int s = 0; s < scenes; ++s) {
      const int n_gt = int(rng() % 11);
      std::vector<Box> boxes;
      std::vector<int64_t> labels;
      std::vector<Detection> scene_dets;
      for (int g = 0; g < n_gt; ++g) {
        Box b{pos(rng), pos(rng), 0, 0};
        b[2] = b[0] + side(rng);
        b[3] = b[1] + side(rng);
        boxes.push_back(b);
        labels.push_back(int64_t(rng() % 10));
        if (unit(rng) < 0.7) {
          Box db{b[0] + jitter(rng), b[1] + jitter(rng), 0, 0};
          db[2] = db[0] + side(rng);
          db[3] = db[1] + side(rng);
          scene_dets.push_back(det(db, unit(rng), int64_t(rng() % 5)));
        }
      }
      const int spurious = int(rng() % 4);
      for (int f = 0; f < spurious; ++f) {
        Box db{pos(rng), pos(rng), 0, 0};
        db[2] = db[0] + side(rng);
        db[3] = db[1] + side(rng);
        scene_dets.push_back(det(db, unit(rng), int64_t(rng() % 5)));
      }
      gts.push_back(scene(std::move(boxes), std::move(labels)));
      dets.push_back(std::move(scene_dets));
    }
    const double fast = average_precision(dets, gts);
    const double slow = ap_oracle(dets, gts, 0.5);
    CHECK_MESSAGE(std::abs(fast - slow) < 1e-9,
                  "instance ", inst, ": ", fast, " vs oracle ", slow);
  }
}

TEST_CASE("correct-box filtering pairs detections with their argmax ground truth") {
  const Box g0{0, 0, 10, 10}, g1{0, 0, 12, 10};

  std::vector<SceneAnnotation> far{scene({g0}, {3})};
  std::vector<std::vector<Detection>> low{{det({6, 6, 16, 16}, 0.9, 1)}};
  CHECK(filter_correct(low, far).empty());

  std::vector<SceneAnnotation> two{scene({g0, g1}, {3, 7})};
  std::vector<std::vector<Detection>> one{{det({0, 0, 11, 10}, 0.9, 2)}};
  auto pairs = filter_correct(one, two);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].first == 2);
  CHECK(pairs[0].second == 7);

  std::vector<std::vector<Detection>> both{
      {det(g0, 0.9, 1), det(g0, 0.8, 2), det({50, 50, 60, 60}, 0.7, 3)}};
  auto kept = filter_correct(both, far);
  CHECK(kept.size() == 2);
  CHECK(kept.size() <= both[0].size());

  std::vector<SceneAnnotation> unit{scene({{0, 0, 2, 1}}, {5})};
  std::vector<std::vector<Detection>> boundary{{det({0, 0, 1, 1}, 0.9, 4)}};
  auto exact = filter_correct(boundary, unit);
  REQUIRE(exact.size() == 1);
  CHECK(exact[0].second == 5);
}

TEST_CASE("clustering accuracy implements the plurality formula") {
  Pairs identical{{0, 0}, {1, 1}, {2, 2}, {0, 0}};
  CHECK(clustering_acc(identical, 3, 3) == 1.0);

  Pairs hand{{0, 0}, {0, 0}, {0, 1}, {1, 1}};
  CHECK(clustering_acc(hand, 2, 2) == doctest::Approx(0.75).epsilon(1e-12));

  Pairs uniform;
  for (int64_t j = 0; j < 4; ++j)
    for (int r = 0; r < 5; ++r) uniform.emplace_back(0, j);
  CHECK(clustering_acc(uniform, 1, 4) == doctest::Approx(0.25).epsilon(1e-12));

  std::mt19937 rng(23);
  for (int t = 0; t < 20; ++t) {
    const int64_t C = 2 + int64_t(rng() % 5);
    const int64_t Cp = 2 + int64_t(rng() % 4);
    Pairs pairs;
    const int n = 5 + int(rng() % 60);
    for (int i = 0; i < n; ++i)
      pairs.emplace_back(int64_t(rng()) % C, int64_t(rng()) % Cp);
    const double acc = clustering_acc(pairs, C, Cp);
    CHECK(acc == doctest::Approx(acc_oracle(pairs)).epsilon(1e-12));
    CHECK(acc >= 1.0 / double(Cp));
    CHECK(acc <= 1.0);
  }

  CHECK_THROWS_AS(clustering_acc({}, 3, 3), UndefinedMetricError);
  CHECK_THROWS_AS(clustering_acc({{5, 0}}, 3, 3), ValidationError);
  CHECK_THROWS_AS(clustering_acc({{0, 7}}, 3, 3), ValidationError);
}

TEST_CASE("normalized mutual information on hand partitions") {
  Pairs identical{{0, 0}, {1, 1}, {0, 0}, {2, 2}, {1, 1}};
  CHECK(clustering_nmi(identical) == doctest::Approx(1.0).epsilon(1e-9));

  Pairs anti{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  CHECK(clustering_nmi(anti) == doctest::Approx(0.0).epsilon(1e-12));

  Pairs product;
  for (int64_t k = 0; k < 2; ++k)
    for (int64_t j = 0; j < 3; ++j)
      for (int r = 0; r < 1 + int(j); ++r) product.emplace_back(k, j);
  CHECK(clustering_nmi(product) == doctest::Approx(0.0).epsilon(1e-12));

  Pairs degenerate{{0, 0}, {0, 0}};
  CHECK(clustering_nmi(degenerate) == 0.0);

  std::mt19937 rng(31);
  for (int t = 0; t < 10; ++t) {
    Pairs pairs;
    const int n = 6 + int(rng() % 40);
    for (int i = 0; i < n; ++i)
      pairs.emplace_back(int64_t(rng() % 4), int64_t(rng() % 3));
    const double v = clustering_nmi(pairs);
    Pairs swapped;
    for (const auto& [a, b] : pairs) swapped.emplace_back(b, a);
    CHECK(clustering_nmi(swapped) == doctest::Approx(v).epsilon(1e-12));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK_THROWS_AS(clustering_nmi({}), UndefinedMetricError);
}

TEST_CASE("a ground-truth oracle scores a perfect report") {
  auto digits = make_glyph_digits(1, 9);
  TempDir tmp;
  auto manifest = generate_multimnist(digits, 12, 55, tmp.str());
  auto ds = load_dataset(manifest);

  std::vector<std::vector<Detection>> dets;
  double score = 0.99;
  int64_t distinct = 0;
  std::array<bool, 10> seen{};
  for (int64_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.annotation(i);
    std::vector<Detection> scene_dets;
    for (size_t g = 0; g < a.boxes.size(); ++g) {
      scene_dets.push_back(det(a.boxes[g], score, a.labels[g]));
      score -= 1e-4;
      if (!seen[size_t(a.labels[g])]) {
        seen[size_t(a.labels[g])] = true;
        ++distinct;
      }
    }
    dets.push_back(std::move(scene_dets));
  }
  REQUIRE(distinct >= 2);

  auto report = evaluate_detections(dets, ds.annotations(), 10, 10);
  CHECK(report.ap == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.acc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.nmi == doctest::Approx(1.0).epsilon(1e-9));
  int64_t total_gt = 0;
  for (const auto& a : ds.annotations()) total_gt += int64_t(a.boxes.size());
  CHECK(report.n_correct_boxes == total_gt);
}

TEST_CASE("model evaluation is deterministic and bounded") {
  Config cfg;
  cfg.model.image_height = 32;
  cfg.model.image_width = 32;
  cfg.model.grid_h = 4;
  cfg.model.grid_w = 4;
  cfg.model.what_dim = 8;
  cfg.model.num_clusters = 3;
  cfg.model.glimpse_h = 8;
  cfg.model.glimpse_w = 8;
  cfg.model.anchor_h = 12.0;
  cfg.model.anchor_w = 12.0;
  cfg.model.backbone = "tiny";

  auto digits = make_glyph_digits(1, 4);
  TempDir tmp;
  auto manifest = generate_multimnist(digits, 4, 19, tmp.str(), "train", 32);
  auto ds = load_dataset(manifest);

  torch::manual_seed(7);
  SceneModel model(cfg.model);
  auto r1 = evaluate(model, ds);
  auto r2 = evaluate(model, ds);
  CHECK(r1.ap == r2.ap);
  CHECK(r1.acc == r2.acc);
  CHECK(r1.nmi == r2.nmi);
  CHECK(r1.n_correct_boxes == r2.n_correct_boxes);
  CHECK(r1.ap >= 0.0);
  CHECK(r1.ap <= 1.0);
  CHECK(r1.acc >= 0.0);
  CHECK(r1.acc <= 1.0);
  CHECK(r1.nmi >= 0.0);
  CHECK(r1.nmi <= 1.0);
  CHECK(r1.n_correct_boxes >= 0);

  auto dets = detect_scenes(model, ds);
  REQUIRE(dets.size() == size_t(ds.size()));
  std::vector<std::string> ids;
  for (int64_t i = 0; i < ds.size(); ++i) ids.push_back(ds.annotation(i).id);
  const auto out = tmp.path / "detections.ndjson";
  export_detections(out.string(), dets, ids);
  CHECK(fs::exists(out));
}

}  // TEST_SUITE
