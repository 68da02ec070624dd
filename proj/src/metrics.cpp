#include "mixdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mixdet/errors.hpp"
#include "mixdet/inference.hpp"

namespace mixdet {

namespace {

struct RankedDet {
  double score;
  int64_t scene;
  int64_t index;
};

/// Score-descending pool of all detections with a deterministic tie order.
std::vector<RankedDet> rank_detections(
    const std::vector<std::vector<Detection>>& dets) {
  std::vector<RankedDet> ranked;
  for (int64_t s = 0; s < int64_t(dets.size()); ++s)
    for (int64_t i = 0; i < int64_t(dets[size_t(s)].size()); ++i)
      ranked.push_back({dets[size_t(s)][size_t(i)].score, s, i});
  std::sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });
  return ranked;
}

}  // namespace

double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Detection refine_box(const Detection& d, const torch::Tensor& glimpse_alpha,
                     double alpha_threshold) {
  auto alpha = glimpse_alpha;
  if (alpha.dim() == 3 && alpha.size(0) == 1) alpha = alpha.squeeze(0);
  TORCH_CHECK(alpha.dim() == 2, "refine_box expects a single [gh, gw] alpha mask");
  auto mask = alpha > alpha_threshold;
  if (!mask.any().item<bool>()) return d;
  auto rows = mask.any(1).nonzero().view(-1);
  auto cols = mask.any(0).nonzero().view(-1);
  const double gh = double(alpha.size(0));
  const double gw = double(alpha.size(1));
  const double r0 = double(rows[0].item<int64_t>());
  const double r1 = double(rows[rows.numel() - 1].item<int64_t>()) + 1.0;
  const double c0 = double(cols[0].item<int64_t>());
  const double c1 = double(cols[cols.numel() - 1].item<int64_t>()) + 1.0;
  const double w = d.box[2] - d.box[0];
  const double h = d.box[3] - d.box[1];
  Detection out = d;
  out.box = {d.box[0] + w * c0 / gw, d.box[1] + h * r0 / gh,
             d.box[0] + w * c1 / gw, d.box[1] + h * r1 / gh};
  return out;
}

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<SceneAnnotation>& gts,
                         double iou_threshold) {
  TORCH_CHECK(dets.size() == gts.size(),
              "average_precision: detection and ground-truth scene counts differ");
  int64_t total_gt = 0;
  for (const auto& g : gts) total_gt += int64_t(g.boxes.size());
  if (total_gt == 0) return 0.0;

  auto ranked = rank_detections(dets);
  std::vector<std::vector<char>> matched(gts.size());
  for (size_t s = 0; s < gts.size(); ++s) matched[s].assign(gts[s].boxes.size(), 0);

  std::vector<double> precision, recall;
  int64_t tp = 0;
  for (size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& det = dets[size_t(r.scene)][size_t(r.index)];
    const auto& scene_gt = gts[size_t(r.scene)];
    int64_t best = -1;
    double best_iou = 0.0;
    for (int64_t g = 0; g < int64_t(scene_gt.boxes.size()); ++g) {
      if (matched[size_t(r.scene)][size_t(g)]) continue;
      const double v = iou(det.box, scene_gt.boxes[size_t(g)]);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      matched[size_t(r.scene)][size_t(best)] = 1;
      ++tp;
    }
    precision.push_back(double(tp) / double(k + 1));
    recall.push_back(double(tp) / double(total_gt));
  }
  if (precision.empty()) return 0.0;

  // All-points area under the precision envelope.
  for (int64_t i = int64_t(precision.size()) - 2; i >= 0; --i)
    precision[size_t(i)] = std::max(precision[size_t(i)], precision[size_t(i + 1)]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

std::vector<std::pair<int64_t, int64_t>> filter_correct(
    const std::vector<std::vector<Detection>>& dets,
    const std::vector<SceneAnnotation>& gts, double iou_threshold) {
  TORCH_CHECK(dets.size() == gts.size(),
              "filter_correct: detection and ground-truth scene counts differ");
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (size_t s = 0; s < dets.size(); ++s) {
    const auto& scene_gt = gts[s];
    for (const auto& d : dets[s]) {
      int64_t best = -1;
      double best_iou = 0.0;
      for (int64_t g = 0; g < int64_t(scene_gt.boxes.size()); ++g) {
        const double v = iou(d.box, scene_gt.boxes[size_t(g)]);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best >= 0 && best_iou >= iou_threshold)
        pairs.emplace_back(d.cluster, scene_gt.labels[size_t(best)]);
    }
  }
  return pairs;
}

double clustering_acc(const std::vector<std::pair<int64_t, int64_t>>& pairs,
                      int64_t num_clusters, int64_t num_classes) {
  if (pairs.empty())
    throw UndefinedMetricError("clustering accuracy of an empty pair list");
  std::vector<std::vector<int64_t>> counts(
      size_t(num_clusters), std::vector<int64_t>(size_t(num_classes), 0));
  for (const auto& [k, j] : pairs) {
    if (k < 0 || k >= num_clusters)
      throw ValidationError("cluster id out of range");
    if (j < 0 || j >= num_classes) throw ValidationError("class id out of range");
    counts[size_t(k)][size_t(j)] += 1;
  }
  int64_t hit = 0;
  for (const auto& row : counts) hit += *std::max_element(row.begin(), row.end());
  return double(hit) / double(pairs.size());
}

double clustering_nmi(const std::vector<std::pair<int64_t, int64_t>>& pairs) {
  if (pairs.empty())
    throw UndefinedMetricError("mutual information of an empty pair list");
  const double n = double(pairs.size());
  std::map<std::pair<int64_t, int64_t>, int64_t> joint;
  std::map<int64_t, int64_t> clusters, classes;
  for (const auto& p : pairs) {
    joint[p] += 1;
    clusters[p.first] += 1;
    classes[p.second] += 1;
  }
  double h_p = 0.0, h_g = 0.0, mi = 0.0;
  for (const auto& [k, c] : clusters) {
    const double q = double(c) / n;
    h_p -= q * std::log(q);
  }
  for (const auto& [j, c] : classes) {
    const double q = double(c) / n;
    h_g -= q * std::log(q);
  }
  for (const auto& [kj, c] : joint) {
    const double q = double(c) / n;
    const double qk = double(clusters[kj.first]) / n;
    const double qj = double(classes[kj.second]) / n;
    mi += q * std::log(q / (qk * qj));
  }
  if (h_p + h_g == 0.0) return 0.0;
  return std::clamp(2.0 * mi / (h_p + h_g), 0.0, 1.0);
}

std::vector<std::vector<Detection>> detect_scenes(SceneModel& model,
                                                  const Dataset& dataset,
                                                  double alpha_threshold) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  const auto& cfg = model->config();

  std::vector<std::vector<Detection>> out;
  out.reserve(size_t(dataset.size()));
  for (int64_t i = 0; i < dataset.size(); ++i) {
    auto x = dataset.get(i).image.unsqueeze(0);
    auto [post, grid] = model->encode_modes(x);
    auto corners = boxes_to_corners(decode_where(grid.z_where, cfg))[0];
    auto rgba = model->decoder->forward(grid.z_what)[0];
    auto pres = post.pres_prob[0];
    auto cluster = grid.z_cat[0].argmax(-1);

    std::vector<Detection> dets;
    for (int64_t c = 0; c < cfg.cells(); ++c) {
      const double p = pres[c].item<double>();
      if (p < 0.5) continue;
      Detection d;
      auto b = corners[c];
      d.box = {b[0].item<double>(), b[1].item<double>(), b[2].item<double>(),
               b[3].item<double>()};
      d.score = p;
      d.cluster = cluster[c].item<int64_t>();
      dets.push_back(refine_box(d, rgba[c][3], alpha_threshold));
    }
    out.push_back(std::move(dets));
  }
  model->train(was_training);
  return out;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<SceneAnnotation>& gts,
                               int64_t num_clusters, int64_t num_classes,
                               double iou_threshold) {
  EvalReport report;
  report.ap = average_precision(dets, gts, iou_threshold);
  auto pairs = filter_correct(dets, gts, iou_threshold);
  report.n_correct_boxes = int64_t(pairs.size());
  if (!pairs.empty()) {
    report.acc = clustering_acc(pairs, num_clusters, num_classes);
    report.nmi = clustering_nmi(pairs);
  }
  return report;
}

EvalReport evaluate(SceneModel& model, const Dataset& dataset,
                    double iou_threshold, double alpha_threshold) {
  auto dets = detect_scenes(model, dataset, alpha_threshold);
  return evaluate_detections(dets, dataset.annotations(),
                             model->config().num_clusters, 10, iou_threshold);
}

void export_detections(const std::string& path,
                       const std::vector<std::vector<Detection>>& dets,
                       const std::vector<std::string>& scene_ids) {
  TORCH_CHECK(dets.size() == scene_ids.size(),
              "export_detections: scene id count mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write detections: " + path);
  for (size_t s = 0; s < dets.size(); ++s) {
    auto boxes = nlohmann::ordered_json::array();
    auto labels = nlohmann::ordered_json::array();
    auto scores = nlohmann::ordered_json::array();
    for (const auto& d : dets[s]) {
      boxes.push_back({d.box[0], d.box[1], d.box[2], d.box[3]});
      labels.push_back(d.cluster);
      scores.push_back(d.score);
    }
    nlohmann::ordered_json line;
    line["id"] = scene_ids[s];
    line["boxes"] = boxes;
    line["labels"] = labels;
    line["score"] = scores;
    line["cluster"] = labels;
    out << line.dump() << "\n";
  }
  out.flush();
  if (!out.good()) throw IoError("failed writing detections: " + path);
}

}  // namespace mixdet
