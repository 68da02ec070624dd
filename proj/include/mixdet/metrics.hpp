#pragma once

#include <torch/torch.h>

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mixdet/datasets.hpp"
#include "mixdet/model.hpp"

namespace mixdet {

/// One predicted object: pixel box corners, confidence = posterior presence
/// probability, cluster = argmax of the categorical posterior.
struct Detection {
  std::array<double, 4> box{};  // x_min, y_min, x_max, y_max
  double score = 0.0;
  int64_t cluster = 0;
};

struct EvalReport {
  double ap = 0.0;
  double acc = 0.0;
  double nmi = 0.0;
  int64_t n_correct_boxes = 0;
};

/// Intersection area over union area of two corner boxes, in [0, 1].
double iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

/// Shrink a detection to the tight sub-box of glimpse pixels whose alpha
/// exceeds the threshold, mapped through the box's affine placement back to
/// image coordinates. alpha is [gh, gw] (or [1, gh, gw]) in [0, 1]. If no
/// pixel exceeds the threshold the box is returned unchanged. Never enlarges.
Detection refine_box(const Detection& d, const torch::Tensor& glimpse_alpha,
                     double alpha_threshold = 0.1);

/// Class-agnostic VOC average precision: detections pooled over scenes,
/// sorted by score descending, matched greedily one-to-one to the unmatched
/// ground truth of highest overlap (a true positive iff that overlap reaches
/// iou_threshold), and the precision-recall curve integrated by the
/// all-points area-under-curve method. dets and gts are index-aligned.
double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<SceneAnnotation>& gts,
                         double iou_threshold = 0.5);

/// Keep detections whose best overlap over all ground truths in their scene
/// reaches iou_threshold; pair each with the class of that argmax ground
/// truth. Returns (predicted cluster, ground-truth class) pairs in scene
/// order.
std::vector<std::pair<int64_t, int64_t>> filter_correct(
    const std::vector<std::vector<Detection>>& dets,
    const std::vector<SceneAnnotation>& gts, double iou_threshold = 0.5);

/// Many-to-one clustering accuracy: each cluster contributes the size of its
/// plurality class, summed and divided by the pair count. Ids must lie in
/// [0, num_clusters) and [0, num_classes).
double clustering_acc(const std::vector<std::pair<int64_t, int64_t>>& pairs,
                      int64_t num_clusters, int64_t num_classes);

/// Normalized mutual information 2 I(G;P) / (H(G) + H(P)) of the empirical
/// joint distribution, natural log; 0 when both entropies vanish.
double clustering_nmi(const std::vector<std::pair<int64_t, int64_t>>& pairs);

/// Deterministic per-scene detections: posterior modes, cells with presence
/// probability >= 0.5, boxes refined by the decoded alpha mask.
std::vector<std::vector<Detection>> detect_scenes(SceneModel& model,
                                                  const Dataset& dataset,
                                                  double alpha_threshold = 0.1);

/// AP over all scenes, then correct-box filtering into ACC and NMI. With no
/// correct boxes the report carries acc = nmi = 0 rather than raising the
/// undefined-metric error, so periodic evaluation of a weak model stays
/// alive.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<SceneAnnotation>& gts,
                               int64_t num_clusters, int64_t num_classes = 10,
                               double iou_threshold = 0.5);

/// detect_scenes + evaluate_detections against the dataset's annotations.
EvalReport evaluate(SceneModel& model, const Dataset& dataset,
                    double iou_threshold = 0.5, double alpha_threshold = 0.1);

/// One line per scene in the annotation line format ("labels" holds the
/// predicted cluster ids so the file parses as annotations) plus "score" and
/// "cluster" arrays aligned with "boxes".
void export_detections(const std::string& path,
                       const std::vector<std::vector<Detection>>& dets,
                       const std::vector<std::string>& scene_ids);

}  // namespace mixdet
