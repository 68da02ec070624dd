#include <torch/extension.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mixdet/config.hpp"
#include "mixdet/datasets.hpp"
#include "mixdet/generation.hpp"
#include "mixdet/inference.hpp"
#include "mixdet/manipulation.hpp"
#include "mixdet/metrics.hpp"
#include "mixdet/model.hpp"
#include "mixdet/trainer.hpp"

namespace py = pybind11;
using namespace mixdet;

namespace {

std::string resolve_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) return (fs::path(path) / "manifest.json").string();
  return path;
}

Dataset open_dataset(const std::string& path) {
  return load_dataset(resolve_manifest(path));
}

Config config_from_yaml(const std::string& yaml,
                        const std::vector<std::string>& overrides) {
  return parse_config(yaml.empty() ? "{}" : yaml, overrides);
}

py::dict eval_dict(const EvalReport& r) {
  py::dict d;
  d["ap"] = r.ap;
  d["acc"] = r.acc;
  d["nmi"] = r.nmi;
  d["n_correct_boxes"] = r.n_correct_boxes;
  return d;
}

py::dict grid_dict(const LatentGrid& g, const ModelConfig& cfg) {
  py::dict d;
  d["z_pres"] = g.z_pres;
  d["z_what"] = g.z_what;
  d["z_cat"] = g.z_cat;
  d["z_where"] = g.z_where;
  d["z_depth"] = g.z_depth;
  d["boxes"] = boxes_to_corners(decode_where(g.z_where, cfg));
  return d;
}

torch::Tensor require_chw(const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 3 && image.size(0) == 3,
              "expected a [3, H, W] image tensor, got ", image.sizes());
  return image.to(torch::kFloat32);
}

/// A trained scene model plus the config it was built with.
class Model {
 public:
  explicit Model(const std::string& checkpoint) {
    const auto meta = read_checkpoint_meta(checkpoint);
    cfg_ = meta.config;
    model_ = SceneModel(cfg_.model);
    load_checkpoint(checkpoint, model_);
    step_ = meta.step;
  }

  std::string config_yaml() const { return to_yaml(cfg_); }
  int64_t step() const { return step_; }

  py::dict infer(const torch::Tensor& image) {
    auto g = deterministic_infer(model_, require_chw(image).unsqueeze(0));
    return grid_dict(g, cfg_.model);
  }

  torch::Tensor reconstruct(const torch::Tensor& image) {
    auto x = require_chw(image).unsqueeze(0);
    auto g = deterministic_infer(model_, x);
    torch::NoGradGuard ng;
    const bool was_training = model_->is_training();
    model_->eval();
    auto out = model_->render_latents(g);
    if (was_training) model_->train();
    return out.image.squeeze(0);
  }

  torch::Tensor swap(const torch::Tensor& image, int64_t target_k) {
    auto g = deterministic_infer(model_, require_chw(image).unsqueeze(0));
    return swap_category(model_, g, target_k).render.image.squeeze(0);
  }

  torch::Tensor vary(const torch::Tensor& image, double noise,
                     uint64_t seed) {
    auto g = deterministic_infer(model_, require_chw(image).unsqueeze(0));
    auto gen = make_generator(seed);
    return vary_local(model_, g, noise, gen).render.image.squeeze(0);
  }

  torch::Tensor shuffle(const torch::Tensor& image, uint64_t seed) {
    auto g = deterministic_infer(model_, require_chw(image).unsqueeze(0));
    auto gen = make_generator(seed);
    return shuffle_objects(model_, g, gen).render.image.squeeze(0);
  }

  py::dict evaluate_on(const std::string& data) {
    auto ds = open_dataset(data);
    EvalReport report;
    {
      py::gil_scoped_release nogil;
      report = evaluate(model_, ds);
    }
    return eval_dict(report);
  }

  py::list detect(const std::string& data) {
    auto ds = open_dataset(data);
    std::vector<std::vector<Detection>> dets;
    {
      py::gil_scoped_release nogil;
      dets = detect_scenes(model_, ds);
    }
    py::list scenes;
    for (size_t s = 0; s < dets.size(); ++s) {
      py::list items;
      for (const auto& d : dets[s]) {
        py::dict item;
        item["box"] = py::make_tuple(d.box[0], d.box[1], d.box[2], d.box[3]);
        item["score"] = d.score;
        item["cluster"] = d.cluster;
        items.append(item);
      }
      scenes.append(items);
    }
    return scenes;
  }

  int64_t export_latents_to(const std::string& data, const std::string& out) {
    auto ds = open_dataset(data);
    py::gil_scoped_release nogil;
    return export_latents(model_, ds, out);
  }

 private:
  Config cfg_;
  SceneModel model_{nullptr};
  int64_t step_ = 0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "grid-attend scene VAE: mixture-prior detection and clustering";

  m.def("default_config_yaml", [] { return to_yaml(default_config()); },
        "Canonical YAML for the default configuration.");
  m.def(
      "normalize_config",
      [](const std::string& yaml, const std::vector<std::string>& overrides) {
        return to_yaml(config_from_yaml(yaml, overrides));
      },
      py::arg("yaml") = "", py::arg("overrides") = std::vector<std::string>{},
      "Parse a YAML config plus dotted key=value overrides, validate, and "
      "return the canonical YAML.");

  m.def(
      "make_glyph_dataset",
      [](const std::string& out_dir, int64_t count, uint64_t seed,
         const std::string& split, int64_t canvas, int64_t per_class) {
        py::gil_scoped_release nogil;
        const auto digits = make_glyph_digits(per_class, seed);
        const auto man =
            generate_multimnist(digits, count, seed, out_dir, split, canvas);
        return man.root;
      },
      py::arg("out_dir"), py::arg("count"), py::arg("seed") = 0,
      py::arg("split") = "train", py::arg("canvas") = 128,
      py::arg("per_class") = 20,
      "Compose scenes from built-in digit glyphs; returns the split "
      "directory.");
  m.def(
      "generate_dataset",
      [](const std::string& images_path, const std::string& labels_path,
         const std::string& out_dir, int64_t count, uint64_t seed,
         const std::string& split, int64_t canvas) {
        py::gil_scoped_release nogil;
        const auto digits = load_idx_digits(images_path, labels_path);
        const auto man =
            generate_multimnist(digits, count, seed, out_dir, split, canvas);
        return man.root;
      },
      py::arg("images_path"), py::arg("labels_path"), py::arg("out_dir"),
      py::arg("count"), py::arg("seed") = 0, py::arg("split") = "train",
      py::arg("canvas") = 128,
      "Compose scenes from an idx digit image/label file pair; returns the "
      "split directory.");

  m.def(
      "train",
      [](const std::string& config_yaml,
         const std::vector<std::string>& overrides, const std::string& data,
         const std::string& out_dir, const std::optional<std::string>& eval_data) {
        const auto cfg = config_from_yaml(config_yaml, overrides);
        auto ds = open_dataset(data);
        std::optional<Dataset> eval_ds;
        if (eval_data) eval_ds.emplace(open_dataset(*eval_data));
        TrainResult r;
        {
          py::gil_scoped_release nogil;
          r = mixdet::train(cfg, std::move(ds), out_dir, std::move(eval_ds));
        }
        py::dict d;
        d["final_step"] = r.final_step;
        d["checkpoint"] = r.checkpoint_path;
        d["metrics"] = r.metrics_path;
        d["report"] = r.report_path;
        if (r.last_eval) d["eval"] = eval_dict(*r.last_eval);
        return d;
      },
      py::arg("config_yaml") = "", py::arg("overrides") = std::vector<std::string>{},
      py::arg("data") = "", py::arg("out_dir") = "",
      py::arg("eval_data") = std::nullopt,
      "Run the training loop; returns final step and artifact paths.");

  m.def(
      "read_metrics",
      [](const std::string& path) {
        py::list rows;
        for (const auto& r : read_metrics_log(path)) {
          py::dict d;
          d["step"] = r.step;
          d["recon"] = r.recon;
          d["overlap"] = r.overlap;
          d["pres"] = r.pres;
          d["where"] = r.where;
          d["depth"] = r.depth;
          d["cat"] = r.cat;
          d["what"] = r.what;
          d["total"] = r.total;
          d["pres_prior"] = r.pres_prior;
          d["alpha_overlap"] = r.alpha_overlap;
          d["lr"] = r.lr;
          if (r.eval) d["eval"] = eval_dict(*r.eval);
          rows.append(d);
        }
        return rows;
      },
      py::arg("path"), "Parse a training metrics log into row dicts.");

  py::class_<Model>(m, "Model", "A trained scene model loaded from a checkpoint.")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("step", &Model::step)
      .def("config_yaml", &Model::config_yaml)
      .def("infer", &Model::infer, py::arg("image"),
           "Posterior modes for a [3, H, W] image: z_pres, z_what, z_cat, "
           "z_where, z_depth, and decoded pixel corner boxes.")
      .def("reconstruct", &Model::reconstruct, py::arg("image"))
      .def("swap", &Model::swap, py::arg("image"), py::arg("target_k"),
           "Re-render with every object moved to cluster target_k.")
      .def("vary", &Model::vary, py::arg("image"), py::arg("noise") = 0.5,
           py::arg("seed") = 0,
           "Re-render with resampled per-object appearance residuals.")
      .def("shuffle", &Model::shuffle, py::arg("image"), py::arg("seed") = 0,
           "Re-render with appearances permuted among the objects.")
      .def("evaluate", &Model::evaluate_on, py::arg("data"),
           "Detection and clustering quality against a labeled split.")
      .def("detect", &Model::detect, py::arg("data"),
           "Per-scene detections (box, score, cluster) for a split.")
      .def("export_latents", &Model::export_latents_to, py::arg("data"),
           py::arg("out"),
           "Write appearance vectors of correct detections as CSV; returns "
           "the row count.");

  using BoxList = std::vector<std::array<double, 4>>;
  m.def(
      "average_precision",
      [](const std::vector<std::vector<std::pair<std::array<double, 4>, double>>>&
             dets,
         const std::vector<BoxList>& gt_boxes, double iou_threshold) {
        TORCH_CHECK(dets.size() == gt_boxes.size(),
                    "detections and ground truths must align scene by scene");
        std::vector<std::vector<Detection>> d(dets.size());
        std::vector<SceneAnnotation> g(gt_boxes.size());
        for (size_t s = 0; s < dets.size(); ++s) {
          for (const auto& [box, score] : dets[s])
            d[s].push_back({box, score, 0});
          g[s].boxes = gt_boxes[s];
          g[s].labels.assign(gt_boxes[s].size(), 0);
        }
        return average_precision(d, g, iou_threshold);
      },
      py::arg("detections"), py::arg("gt_boxes"), py::arg("iou_threshold") = 0.5,
      "VOC average precision of scored boxes against ground-truth boxes, "
      "scene-aligned.");
  m.def(
      "clustering_acc",
      [](const std::vector<std::pair<int64_t, int64_t>>& pairs,
         int64_t num_clusters, int64_t num_classes) {
        return clustering_acc(pairs, num_clusters, num_classes);
      },
      py::arg("pairs"), py::arg("num_clusters"), py::arg("num_classes") = 10,
      "Plurality-vote accuracy of (cluster, class) pairs.");
  m.def(
      "clustering_nmi",
      [](const std::vector<std::pair<int64_t, int64_t>>& pairs) {
        return clustering_nmi(pairs);
      },
      py::arg("pairs"),
      "Normalized mutual information of (cluster, class) pairs.");
}
