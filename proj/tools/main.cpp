#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixdet/config.hpp"
#include "mixdet/datasets.hpp"
#include "mixdet/errors.hpp"
#include "mixdet/image_io.hpp"
#include "mixdet/manipulation.hpp"
#include "mixdet/metrics.hpp"
#include "mixdet/model.hpp"
#include "mixdet/plotting.hpp"
#include "mixdet/trainer.hpp"

#include <json.hpp>

namespace fs = std::filesystem;
using namespace mixdet;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string resolve_manifest(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p))
    throw IoError("dataset manifest not found: " + p.string());
  return p.string();
}

DigitSet load_digits_dir(const std::string& dir) {
  for (const std::string prefix : {"train", "t10k"}) {
    for (const std::string suffix : {".gz", ""}) {
      const auto images =
          fs::path(dir) / (prefix + "-images-idx3-ubyte" + suffix);
      const auto labels =
          fs::path(dir) / (prefix + "-labels-idx1-ubyte" + suffix);
      if (fs::exists(images) && fs::exists(labels))
        return load_idx_digits(images.string(), labels.string());
    }
  }
  throw IoError(
      "no idx digit files ({train,t10k}-{images,labels}-idx*-ubyte[.gz]) "
      "under: " + dir);
}

SceneModel load_model(const std::string& ckpt, Config& cfg) {
  const auto meta = read_checkpoint_meta(ckpt);
  cfg = meta.config;
  SceneModel model(cfg.model);
  load_checkpoint(ckpt, model);
  torch::set_num_threads(int(std::max<int64_t>(1, cfg.train.num_threads)));
  return model;
}

struct GenDataArgs {
  std::string mnist_dir, out, split = "train";
  int64_t count = 0, canvas = 128;
  uint64_t seed = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
  const auto digits = load_digits_dir(a.mnist_dir);
  const auto manifest =
      generate_multimnist(digits, a.count, a.seed, a.out, a.split, a.canvas);
  std::cout << "wrote " << manifest.count << " scenes under " << manifest.root
            << "\n";
  std::cout << "manifest: " << (fs::path(manifest.root) / "manifest.json").string()
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, eval_data, out;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  const Config cfg = a.config.empty() ? parse_config("{}", a.sets)
                                      : load_config(a.config, a.sets);
  const auto ds = load_dataset(resolve_manifest(a.data));
  std::optional<Dataset> eval_ds;
  if (!a.eval_data.empty())
    eval_ds = load_dataset(resolve_manifest(a.eval_data));

  fs::create_directories(a.out);
  save_config(cfg, (fs::path(a.out) / "config.yaml").string());

  const auto result = train(cfg, ds, a.out, eval_ds);
  std::cout << "finished at step " << result.final_step << "\n";
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";
  std::cout << "metrics: " << result.metrics_path << "\n";
  if (result.last_eval)
    std::cout << "eval: ap " << result.last_eval->ap << ", acc "
              << result.last_eval->acc << ", nmi " << result.last_eval->nmi
              << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out;
  bool oracle_gt = false;
};

int cmd_eval(const EvalArgs& a) {
  Config cfg;
  auto model = load_model(a.ckpt, cfg);
  const auto ds = load_dataset(resolve_manifest(a.data));

  std::vector<std::vector<Detection>> dets;
  if (a.oracle_gt) {
    int64_t k = 0;
    for (const auto& ann : ds.annotations()) {
      std::vector<Detection> scene;
      for (size_t j = 0; j < ann.boxes.size(); ++j)
        scene.push_back({ann.boxes[j], 0.99 - 1e-7 * double(k++),
                         ann.labels[j] % cfg.model.num_clusters});
      dets.push_back(std::move(scene));
    }
  } else {
    dets = detect_scenes(model, ds);
  }

  const auto report =
      evaluate_detections(dets, ds.annotations(), cfg.model.num_clusters);

  fs::create_directories(a.out);
  const auto report_path = (fs::path(a.out) / "report.json").string();
  ordered_json j;
  j["ap"] = report.ap;
  j["acc"] = report.acc;
  j["nmi"] = report.nmi;
  j["n_correct_boxes"] = report.n_correct_boxes;
  std::ofstream(report_path) << j.dump(2) << "\n";

  std::vector<std::string> ids;
  for (const auto& ann : ds.annotations()) ids.push_back(ann.id);
  const auto det_path = (fs::path(a.out) / "detections.ndjson").string();
  export_detections(det_path, dets, ids);

  std::cout << "ap: " << report.ap << ", acc: " << report.acc << ", nmi: "
            << report.nmi << " (" << report.n_correct_boxes
            << " correct boxes)\n";
  std::cout << "report: " << report_path << "\n";
  std::cout << "detections: " << det_path << "\n";
  return 0;
}

struct ManipulateArgs {
  std::string ckpt, image, mode, out;
  int64_t target_k = -1;
  double noise = 0.5;
  uint64_t seed = 0;
};

int cmd_manipulate(const ManipulateArgs& a) {
  Config cfg;
  auto model = load_model(a.ckpt, cfg);

  const auto img = load_png(a.image);
  if (img.size(1) != cfg.model.image_height ||
      img.size(2) != cfg.model.image_width)
    throw ValidationError("image is " + std::to_string(img.size(1)) + "x" +
                          std::to_string(img.size(2)) + " but the checkpoint "
                          "expects " + std::to_string(cfg.model.image_height) +
                          "x" + std::to_string(cfg.model.image_width));
  const auto x = img.unsqueeze(0);

  const auto grid = deterministic_infer(model, x);
  torch::Tensor recon;
  {
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    recon = model->render_latents(grid).image[0];
    model->train(was_training);
  }

  std::vector<torch::Tensor> panels = {img, recon};
  if (a.mode == "swap") {
    if (a.target_k < 0)
      throw ValidationError("mode=swap requires --target-k");
    panels.push_back(swap_category(model, grid, a.target_k).render.image[0]);
  } else if (a.mode == "vary") {
    auto gen = make_generator(a.seed);
    panels.push_back(vary_local(model, grid, a.noise, gen).render.image[0]);
  } else if (a.mode == "shuffle") {
    auto gen = make_generator(a.seed);
    panels.push_back(shuffle_objects(model, grid, gen).render.image[0]);
  }

  std::vector<torch::Tensor> strip;
  const auto sep = torch::ones({3, img.size(1), 4});
  for (size_t i = 0; i < panels.size(); ++i) {
    if (i) strip.push_back(sep);
    strip.push_back(panels[i]);
  }
  const fs::path out_parent = fs::path(a.out).parent_path();
  if (!out_parent.empty()) fs::create_directories(out_parent);
  save_png(torch::cat(strip, 2), a.out);

  std::cout << "mode " << a.mode << ": wrote " << panels.size()
            << " panels to " << a.out << "\n";
  return 0;
}

struct ExportArgs {
  std::string ckpt, data, out;
};

int cmd_export_latents(const ExportArgs& a) {
  Config cfg;
  auto model = load_model(a.ckpt, cfg);
  const auto ds = load_dataset(resolve_manifest(a.data));
  const auto rows = export_latents(model, ds, a.out);
  std::cout << "wrote " << rows << " rows to " << a.out << "\n";
  return 0;
}

struct PlotArgs {
  std::string metrics_log, latents, out;
};

int cmd_plot(const PlotArgs& a) {
  if (a.metrics_log.empty() == a.latents.empty())
    throw ValidationError("plot needs exactly one of --metrics-log, --latents");
  if (!a.metrics_log.empty())
    plot_training_curves(read_metrics_log(a.metrics_log), a.out);
  else
    plot_latent_scatter(read_latents_csv(a.latents), a.out);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

template <typename Fn>
int run_guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const c10::Error& e) {
    std::cerr << "error: " << e.msg() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grid-attend detector: mixture-prior scene VAE tooling"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  auto* gen = app.add_subcommand("gen-data",
                                 "Compose multi-digit scenes from idx digits");
  gen->add_option("--mnist-dir", gen_args.mnist_dir,
                  "Directory holding idx digit/label files")->required();
  gen->add_option("--out", gen_args.out, "Output root directory")->required();
  gen->add_option("--count", gen_args.count, "Number of scenes")->required();
  gen->add_option("--seed", gen_args.seed, "Generation seed");
  gen->add_option("--split", gen_args.split, "Split name (default train)");
  gen->add_option("--canvas", gen_args.canvas, "Canvas size (default 128)");

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--config", train_args.config, "YAML config (defaults if omitted)");
  tr->add_option("--data", train_args.data, "Dataset dir or manifest")->required();
  tr->add_option("--eval-data", train_args.eval_data,
                 "Held-out dataset for periodic evaluation");
  tr->add_option("--out", train_args.out, "Run directory")->required();
  tr->add_option("--set", train_args.sets,
                 "Config override key=value (repeatable)");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", eval_args.ckpt, "Checkpoint path")->required();
  ev->add_option("--data", eval_args.data, "Dataset dir or manifest")->required();
  ev->add_option("--out", eval_args.out, "Output directory")->required();
  ev->add_flag("--oracle-gt", eval_args.oracle_gt)->group("");

  ManipulateArgs man_args;
  auto* man = app.add_subcommand("manipulate",
                                 "Re-render a scene with edited latents");
  man->add_option("--ckpt", man_args.ckpt, "Checkpoint path")->required();
  man->add_option("--image", man_args.image, "Input scene PNG")->required();
  man->add_option("--mode", man_args.mode, "swap|vary|shuffle|reconstruct")
      ->required()
      ->check(CLI::IsMember({"swap", "vary", "shuffle", "reconstruct"}));
  man->add_option("--target-k", man_args.target_k, "Target cluster for swap");
  man->add_option("--noise", man_args.noise,
                  "Residual scale for vary (default 0.5)");
  man->add_option("--seed", man_args.seed, "Sampling seed");
  man->add_option("--out", man_args.out, "Output PNG path")->required();

  ExportArgs export_args;
  auto* ex = app.add_subcommand("export-latents",
                                "Write appearance latents of correct detections");
  ex->add_option("--ckpt", export_args.ckpt, "Checkpoint path")->required();
  ex->add_option("--data", export_args.data, "Dataset dir or manifest")->required();
  ex->add_option("--out", export_args.out, "Output CSV path")->required();

  PlotArgs plot_args;
  auto* pl = app.add_subcommand("plot", "Emit static plots");
  auto* pm = pl->add_option("--metrics-log", plot_args.metrics_log,
                            "Training metrics log");
  auto* pll = pl->add_option("--latents", plot_args.latents,
                             "Latent export CSV");
  pm->excludes(pll);
  pl->add_option("--out", plot_args.out, "Output PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (app.got_subcommand(gen)) return run_guarded([&] { return cmd_gen_data(gen_args); });
  if (app.got_subcommand(tr)) return run_guarded([&] { return cmd_train(train_args); });
  if (app.got_subcommand(ev)) return run_guarded([&] { return cmd_eval(eval_args); });
  if (app.got_subcommand(man)) return run_guarded([&] { return cmd_manipulate(man_args); });
  if (app.got_subcommand(ex)) return run_guarded([&] { return cmd_export_latents(export_args); });
  if (app.got_subcommand(pl)) return run_guarded([&] { return cmd_plot(plot_args); });
  return 2;
}
