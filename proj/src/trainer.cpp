#include "mixdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "mixdet/errors.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mixdet {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

ordered_json json_number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double number_from(const ordered_json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_number()) return v.get<double>();
  const auto s = v.get<std::string>();
  if (s == "nan") return std::nan("");
  return s == "inf" ? HUGE_VAL : -HUGE_VAL;
}

}  // namespace

std::vector<MetricsLogRow> read_metrics_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics log: " + path);
  std::vector<MetricsLogRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("malformed metrics row: " + std::string(e.what()));
    }
    MetricsLogRow r;
    r.step = j.at("step").get<int64_t>();
    r.recon = number_from(j, "recon");
    r.overlap = number_from(j, "overlap");
    r.pres = number_from(j, "pres");
    r.where = number_from(j, "where");
    r.depth = number_from(j, "depth");
    r.cat = number_from(j, "cat");
    r.what = number_from(j, "what");
    r.total = number_from(j, "total");
    r.pres_prior = number_from(j, "pres_prior");
    r.alpha_overlap = number_from(j, "alpha_overlap");
    r.lr = number_from(j, "lr");
    if (j.contains("ap")) {
      EvalReport e;
      e.ap = j.at("ap").get<double>();
      e.acc = j.at("acc").get<double>();
      e.nmi = j.at("nmi").get<double>();
      e.n_correct_boxes = j.at("n_correct_boxes").get<int64_t>();
      r.eval = e;
    }
    if (!rows.empty() && r.step <= rows.back().step)
      throw ValidationError("metrics log steps are not strictly increasing: " +
                            path);
    rows.push_back(std::move(r));
  }
  return rows;
}

Trainer::Trainer(const Config& cfg, Dataset data, std::string out_dir,
                 std::optional<Dataset> eval_data)
    : cfg_(cfg),
      data_(std::move(data)),
      eval_data_(std::move(eval_data)),
      out_dir_(std::move(out_dir)),
      gen_(make_generator(uint64_t(cfg.train.seed))) {
  cfg_.validate();
  torch::manual_seed(uint64_t(cfg_.train.seed));
  model_ = SceneModel(cfg_.model);
  build_optimizer();
  init_data();
}

Trainer::Trainer(const std::string& checkpoint_path, Dataset data,
                 std::string out_dir, std::optional<Dataset> eval_data)
    : data_(std::move(data)),
      eval_data_(std::move(eval_data)),
      out_dir_(std::move(out_dir)),
      gen_(make_generator(0)) {
  auto meta = read_checkpoint_meta(checkpoint_path);
  cfg_ = meta.config;
  cfg_.validate();
  model_ = SceneModel(cfg_.model);
  build_optimizer();
  auto restored = load_checkpoint(checkpoint_path, model_, opt_.get(), &gen_);
  step_ = restored.step;
  init_data();
}

void Trainer::init_data() {
  if (data_.size() == 0) throw ValidationError("training dataset is empty");
  const int64_t H = cfg_.model.image_height;
  const int64_t W = cfg_.model.image_width;
  std::vector<torch::Tensor> planes;
  planes.reserve(size_t(data_.size()));
  for (int64_t i = 0; i < data_.size(); ++i) {
    auto img = data_.get(i).image;
    if (img.size(1) != H || img.size(2) != W)
      throw ValidationError("dataset image size does not match the model input");
    planes.push_back(
        (img[0] * 255.0).round().clamp(0, 255).to(torch::kUInt8).unsqueeze(0));
  }
  cache_ = torch::stack(planes);
}

void Trainer::build_optimizer() {
  auto pg = model_->param_groups();
  std::vector<torch::optim::OptimizerParamGroup> groups;
  auto with_lr = [&](std::vector<torch::Tensor> params, double mult) {
    groups.emplace_back(std::move(params), std::make_unique<torch::optim::AdamOptions>(
                                               cfg_.train.lr * mult));
  };
  with_lr(pg.encoder, cfg_.train.lr_mult_encoder);
  with_lr(pg.decoder, cfg_.train.lr_mult_decoder);
  with_lr(pg.mixture, cfg_.train.lr_mult_mixture);
  opt_ = std::make_unique<torch::optim::Adam>(
      groups, torch::optim::AdamOptions(cfg_.train.lr));
}

std::pair<torch::Tensor, std::vector<int64_t>> Trainer::batch_at(int64_t step) {
  const int64_t n = data_.size();
  const int64_t b = std::min<int64_t>(cfg_.train.batch_size, n);
  const int64_t per_epoch = (n + b - 1) / b;
  const int64_t epoch = step / per_epoch;
  const int64_t slot = step % per_epoch;

  if (epoch != epoch_) {
    perm_.resize(size_t(n));
    std::iota(perm_.begin(), perm_.end(), 0);
    std::mt19937_64 rng(mix_seed(uint64_t(cfg_.train.seed), uint64_t(epoch)));
    std::shuffle(perm_.begin(), perm_.end(), rng);
    epoch_ = epoch;
  }

  const int64_t lo = slot * b;
  const int64_t hi = std::min<int64_t>(lo + b, n);
  std::vector<int64_t> idx(perm_.begin() + lo, perm_.begin() + hi);
  auto sel = cache_.index_select(0, torch::tensor(idx));
  auto x = (sel.to(torch::kFloat) / 255.0).repeat({1, 3, 1, 1});
  return {x, idx};
}

std::string Trainer::checkpoint_at(int64_t step) {
  return (fs::path(out_dir_) / ("ckpt_" + std::to_string(step))).string();
}

TrainResult Trainer::run(std::optional<int64_t> until) {
  torch::set_num_threads(int(cfg_.train.num_threads));
  fs::create_directories(out_dir_);
  const auto metrics_path = (fs::path(out_dir_) / "metrics.ndjson").string();
  std::ofstream log(metrics_path, std::ios::app);
  if (!log) throw IoError("cannot write metrics log: " + metrics_path);

  const int64_t target =
      std::min<int64_t>(cfg_.train.iterations,
                        until.value_or(cfg_.train.iterations));
  auto priors = PriorParams::make(cfg_.model, model_->mixture);

  TrainResult result;
  result.metrics_path = metrics_path;
  std::string last_ckpt;
  std::optional<EvalReport> last_eval;
  model_->train();

  bool forward_ok_once = false;
  while (step_ < target) {
    auto [x, idx] = batch_at(step_);
    opt_->zero_grad();
    ForwardOutput out;
    try {
      out = model_->forward(x, gen_);
    } catch (const c10::Error& e) {
      // A pass that worked before can only start failing because an update
      // drove parameters non-finite; surface that as a numerical abort.
      if (!forward_ok_once) throw;
      const auto dump_dir =
          fs::path(out_dir_) / ("nan_step_" + std::to_string(step_));
      fs::create_directories(dump_dir);
      torch::save(x, (dump_dir / "batch.pt").string());
      ordered_json diag;
      diag["step"] = step_;
      diag["scene_indices"] = idx;
      diag["forward_error"] = e.msg();
      std::ofstream(dump_dir / "breakdown.json") << diag.dump(2) << "\n";
      throw NumericalError("forward pass failed at step " +
                           std::to_string(step_) +
                           " after earlier steps succeeded (diverged "
                           "parameters): " + e.msg() +
                           "; batch dumped under " + dump_dir.string());
    }
    forward_ok_once = true;
    TotalLossInputs in{x,
                       out.render.image,
                       &out.post,
                       out.kl_cat_cells,
                       out.kl_what_cells,
                       out.overlap};
    auto bd = total_loss(in, priors, cfg_.loss, cfg_, step_);
    const double total = bd.total.item<double>();

    if (!std::isfinite(total)) {
      const auto dump_dir =
          fs::path(out_dir_) / ("nan_step_" + std::to_string(step_));
      fs::create_directories(dump_dir);
      torch::save(x, (dump_dir / "batch.pt").string());
      ordered_json diag;
      diag["step"] = step_;
      diag["scene_indices"] = idx;
      diag["recon"] = json_number(bd.recon.item<double>());
      diag["overlap"] = json_number(bd.overlap.item<double>());
      diag["pres"] = json_number(bd.pres.item<double>());
      diag["where"] = json_number(bd.where.item<double>());
      diag["depth"] = json_number(bd.depth.item<double>());
      diag["cat"] = json_number(bd.cat.item<double>());
      diag["what"] = json_number(bd.what.item<double>());
      diag["total"] = json_number(total);
      std::ofstream diag_out(dump_dir / "breakdown.json");
      diag_out << diag.dump(2) << "\n";
      throw NumericalError("non-finite loss at step " + std::to_string(step_) +
                           "; batch and breakdown dumped under " +
                           dump_dir.string());
    }

    bd.total.backward();
    torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.train.grad_clip);
    opt_->step();
    const int64_t s = ++step_;

    const bool want_eval = eval_data_ && s % cfg_.train.eval_interval == 0;
    if (want_eval) last_eval = evaluate(model_, *eval_data_);

    if (s % cfg_.train.log_interval == 0 || want_eval) {
      ordered_json row;
      row["step"] = s;
      row["recon"] = json_number(bd.recon.item<double>());
      row["overlap"] = json_number(bd.overlap.item<double>());
      row["pres"] = json_number(bd.pres.item<double>());
      row["where"] = json_number(bd.where.item<double>());
      row["depth"] = json_number(bd.depth.item<double>());
      row["cat"] = json_number(bd.cat.item<double>());
      row["what"] = json_number(bd.what.item<double>());
      row["total"] = json_number(total);
      row["pres_prior"] = bd.scheduled_pres_prior;
      row["alpha_overlap"] = bd.scheduled_alpha_overlap;
      row["lr"] = cfg_.train.lr;
      if (want_eval) {
        row["ap"] = last_eval->ap;
        row["acc"] = last_eval->acc;
        row["nmi"] = last_eval->nmi;
        row["n_correct_boxes"] = last_eval->n_correct_boxes;
      }
      log << row.dump() << "\n";
      log.flush();
    }

    if (s % cfg_.train.ckpt_interval == 0) {
      last_ckpt = checkpoint_at(s);
      save_checkpoint(last_ckpt, model_, opt_.get(), gen_, cfg_, s);
    }
  }

  if (last_ckpt.empty() || step_ % cfg_.train.ckpt_interval != 0) {
    last_ckpt = checkpoint_at(step_);
    save_checkpoint(last_ckpt, model_, opt_.get(), gen_, cfg_, step_);
  }
  result.final_step = step_;
  result.checkpoint_path = last_ckpt;
  result.last_eval = last_eval;

  if (step_ >= cfg_.train.iterations) {
    const auto report_dir = fs::path(out_dir_) / "report";
    fs::create_directories(report_dir);
    ordered_json rep;
    rep["final_step"] = step_;
    rep["checkpoint"] = last_ckpt;
    rep["config"] = to_yaml(cfg_);
    if (last_eval) {
      rep["ap"] = last_eval->ap;
      rep["acc"] = last_eval->acc;
      rep["nmi"] = last_eval->nmi;
      rep["n_correct_boxes"] = last_eval->n_correct_boxes;
    }
    const auto report_path = (report_dir / "report.json").string();
    std::ofstream rep_out(report_path);
    rep_out << rep.dump(2) << "\n";
    if (!rep_out.good()) throw IoError("cannot write report: " + report_path);
    result.report_path = report_path;
  }
  return result;
}

TrainResult train(const Config& cfg, Dataset data, const std::string& out_dir,
                  std::optional<Dataset> eval_data) {
  Trainer trainer(cfg, std::move(data), out_dir, std::move(eval_data));
  return trainer.run();
}

}  // namespace mixdet
