#include "mixdet/model.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "mixdet/errors.hpp"
#include "mixdet/objective.hpp"

namespace mixdet {

SceneModelImpl::SceneModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder = register_module("encoder", InferenceNet(cfg_));
  decoder = register_module("decoder", GlimpseDecoder(cfg_));
  mixture = register_module("mixture", MixturePrior(cfg_.num_clusters, cfg_.what_dim));
}

ForwardOutput SceneModelImpl::forward(const torch::Tensor& x, torch::Generator& gen) {
  auto gp = encoder->grid(x);
  const double tau = cfg_.gumbel_temperature;

  auto z_pres = sample_gumbel_binary(gp.pres_prob, tau, gen, cfg_.hard_pres_samples);
  auto z_depth = sample_gaussian(gp.depth_mean, gp.depth_log_std, gen);

  auto pi = torch::full({cfg_.num_clusters}, 1.0 / double(cfg_.num_clusters),
                        gp.pres_prob.options());

  const int64_t M = cfg_.mc_samples;
  torch::Tensor kl_cat_sum, kl_what_sum;
  torch::Tensor z_where0, z_cat0, z_what0;
  torch::Tensor cat_logits0, what_mean0, what_log_std0;
  for (int64_t m = 0; m < M; ++m) {
    auto z_where = sample_gaussian(gp.where_mean, gp.where_log_std, gen);
    auto boxes = decode_where(
        cfg_.sample_where_for_glimpse ? z_where : gp.where_mean, cfg_);
    auto glimpses = extract_glimpses(x, boxes, cfg_.glimpse_h, cfg_.glimpse_w);
    auto logits = encoder->cat_logits(glimpses);
    auto z_cat = sample_gumbel_softmax(logits, tau, gen, cfg_.hard_cat_samples);
    auto [what_mean, what_log_std] = encoder->what_params(glimpses, z_cat);

    auto kl_cat = kl_categorical(logits, pi);
    auto kl_what = kl_what_term(what_mean, what_log_std, z_cat, mixture);
    kl_cat_sum = m == 0 ? kl_cat : kl_cat_sum + kl_cat;
    kl_what_sum = m == 0 ? kl_what : kl_what_sum + kl_what;

    if (m == 0) {
      z_where0 = z_where;
      z_cat0 = z_cat;
      cat_logits0 = logits;
      what_mean0 = what_mean;
      what_log_std0 = what_log_std;
      z_what0 = sample_gaussian(what_mean, what_log_std, gen);
    }
  }

  LatentGrid grid{z_pres, z_what0, z_cat0, z_where0, z_depth};
  auto render = render_scene(decoder->forward(grid.z_what), grid, cfg_);
  auto overlap = overlap_penalty(render.rgb_canvas, grid.z_pres);

  PosteriorParams post{gp.pres_prob,  gp.where_mean, gp.where_log_std,
                       gp.depth_mean, gp.depth_log_std,
                       cat_logits0,   what_mean0,    what_log_std0};
  return ForwardOutput{std::move(post),        std::move(grid),
                       std::move(render),      kl_cat_sum / double(M),
                       kl_what_sum / double(M), overlap};
}

std::pair<PosteriorParams, LatentGrid> SceneModelImpl::encode_modes(
    const torch::Tensor& x) {
  auto gp = encoder->grid(x);
  auto boxes = decode_where(gp.where_mean, cfg_);
  auto glimpses = extract_glimpses(x, boxes, cfg_.glimpse_h, cfg_.glimpse_w);
  auto logits = encoder->cat_logits(glimpses);
  auto z_cat =
      torch::one_hot(logits.argmax(-1), cfg_.num_clusters).to(logits.dtype());
  auto [what_mean, what_log_std] = encoder->what_params(glimpses, z_cat);

  LatentGrid grid{(gp.pres_prob >= 0.5).to(logits.dtype()), what_mean, z_cat,
                  gp.where_mean, gp.depth_mean};
  PosteriorParams post{gp.pres_prob,  gp.where_mean,    gp.where_log_std,
                       gp.depth_mean, gp.depth_log_std, logits,
                       what_mean,     what_log_std};
  return {std::move(post), std::move(grid)};
}

RenderResult SceneModelImpl::render_latents(const LatentGrid& grid) {
  return render_scene(decoder->forward(grid.z_what), grid, cfg_);
}

ParamGroups SceneModelImpl::param_groups() const {
  return ParamGroups{encoder->parameters(), decoder->parameters(),
                     mixture->parameters()};
}

namespace {

constexpr char kMagic[4] = {'M', 'X', 'D', 'T'};
constexpr size_t kHeaderBytes = 4 + 4 + 4 + 8;

uint32_t payload_crc(const std::string& payload) {
  return static_cast<uint32_t>(
      crc32_z(crc32_z(0, nullptr, 0),
              reinterpret_cast<const Bytef*>(payload.data()), payload.size()));
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

std::string validated_payload(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < kHeaderBytes)
    throw CheckpointError("truncated checkpoint: " + path);
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  uint32_t version = 0, crc = 0;
  uint64_t size = 0;
  std::memcpy(&version, bytes.data() + 4, sizeof(version));
  std::memcpy(&crc, bytes.data() + 8, sizeof(crc));
  std::memcpy(&size, bytes.data() + 12, sizeof(size));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          ", this build reads version " +
                          std::to_string(kCheckpointVersion) + ": " + path);
  if (bytes.size() - kHeaderBytes != size)
    throw CheckpointError("truncated checkpoint: " + path);
  auto payload = bytes.substr(kHeaderBytes);
  if (payload_crc(payload) != crc)
    throw CheckpointError("checkpoint checksum mismatch: " + path);
  return payload;
}

torch::serialize::InputArchive open_payload(const std::string& path) {
  const auto payload = validated_payload(path);
  torch::serialize::InputArchive root;
  try {
    root.load_from(payload.data(), payload.size());
  } catch (const c10::Error& e) {
    throw CheckpointError("unreadable checkpoint payload: " + path + ": " +
                          e.what_without_backtrace());
  }
  return root;
}

// The archive loader rebinds stored tensors into the module wholesale, so a
// shape mismatch would silently reshape parameters; compare the
// architecture-determining fields up front instead.
void check_architecture(const ModelConfig& stored, const ModelConfig& live,
                        const std::string& path) {
  const bool ok = stored.image_height == live.image_height &&
                  stored.image_width == live.image_width &&
                  stored.grid_h == live.grid_h && stored.grid_w == live.grid_w &&
                  stored.what_dim == live.what_dim &&
                  stored.num_clusters == live.num_clusters &&
                  stored.glimpse_h == live.glimpse_h &&
                  stored.glimpse_w == live.glimpse_w &&
                  stored.backbone == live.backbone;
  if (!ok)
    throw CheckpointError(
        "checkpoint does not fit this model (stored and live model "
        "configurations disagree on architecture fields): " + path);
}

CheckpointMeta meta_from(torch::serialize::InputArchive& root) {
  c10::IValue cfg_text, step, has_opt;
  try {
    root.read("config", cfg_text);
    root.read("step", step);
    root.read("has_optimizer", has_opt);
  } catch (const c10::Error& e) {
    throw CheckpointError(std::string("checkpoint is missing header fields: ") +
                          e.what_without_backtrace());
  }
  CheckpointMeta meta;
  meta.config = parse_config(cfg_text.toStringRef());
  meta.step = step.toInt();
  meta.has_optimizer = has_opt.toBool();
  return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const SceneModel& model,
                     const torch::optim::Optimizer* optimizer,
                     const torch::Generator& gen, const Config& cfg,
                     int64_t step) {
  torch::serialize::OutputArchive root;
  torch::serialize::OutputArchive params;
  model->save(params);
  root.write("model", params);
  root.write("has_optimizer", c10::IValue(optimizer != nullptr));
  if (optimizer != nullptr) {
    torch::serialize::OutputArchive opt;
    optimizer->save(opt);
    root.write("optim", opt);
  }
  root.write("rng", gen.get_state(), /*is_buffer=*/true);
  root.write("config", c10::IValue(to_yaml(cfg)));
  root.write("step", c10::IValue(step));

  std::ostringstream payload_stream;
  root.save_to(payload_stream);
  const std::string payload = std::move(payload_stream).str();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const uint32_t version = kCheckpointVersion;
  const uint32_t crc = payload_crc(payload);
  const uint64_t size = payload.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(payload.data(), std::streamsize(payload.size()));
  out.flush();
  if (!out.good()) throw IoError("failed writing checkpoint: " + path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  auto root = open_payload(path);
  return meta_from(root);
}

CheckpointMeta load_checkpoint(const std::string& path, SceneModel& model,
                               torch::optim::Optimizer* optimizer,
                               torch::Generator* gen) {
  auto root = open_payload(path);
  auto meta = meta_from(root);
  check_architecture(meta.config.model, model->config(), path);
  try {
    torch::serialize::InputArchive params;
    root.read("model", params);
    model->load(params);
    if (optimizer != nullptr) {
      if (!meta.has_optimizer)
        throw CheckpointError("checkpoint carries no optimizer state: " + path);
      torch::serialize::InputArchive opt;
      root.read("optim", opt);
      optimizer->load(opt);
    }
    if (gen != nullptr) {
      torch::Tensor state;
      root.read("rng", state, /*is_buffer=*/true);
      gen->set_state(state);
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const c10::Error& e) {
    throw CheckpointError("checkpoint does not fit this model: " + path + ": " +
                          e.what_without_backtrace());
  }
  return meta;
}

}  // namespace mixdet
