#include "mixdet/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace mixdet {

namespace {

[[noreturn]] void bad_key(const std::string& section, const std::string& key) {
  throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
}

template <typename T>
T get_as(const YAML::Node& node, const std::string& section, const std::string& key) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has an invalid value");
  }
}

Schedule::Interp parse_interp(const std::string& s, const std::string& where) {
  if (s == "linear") return Schedule::Interp::linear;
  if (s == "exponential") return Schedule::Interp::exponential;
  throw ConfigError("config key '" + where + "' must be 'linear' or 'exponential', got '" + s + "'");
}

std::string interp_name(Schedule::Interp i) {
  return i == Schedule::Interp::linear ? "linear" : "exponential";
}

void parse_model(const YAML::Node& node, ModelConfig& m) {
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (key == "image_height") m.image_height = get_as<int64_t>(v, "model", key);
    else if (key == "image_width") m.image_width = get_as<int64_t>(v, "model", key);
    else if (key == "grid_h") m.grid_h = get_as<int64_t>(v, "model", key);
    else if (key == "grid_w") m.grid_w = get_as<int64_t>(v, "model", key);
    else if (key == "what_dim") m.what_dim = get_as<int64_t>(v, "model", key);
    else if (key == "num_clusters") m.num_clusters = get_as<int64_t>(v, "model", key);
    else if (key == "glimpse_h") m.glimpse_h = get_as<int64_t>(v, "model", key);
    else if (key == "glimpse_w") m.glimpse_w = get_as<int64_t>(v, "model", key);
    else if (key == "anchor_h") m.anchor_h = get_as<double>(v, "model", key);
    else if (key == "anchor_w") m.anchor_w = get_as<double>(v, "model", key);
    else if (key == "mc_samples") m.mc_samples = get_as<int64_t>(v, "model", key);
    else if (key == "gumbel_temperature") m.gumbel_temperature = get_as<double>(v, "model", key);
    else if (key == "backbone") m.backbone = get_as<std::string>(v, "model", key);
    else if (key == "sample_where_for_glimpse") m.sample_where_for_glimpse = get_as<bool>(v, "model", key);
    else if (key == "hard_cat_samples") m.hard_cat_samples = get_as<bool>(v, "model", key);
    else if (key == "hard_pres_samples") m.hard_pres_samples = get_as<bool>(v, "model", key);
    else bad_key("model", key);
  }
}

void parse_loss(const YAML::Node& node, LossWeights& w) {
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (key == "alpha_recon") w.alpha_recon = get_as<double>(v, "loss", key);
    else if (key == "alpha_overlap") w.alpha_overlap = get_as<double>(v, "loss", key);
    else if (key == "alpha_pres") w.alpha_pres = get_as<double>(v, "loss", key);
    else if (key == "alpha_where") w.alpha_where = get_as<double>(v, "loss", key);
    else if (key == "alpha_depth") w.alpha_depth = get_as<double>(v, "loss", key);
    else if (key == "alpha_cat") w.alpha_cat = get_as<double>(v, "loss", key);
    else if (key == "alpha_what") w.alpha_what = get_as<double>(v, "loss", key);
    else bad_key("loss", key);
  }
}

Schedule parse_schedule(const YAML::Node& node, size_t idx) {
  Schedule s;
  const std::string where = "schedules[" + std::to_string(idx) + "]";
  bool has_name = false;
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (key == "name") { s.name = get_as<std::string>(v, where, key); has_name = true; }
    else if (key == "start_value") s.start_value = get_as<double>(v, where, key);
    else if (key == "end_value") s.end_value = get_as<double>(v, where, key);
    else if (key == "start_step") s.start_step = get_as<int64_t>(v, where, key);
    else if (key == "end_step") s.end_step = get_as<int64_t>(v, where, key);
    else if (key == "interpolation")
      s.interpolation = parse_interp(get_as<std::string>(v, where, key), where + ".interpolation");
    else bad_key(where, key);
  }
  if (!has_name) throw ConfigError("config key '" + where + ".name' is required");
  return s;
}

void parse_train(const YAML::Node& node, TrainConfig& t) {
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    const auto& v = kv.second;
    if (key == "batch_size") t.batch_size = get_as<int64_t>(v, "train", key);
    else if (key == "lr") t.lr = get_as<double>(v, "train", key);
    else if (key == "iterations") t.iterations = get_as<int64_t>(v, "train", key);
    else if (key == "log_interval") t.log_interval = get_as<int64_t>(v, "train", key);
    else if (key == "ckpt_interval") t.ckpt_interval = get_as<int64_t>(v, "train", key);
    else if (key == "eval_interval") t.eval_interval = get_as<int64_t>(v, "train", key);
    else if (key == "seed") t.seed = get_as<int64_t>(v, "train", key);
    else if (key == "grad_clip") t.grad_clip = get_as<double>(v, "train", key);
    else if (key == "lr_mult_encoder") t.lr_mult_encoder = get_as<double>(v, "train", key);
    else if (key == "lr_mult_decoder") t.lr_mult_decoder = get_as<double>(v, "train", key);
    else if (key == "lr_mult_mixture") t.lr_mult_mixture = get_as<double>(v, "train", key);
    else if (key == "num_threads") t.num_threads = get_as<int64_t>(v, "train", key);
    else bad_key("train", key);
  }
}

void apply_override(YAML::Node root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + spec + "' is not of the form key=value");
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("override '" + spec + "' has an empty key");

  // Rebind with reset(): operator= would assign through the shared handle
  // and overwrite the parent node's value.
  YAML::Node cur;
  cur.reset(root);
  for (size_t i = 0; i + 1 < parts.size(); ++i) cur.reset(cur[parts[i]]);
  cur[parts.back()] = YAML::Load(value);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
  if (image_height <= 0 || image_width <= 0) fail("image size must be positive");
  if (grid_h <= 0 || grid_w <= 0) fail("grid size must be positive");
  if (image_height % grid_h != 0 || image_width % grid_w != 0)
    fail("grid cells must tile the image exactly");
  if (glimpse_h <= 0 || glimpse_w <= 0) fail("glimpse size must be positive");
  if (anchor_h <= 0 || anchor_w <= 0) fail("anchor size must be positive");
  if (what_dim < 1) fail("what_dim must be >= 1");
  if (num_clusters < 2) fail("num_clusters must be >= 2");
  if (mc_samples < 1) fail("mc_samples must be >= 1");
  if (!(gumbel_temperature > 0)) fail("gumbel_temperature must be positive");
  if (backbone != "resnet18" && backbone != "tiny")
    fail("backbone must be 'resnet18' or 'tiny', got '" + backbone + "'");
}

void LossWeights::validate() const {
  for (double w : {alpha_recon, alpha_overlap, alpha_pres, alpha_where, alpha_depth, alpha_cat, alpha_what})
    if (w < 0 || !std::isfinite(w))
      throw ValidationError("loss weights must be finite and >= 0");
}

void Schedule::validate() const {
  auto fail = [this](const std::string& msg) {
    throw ValidationError("schedule '" + name + "': " + msg);
  };
  if (name.empty()) fail("name must be non-empty");
  if (start_step < 0 || end_step < start_step) fail("need 0 <= start_step <= end_step");
  if (!std::isfinite(start_value) || !std::isfinite(end_value)) fail("values must be finite");
  if (interpolation == Interp::exponential) {
    if (start_value == 0 || end_value == 0 || (start_value > 0) != (end_value > 0))
      fail("exponential interpolation needs nonzero endpoints of the same sign");
  }
}

double schedule_value(const Schedule& s, int64_t step) {
  if (step <= s.start_step) return s.start_value;
  if (step >= s.end_step) return s.end_value;
  const double t = double(step - s.start_step) / double(s.end_step - s.start_step);
  if (s.interpolation == Schedule::Interp::linear)
    return s.start_value + t * (s.end_value - s.start_value);
  return s.start_value * std::pow(s.end_value / s.start_value, t);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("train config: " + msg); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0)) fail("lr must be positive");
  if (iterations < 0) fail("iterations must be >= 0");
  if (log_interval < 1 || ckpt_interval < 1 || eval_interval < 1) fail("intervals must be >= 1");
  if (grad_clip < 0) fail("grad_clip must be >= 0 (0 disables clipping)");
  for (double m : {lr_mult_encoder, lr_mult_decoder, lr_mult_mixture})
    if (m < 0 || !std::isfinite(m)) fail("lr multipliers must be finite and >= 0");
  if (num_threads < 1) fail("num_threads must be >= 1");
}

void Config::validate() const {
  model.validate();
  loss.validate();
  std::set<std::string> seen;
  for (const auto& s : schedules) {
    s.validate();
    if (s.name != "pres_prior" && s.name != "alpha_overlap")
      throw ValidationError("schedule '" + s.name + "' targets nothing (known: pres_prior, alpha_overlap)");
    if (!seen.insert(s.name).second)
      throw ValidationError("duplicate schedule '" + s.name + "'");
  }
  train.validate();
}

const Schedule* Config::find_schedule(const std::string& name) const {
  for (const auto& s : schedules)
    if (s.name == name) return &s;
  return nullptr;
}

Schedule* Config::find_schedule(const std::string& name) {
  for (auto& s : schedules)
    if (s.name == name) return &s;
  return nullptr;
}

Config default_config() {
  Config cfg;
  cfg.schedules = {
      {"pres_prior", 1.0, 6e-6, 0, 10000, Schedule::Interp::exponential},
      {"alpha_overlap", 2.0, 0.0, 0, 10000, Schedule::Interp::linear},
  };
  return cfg;
}

Config parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  if (root.IsNull() || !root.IsDefined()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError("config root must be a mapping");

  for (const auto& ov : overrides) apply_override(root, ov);

  Config cfg = default_config();
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (key == "model") parse_model(kv.second, cfg.model);
    else if (key == "loss") parse_loss(kv.second, cfg.loss);
    else if (key == "train") parse_train(kv.second, cfg.train);
    else if (key == "schedules") {
      if (!kv.second.IsSequence()) throw ConfigError("config key 'schedules' must be a sequence");
      cfg.schedules.clear();
      size_t i = 0;
      for (const auto& item : kv.second) cfg.schedules.push_back(parse_schedule(item, i++));
    } else bad_key("", key);
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

std::string to_yaml(const Config& cfg) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "image_height" << YAML::Value << cfg.model.image_height;
  out << YAML::Key << "image_width" << YAML::Value << cfg.model.image_width;
  out << YAML::Key << "grid_h" << YAML::Value << cfg.model.grid_h;
  out << YAML::Key << "grid_w" << YAML::Value << cfg.model.grid_w;
  out << YAML::Key << "what_dim" << YAML::Value << cfg.model.what_dim;
  out << YAML::Key << "num_clusters" << YAML::Value << cfg.model.num_clusters;
  out << YAML::Key << "glimpse_h" << YAML::Value << cfg.model.glimpse_h;
  out << YAML::Key << "glimpse_w" << YAML::Value << cfg.model.glimpse_w;
  out << YAML::Key << "anchor_h" << YAML::Value << cfg.model.anchor_h;
  out << YAML::Key << "anchor_w" << YAML::Value << cfg.model.anchor_w;
  out << YAML::Key << "mc_samples" << YAML::Value << cfg.model.mc_samples;
  out << YAML::Key << "gumbel_temperature" << YAML::Value << cfg.model.gumbel_temperature;
  out << YAML::Key << "backbone" << YAML::Value << cfg.model.backbone;
  out << YAML::Key << "sample_where_for_glimpse" << YAML::Value << cfg.model.sample_where_for_glimpse;
  out << YAML::Key << "hard_cat_samples" << YAML::Value << cfg.model.hard_cat_samples;
  out << YAML::Key << "hard_pres_samples" << YAML::Value << cfg.model.hard_pres_samples;
  out << YAML::EndMap;

  out << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "alpha_recon" << YAML::Value << cfg.loss.alpha_recon;
  out << YAML::Key << "alpha_overlap" << YAML::Value << cfg.loss.alpha_overlap;
  out << YAML::Key << "alpha_pres" << YAML::Value << cfg.loss.alpha_pres;
  out << YAML::Key << "alpha_where" << YAML::Value << cfg.loss.alpha_where;
  out << YAML::Key << "alpha_depth" << YAML::Value << cfg.loss.alpha_depth;
  out << YAML::Key << "alpha_cat" << YAML::Value << cfg.loss.alpha_cat;
  out << YAML::Key << "alpha_what" << YAML::Value << cfg.loss.alpha_what;
  out << YAML::EndMap;

  out << YAML::Key << "schedules" << YAML::Value << YAML::BeginSeq;
  for (const auto& s : cfg.schedules) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << s.name;
    out << YAML::Key << "start_value" << YAML::Value << s.start_value;
    out << YAML::Key << "end_value" << YAML::Value << s.end_value;
    out << YAML::Key << "start_step" << YAML::Value << s.start_step;
    out << YAML::Key << "end_step" << YAML::Value << s.end_step;
    out << YAML::Key << "interpolation" << YAML::Value << interp_name(s.interpolation);
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;

  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "batch_size" << YAML::Value << cfg.train.batch_size;
  out << YAML::Key << "lr" << YAML::Value << cfg.train.lr;
  out << YAML::Key << "iterations" << YAML::Value << cfg.train.iterations;
  out << YAML::Key << "log_interval" << YAML::Value << cfg.train.log_interval;
  out << YAML::Key << "ckpt_interval" << YAML::Value << cfg.train.ckpt_interval;
  out << YAML::Key << "eval_interval" << YAML::Value << cfg.train.eval_interval;
  out << YAML::Key << "seed" << YAML::Value << cfg.train.seed;
  out << YAML::Key << "grad_clip" << YAML::Value << cfg.train.grad_clip;
  out << YAML::Key << "lr_mult_encoder" << YAML::Value << cfg.train.lr_mult_encoder;
  out << YAML::Key << "lr_mult_decoder" << YAML::Value << cfg.train.lr_mult_decoder;
  out << YAML::Key << "lr_mult_mixture" << YAML::Value << cfg.train.lr_mult_mixture;
  out << YAML::Key << "num_threads" << YAML::Value << cfg.train.num_threads;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

void save_config(const Config& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file '" + path + "'");
  out << to_yaml(cfg);
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.image_height == b.image_height && a.image_width == b.image_width &&
         a.grid_h == b.grid_h && a.grid_w == b.grid_w && a.what_dim == b.what_dim &&
         a.num_clusters == b.num_clusters && a.glimpse_h == b.glimpse_h &&
         a.glimpse_w == b.glimpse_w && a.anchor_h == b.anchor_h && a.anchor_w == b.anchor_w &&
         a.mc_samples == b.mc_samples && a.gumbel_temperature == b.gumbel_temperature &&
         a.backbone == b.backbone && a.sample_where_for_glimpse == b.sample_where_for_glimpse &&
         a.hard_cat_samples == b.hard_cat_samples &&
         a.hard_pres_samples == b.hard_pres_samples;
}

bool operator==(const LossWeights& a, const LossWeights& b) {
  return a.alpha_recon == b.alpha_recon && a.alpha_overlap == b.alpha_overlap &&
         a.alpha_pres == b.alpha_pres && a.alpha_where == b.alpha_where &&
         a.alpha_depth == b.alpha_depth && a.alpha_cat == b.alpha_cat &&
         a.alpha_what == b.alpha_what;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) {
  return a.batch_size == b.batch_size && a.lr == b.lr && a.iterations == b.iterations &&
         a.log_interval == b.log_interval && a.ckpt_interval == b.ckpt_interval &&
         a.eval_interval == b.eval_interval && a.seed == b.seed && a.grad_clip == b.grad_clip &&
         a.lr_mult_encoder == b.lr_mult_encoder && a.lr_mult_decoder == b.lr_mult_decoder &&
         a.lr_mult_mixture == b.lr_mult_mixture && a.num_threads == b.num_threads;
}

bool operator==(const Config& a, const Config& b) {
  return a.model == b.model && a.loss == b.loss && a.schedules == b.schedules &&
         a.train == b.train;
}

}  // namespace mixdet
