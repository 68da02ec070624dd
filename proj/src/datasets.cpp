#include "mixdet/datasets.hpp"

#include <zlib.h>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "mixdet/errors.hpp"
#include "mixdet/image_io.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace mixdet {

namespace {

constexpr double kInkThreshold = 0.05;
constexpr int64_t kDigitSize = 28;

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t scene_seed(uint64_t seed, int64_t index) {
  return splitmix64(seed + 0x9E3779B97F4A7C15ULL * uint64_t(index + 1));
}

std::string scene_id(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06lld", (long long)index);
  return buf;
}

std::string digit_checksum(const DigitSet& digits) {
  auto u8 = (digits.images * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  auto lab = digits.labels.to(torch::kUInt8).contiguous();
  uLong crc = crc32_z(0, nullptr, 0);
  crc = crc32_z(crc, u8.data_ptr<uint8_t>(), size_t(u8.numel()));
  crc = crc32_z(crc, lab.data_ptr<uint8_t>(), size_t(lab.numel()));
  char buf[24];
  std::snprintf(buf, sizeof(buf), "crc32:%08lx", (unsigned long)crc);
  return buf;
}

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path) : f(gzopen(path.c_str(), "rb")) {}
  ~GzFile() {
    if (f) gzclose(f);
  }
};

uint32_t read_be32(gzFile f, const std::string& path) {
  unsigned char b[4];
  if (gzread(f, b, 4) != 4) throw IoError("truncated idx file: " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

void read_bytes(gzFile f, uint8_t* dst, int64_t n, const std::string& path) {
  while (n > 0) {
    const int chunk = int(std::min<int64_t>(n, 1 << 20));
    const int got = gzread(f, dst, unsigned(chunk));
    if (got <= 0) throw IoError("truncated idx file: " + path);
    dst += got;
    n -= got;
  }
}

}  // namespace

void DigitSet::validate() const {
  if (!images.defined() || size() == 0) throw ValidationError("digit source is empty");
  if (images.dim() != 3 || images.size(1) != kDigitSize || images.size(2) != kDigitSize)
    throw ValidationError("digit images must be [M, 28, 28]");
  if (!labels.defined() || labels.dim() != 1 || labels.size(0) != images.size(0))
    throw ValidationError("digit labels must be [M]");
  if (images.min().item<double>() < 0.0 || images.max().item<double>() > 1.0)
    throw ValidationError("digit image values must lie in [0,1]");
  if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() > 9)
    throw ValidationError("digit labels must be classes 0..9");
  auto has_ink = (images > kInkThreshold).flatten(1).any(1);
  if (!has_ink.all().item<bool>())
    throw ValidationError("every digit needs ink above the 0.05 threshold");
}

DigitSet make_glyph_digits(int64_t per_class, uint64_t seed) {
  if (per_class <= 0) throw ValidationError("per_class must be positive");
  static const int kFonts[] = {
      cv::FONT_HERSHEY_SIMPLEX,       cv::FONT_HERSHEY_DUPLEX,
      cv::FONT_HERSHEY_COMPLEX,       cv::FONT_HERSHEY_TRIPLEX,
      cv::FONT_HERSHEY_PLAIN,         cv::FONT_HERSHEY_COMPLEX_SMALL};
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> jscale(0.85, 1.1);
  std::uniform_int_distribution<int> jpos(-2, 2);

  std::vector<torch::Tensor> images;
  std::vector<int64_t> labels;
  for (int64_t digit = 0; digit <= 9; ++digit) {
    const std::string text(1, char('0' + digit));
    for (int64_t v = 0; v < per_class; ++v) {
      const int font = kFonts[v % std::size(kFonts)];
      const int thickness = 1 + int(v % 2);
      int baseline = 0;
      const cv::Size unit = cv::getTextSize(text, font, 1.0, thickness, &baseline);
      const double scale =
          22.0 / std::max(unit.width, unit.height) * jscale(rng);
      const cv::Size sz = cv::getTextSize(text, font, scale, thickness, &baseline);
      cv::Mat m = cv::Mat::zeros(int(kDigitSize), int(kDigitSize), CV_8UC1);
      const int ox = (int(kDigitSize) - sz.width) / 2 + jpos(rng);
      const int oy = (int(kDigitSize) + sz.height) / 2 + jpos(rng);
      cv::putText(m, text, {ox, oy}, font, scale, cv::Scalar(255), thickness,
                  cv::LINE_AA);
      images.push_back(
          torch::from_blob(m.data, {kDigitSize, kDigitSize}, torch::kUInt8)
              .clone()
              .to(torch::kFloat) /
          255.0);
      labels.push_back(digit);
    }
  }
  DigitSet ds{torch::stack(images), torch::tensor(labels)};
  ds.validate();
  return ds;
}

DigitSet load_idx_digits(const std::string& images_path,
                         const std::string& labels_path) {
  GzFile fi(images_path);
  if (!fi.f) throw IoError("cannot open idx file: " + images_path);
  if (read_be32(fi.f, images_path) != 0x803u)
    throw ValidationError("not an idx image file: " + images_path);
  const int64_t n = read_be32(fi.f, images_path);
  const int64_t rows = read_be32(fi.f, images_path);
  const int64_t cols = read_be32(fi.f, images_path);
  if (rows != kDigitSize || cols != kDigitSize)
    throw ValidationError("idx digits must be 28x28: " + images_path);
  auto raw = torch::empty({n, rows, cols}, torch::kUInt8);
  read_bytes(fi.f, raw.data_ptr<uint8_t>(), n * rows * cols, images_path);

  GzFile fl(labels_path);
  if (!fl.f) throw IoError("cannot open idx file: " + labels_path);
  if (read_be32(fl.f, labels_path) != 0x801u)
    throw ValidationError("not an idx label file: " + labels_path);
  if (int64_t(read_be32(fl.f, labels_path)) != n)
    throw ValidationError("idx image/label counts disagree: " + labels_path);
  auto lab = torch::empty({n}, torch::kUInt8);
  read_bytes(fl.f, lab.data_ptr<uint8_t>(), n, labels_path);

  DigitSet ds{raw.to(torch::kFloat) / 255.0, lab.to(torch::kInt64)};
  ds.validate();
  return ds;
}

DatasetManifest generate_multimnist(const DigitSet& digits, int64_t n_scenes,
                                    uint64_t seed, const std::string& out_root,
                                    const std::string& split, int64_t canvas) {
  digits.validate();
  if (n_scenes <= 0) throw ValidationError("n_scenes must be positive");
  if (canvas < kDigitSize) throw ValidationError("canvas smaller than a digit");

  const fs::path dir = fs::path(out_root) / split;
  fs::create_directories(dir / "images");

  // Tight ink extents per source digit (row/col min and max, inclusive).
  const int64_t M = digits.size();
  std::vector<std::array<int64_t, 4>> ink(static_cast<size_t>(M));
  for (int64_t d = 0; d < M; ++d) {
    auto mask = digits.images[d] > kInkThreshold;
    auto r = mask.any(1).nonzero().view(-1);
    auto c = mask.any(0).nonzero().view(-1);
    ink[size_t(d)] = {r[0].item<int64_t>(), r[r.numel() - 1].item<int64_t>(),
                      c[0].item<int64_t>(), c[c.numel() - 1].item<int64_t>()};
  }

  std::ofstream ann(dir / "annotations.ndjson", std::ios::trunc);
  if (!ann) throw IoError("cannot write annotations under " + dir.string());

  std::uniform_int_distribution<int64_t> count_dist(1, 10);
  std::uniform_int_distribution<int64_t> digit_dist(0, M - 1);
  std::uniform_int_distribution<int64_t> pos_dist(0, canvas - kDigitSize);

  for (int64_t i = 0; i < n_scenes; ++i) {
    std::mt19937_64 rng(scene_seed(seed, i));
    const int64_t n = count_dist(rng);
    auto scene = torch::zeros({canvas, canvas});
    auto boxes = ordered_json::array();
    auto labels = ordered_json::array();
    for (int64_t j = 0; j < n; ++j) {
      const int64_t d = digit_dist(rng);
      const int64_t x0 = pos_dist(rng);
      const int64_t y0 = pos_dist(rng);
      auto region = scene.slice(0, y0, y0 + kDigitSize).slice(1, x0, x0 + kDigitSize);
      region.copy_(torch::maximum(region, digits.images[d]));
      const auto& e = ink[size_t(d)];
      boxes.push_back({double(x0 + e[2]), double(y0 + e[0]),
                       double(x0 + e[3] + 1), double(y0 + e[1] + 1)});
      labels.push_back(digits.labels[d].item<int64_t>());
    }
    const std::string id = scene_id(i);
    save_png(scene.unsqueeze(0), (dir / "images" / (id + ".png")).string());
    ordered_json line;
    line["id"] = id;
    line["boxes"] = boxes;
    line["labels"] = labels;
    ann << line.dump() << "\n";
  }
  ann.flush();
  if (!ann.good()) throw IoError("failed writing annotations under " + dir.string());

  DatasetManifest m;
  m.root = fs::absolute(dir).string();
  m.split = split;
  m.count = n_scenes;
  m.source_checksum = digit_checksum(digits);
  m.seed = seed;

  ordered_json mj;
  mj["root"] = m.root;
  mj["split"] = m.split;
  mj["count"] = m.count;
  mj["source_checksum"] = m.source_checksum;
  mj["seed"] = m.seed;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << mj.dump(2) << "\n";
  mf.flush();
  if (!mf.good()) throw IoError("cannot write manifest under " + dir.string());
  return m;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed manifest " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.split = j.at("split").get<std::string>();
    m.count = j.at("count").get<int64_t>();
    m.source_checksum = j.at("source_checksum").get<std::string>();
    m.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest missing fields " + path + ": " + e.what());
  }
  m.root = fs::absolute(fs::path(path).parent_path()).string();
  return m;
}

Dataset::Dataset(DatasetManifest manifest) : manifest_(std::move(manifest)) {
  const fs::path ann_path = fs::path(manifest_.root) / "annotations.ndjson";
  std::ifstream in(ann_path);
  if (!in) throw IoError("cannot open annotations: " + ann_path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("malformed annotation line: " + std::string(e.what()));
    }
    SceneAnnotation a;
    a.id = j.at("id").get<std::string>();
    for (const auto& b : j.at("boxes"))
      a.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(),
                         b.at(2).get<double>(), b.at(3).get<double>()});
    a.labels = j.at("labels").get<std::vector<int64_t>>();
    if (a.boxes.size() != a.labels.size())
      throw ValidationError("annotation box/label counts disagree: " + a.id);
    annotations_.push_back(std::move(a));
  }
  if (int64_t(annotations_.size()) != manifest_.count)
    throw ValidationError("annotation count does not match manifest: " +
                          ann_path.string());
  for (int64_t i = 0; i < size(); ++i) {
    const auto p = image_path(i);
    if (!fs::exists(p)) throw IoError("missing image file: " + p);
  }
}

std::string Dataset::image_path(int64_t i) const {
  return (fs::path(manifest_.root) / "images" / (annotation(i).id + ".png")).string();
}

SceneRecord Dataset::get(int64_t i) const {
  return SceneRecord{annotation(i), load_png(image_path(i))};
}

Dataset load_dataset(const DatasetManifest& manifest) { return Dataset(manifest); }

Dataset load_dataset(const std::string& manifest_path) {
  return Dataset(load_manifest(manifest_path));
}

}  // namespace mixdet
