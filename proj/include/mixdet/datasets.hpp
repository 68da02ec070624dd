#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mixdet {

/// A labeled set of 28x28 grayscale digit images. Values lie on the 8-bit
/// grid in [0,1] so generated scenes survive PNG round trips bit-exactly.
struct DigitSet {
  torch::Tensor images;  // [M, 28, 28] float32
  torch::Tensor labels;  // [M] int64, classes 0..9

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  void validate() const;
};

/// Rendered digit glyphs (several fonts, jittered size and placement) as a
/// stand-in source when no digit image files are available. Deterministic
/// given the seed.
DigitSet make_glyph_digits(int64_t per_class, uint64_t seed);

/// Read an idx image/label file pair (optionally gzip-compressed).
DigitSet load_idx_digits(const std::string& images_path,
                         const std::string& labels_path);

struct SceneAnnotation {
  std::string id;
  std::vector<std::array<double, 4>> boxes;  // (x_min, y_min, x_max, y_max) px
  std::vector<int64_t> labels;
};

struct SceneRecord {
  SceneAnnotation annotation;
  torch::Tensor image;  // [3, H, W] float in [0,1]
};

struct DatasetManifest {
  std::string root;  // split directory holding manifest, annotations, images/
  std::string split;
  int64_t count = 0;
  std::string source_checksum;
  uint64_t seed = 0;
};

/// Compose n_scenes canvases, each with Uniform{1..10} digits drawn with
/// replacement and placed uniformly at integer offsets with their 28x28
/// frame inside the canvas; pixels composite by max, ground-truth boxes are
/// tight to ink above 0.05. Writes out_root/split/{manifest.json,
/// annotations.ndjson, images/*.png}. Byte-identical for equal seeds.
DatasetManifest generate_multimnist(const DigitSet& digits, int64_t n_scenes,
                                    uint64_t seed, const std::string& out_root,
                                    const std::string& split = "train",
                                    int64_t canvas = 128);

/// Read a manifest file; the stored root is replaced by the manifest's own
/// directory so a relocated dataset keeps working.
DatasetManifest load_manifest(const std::string& path);

/// Annotation index over a generated split with lazy image access.
class Dataset {
 public:
  explicit Dataset(DatasetManifest manifest);

  int64_t size() const { return int64_t(annotations_.size()); }
  const SceneAnnotation& annotation(int64_t i) const { return annotations_.at(size_t(i)); }
  const std::vector<SceneAnnotation>& annotations() const { return annotations_; }
  std::string image_path(int64_t i) const;
  SceneRecord get(int64_t i) const;  // reads the PNG on demand
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  std::vector<SceneAnnotation> annotations_;
};

Dataset load_dataset(const DatasetManifest& manifest);
Dataset load_dataset(const std::string& manifest_path);

}  // namespace mixdet
