#pragma once

#include <map>
#include <string>
#include <vector>

#include "bimii/png_io.hpp"
#include "bimii/supervision.hpp"

namespace bimii {

// One aligned RGB-T scene with per-pixel class ids, intensities in [0,1].
struct SceneSample {
  Tensor rgb;      // 3 x H x W
  Tensor thermal;  // 1 x H x W
  LabelMap labels;  // H x W
  bool night = false;
};

// Random rectangles and ellipses with class-specific hue and thermal
// intensity. Night samples dim the RGB rendering before noise so the thermal
// channel carries the discriminative signal.
SceneSample gen_synthetic_scene(uint32_t seed, int h, int w, int n_classes,
                                double night_prob = 0.3);

struct SynthSpec {
  int count = 250;
  uint32_t seed = 7;
  int height = 64, width = 64;
  int n_classes = 4;
  double night_prob = 0.3;
  double train_frac = 0.8;
  double val_frac = 0.2;
};

// Writes rgb/, thermal/, labels/ plus train/val/test split files and
// night.txt into `dir`.
void write_synthetic_dataset(const std::string& dir, const SynthSpec& spec);

// Directory-backed dataset, loaded eagerly with full validation.
class Dataset {
 public:
  static Dataset load(const std::string& root, int n_classes);

  size_t size() const { return order_.size(); }
  const std::vector<std::string>& basenames() const { return order_; }
  const std::vector<std::string>& split(const std::string& name) const;
  const SceneSample& get(const std::string& basename) const;
  bool is_night(const std::string& basename) const { return night_.count(basename) > 0; }
  int n_classes() const { return n_classes_; }

 private:
  int n_classes_ = 0;
  std::vector<std::string> order_;  // lexicographic
  std::map<std::string, SceneSample> samples_;
  std::map<std::string, std::vector<std::string>> splits_;
  std::map<std::string, bool> night_;
};

// Fixed class -> color palette for rendered predictions (cycled past 16).
const uint8_t* palette_color(int cls);

Tensor image_to_tensor(const ImageU8& img);   // CHW in [0,1]
ImageU8 tensor_to_image(const Tensor& chw);   // clamped, quantized

}  // namespace bimii
