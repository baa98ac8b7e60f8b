#pragma once

#include <string>

#include "bimii/model.hpp"

namespace bimii {

struct StageConfig {
  int epochs = 0;
  int batch = 1;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  double clip_norm = 0.0;  // 0 disables clipping
  int t_steps = 1;
};

// Whole-run configuration, parsed from UTF-8 `key = value` lines with `#`
// comments. Unknown keys are errors.
struct RunConfig {
  ModelConfig model;
  std::string data_root;
  std::string out_dir = "runs/default";
  uint32_t seed = 1;
  bool aug_crop = true;
  bool aug_hflip = true;
  StageConfig stage1{75, 2, 1e-4, 5e-4, 0.0, 1};
  StageConfig stage2{10, 1, 1e-5, 5e-4, 20.0, 4};

  static RunConfig parse_text(const std::string& text);
  static RunConfig parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void validate() const;

  // Canonical full key=value dump; re-parsing it reproduces this config.
  std::string serialize() const;
};

}  // namespace bimii
