#pragma once

#include <map>
#include <string>

#include "bimii/model.hpp"

namespace bimii {

struct CheckpointMeta {
  int stage = 0;
  int epoch = 0;
  uint32_t seed = 0;
  std::string config_text;
};

// Wire format: magic "BIMK1", little-endian u32 tensor count, then per tensor
// u16 name length + UTF-8 name, u8 rank, rank x u32 extents, raw f32 LE
// scalars. Run metadata rides along as reserved "__meta__..." tensors.
void save_checkpoint(const std::string& path, const ParamStoreT<float>& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  std::map<std::string, Tensor> tensors;  // metadata entries stripped
  CheckpointMeta meta;
};

LoadedCheckpoint read_checkpoint(const std::string& path);

// Exact name and shape match required in both directions.
void load_into(ParamStoreT<float>& params, const LoadedCheckpoint& ckpt);

}  // namespace bimii
