#pragma once

#include <array>

#include "bimii/ccnn.hpp"

namespace bimii {

struct EncoderConfig {
  std::array<int, 4> channels{32, 64, 128, 256};
  int blocks_per_stage = 2;
  bool thermal_dedicated_stem = true;  // false: replicate thermal to 3 channels

  void validate() const {
    for (int i = 1; i < 4; ++i)
      if (channels[(size_t)i] <= channels[(size_t)(i - 1)])
        throw ConfigError("encoder.channels must be strictly increasing");
    if (blocks_per_stage < 1) throw ConfigError("encoder.blocks_per_stage must be >= 1");
  }
};

struct BranchIds {
  std::array<int, 4> features{-1, -1, -1, -1};  // strides 4, 8, 16, 32
  CcnnStateIds final_state;
};

// Four-stage convolutional stack with a CCNN layer and residual connection
// after each stage; one state lineage threads all four stages through learned
// 1x1 adapters at the width changes.
template <typename S>
struct EncoderBranchT {
  EncoderConfig cfg;
  int in_channels = 3;
  std::vector<std::vector<CblT<S>>> stage_blocks;  // [4][blocks_per_stage]
  std::vector<CcnnLayerT<S>> ccnn;                 // [4]
  std::vector<StateAdapterT<S>> adapters;          // [3] between stages

  static EncoderBranchT make(ParamStoreT<S>& store, const std::string& name,
                             const EncoderConfig& cfg, int in_channels, const CcnnHyper& hyper,
                             std::mt19937& rng);

  // Stage stack output X_i, then out = ccnn_avg + X_i. The state enters at
  // this stage's shape (adapted by the caller) and leaves advanced t_steps.
  std::pair<int, CcnnStateIds> stage(CtxT<S>& ctx, int stage_index, int x, CcnnStateIds state,
                                     int t_steps) const;

  BranchIds forward(CtxT<S>& ctx, int input, int t_steps) const;
};

// Both branches; validates spatial divisibility before any compute.
template <typename S>
struct EncoderT {
  EncoderBranchT<S> rgb;
  EncoderBranchT<S> thermal;
  bool replicate_thermal = false;

  static EncoderT make(ParamStoreT<S>& store, const EncoderConfig& cfg, const CcnnHyper& hyper,
                       std::mt19937& rng);

  std::pair<BranchIds, BranchIds> encode(CtxT<S>& ctx, int rgb_in, int thermal_in,
                                         int t_steps) const;
};

}  // namespace bimii
