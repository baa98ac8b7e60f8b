#pragma once

#include "bimii/nn.hpp"

namespace bimii {

// Cross explicit attention-enhanced fusion of one pyramid level: complementary
// sigmoid gating of both modalities, a cross mechanism over gated halves, and
// per-pixel selection between the two fused branches.
template <typename S>
struct CeaefModuleT {
  int channels = 0;
  MlpT<S> ca_mlp_rgb, ca_mlp_th;         // C -> C/r -> C pooled descriptors (no sigmoid)
  MlpT<S> gate_mlp_main, gate_mlp_comp;  // 2C -> 2C over pooled vectors
  Conv2dT<S> dw_main, dw_comp;           // depthwise 3x3 on 2C (gate path)
  Conv2dT<S> dw_fi_dw, dw_fi_pw;         // depthwise 3x3 then pointwise 2C -> C
  Conv2dT<S> dw_fc_dw, dw_fc_pw;
  Conv2dT<S> ds_fi_dw, ds_fi_pw;         // depthwise separable C -> 1
  Conv2dT<S> ds_fc_dw, ds_fc_pw;
  CblT<S> out_cbl;                       // C -> decoder width

  // Intermediate node ids for invariant tests.
  struct Trace {
    int mask = -1;
    int r_main = -1, t_main = -1, r_comp = -1, t_comp = -1;
    int f_i = -1, f_c = -1;
    int v_fi = -1, v_fc = -1;
  };

  static CeaefModuleT make(ParamStoreT<S>& store, const std::string& name, int channels,
                           int out_channels, int reduction, std::mt19937& rng);

  // Pooled channel descriptor: GAP then MLP, returned as BC11.
  int descriptor(CtxT<S>& ctx, int x, const MlpT<S>& mlp) const;

  int forward(CtxT<S>& ctx, int r_i, int t_i, Trace* trace = nullptr) const;
};

}  // namespace bimii
