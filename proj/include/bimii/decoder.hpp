#pragma once

#include <array>

#include "bimii/ccnn.hpp"

namespace bimii {

// Pointwise conv, depthwise-separable conv and residual wrapped around a CCNN
// layer; shared by SFI and DFI.
template <typename S>
struct SepConvCcnnT {
  CcnnLayerT<S> ccnn;
  Conv2dT<S> pw;     // 1x1 C -> C
  Conv2dT<S> ds_dw;  // depthwise 3x3
  Conv2dT<S> ds_pw;  // 1x1 C -> C

  static SepConvCcnnT make(ParamStoreT<S>& store, const std::string& name, int channels,
                           const CcnnHyper& hyper, std::mt19937& rng);

  // out = DS(PW(ccnn_avg)) + x, with the chain state advanced t_steps.
  std::pair<int, CcnnStateIds> forward(CtxT<S>& ctx, int x, CcnnStateIds state, int t_steps) const;
};

// Shallow-level feature iteration: add/concat fusion of E1, E2 and the
// previous stage's S, a CCNN separable-conv block, then multi-scale dilated
// extraction at rates 1, 3, 6, 12.
template <typename S>
struct SfiModuleT {
  CblT<S> in_e1, in_e2, in_s;  // C -> C
  CblT<S> fuse_add;            // C -> C/2
  CblT<S> fuse_cat;            // 2C -> C/2
  SepConvCcnnT<S> sep;
  std::array<CblT<S>, 4> mdfe;  // C -> C at dilations 1, 3, 6, 12
  CblT<S> mdfe_merge;           // 4C -> C
  bool mdfe_enabled = true;     // identity substitution hook for ablation tests

  struct Trace {
    int f_fuse = -1, f_out = -1;
  };

  static SfiModuleT make(ParamStoreT<S>& store, const std::string& name, int width,
                         const CcnnHyper& hyper, std::mt19937& rng);

  std::pair<int, CcnnStateIds> forward(CtxT<S>& ctx, int e1, int e2, int s_prev,
                                       CcnnStateIds state, int t_steps,
                                       Trace* trace = nullptr) const;
};

// Two-dimensional splicing attention: row-then-column and column-then-row
// normalized linear transforms, summed and concatenated with both.
template <typename S>
struct TsaT {
  Conv2dT<S> entry;  // 3x3 C -> C
  ParamT<S>* norm_r_gamma = nullptr;  // layer norm over the W axis
  ParamT<S>* norm_r_beta = nullptr;
  ParamT<S>* norm_c_gamma = nullptr;  // layer norm over the H axis
  ParamT<S>* norm_c_beta = nullptr;
  ParamT<S>* lin_r_w = nullptr;  // W -> W
  ParamT<S>* lin_r_b = nullptr;
  ParamT<S>* lin_c_w = nullptr;  // H -> H
  ParamT<S>* lin_c_b = nullptr;
  CblT<S> proj;  // 3C -> C
  int h = 0, w = 0;
  bool norm_enabled = true;

  struct Trace {
    int x = -1, x1c = -1, x2r = -1, x12 = -1, cat = -1;
  };

  static TsaT make(ParamStoreT<S>& store, const std::string& name, int width, int h, int w,
                   std::mt19937& rng);

  int forward(CtxT<S>& ctx, int x, Trace* trace = nullptr) const;
};

// Deep-level feature iteration: concat + channel attention over E3/E4, spatial
// selection against the previous stage's D, CCNN separable-conv block, TSA.
template <typename S>
struct DfiModuleT {
  CblT<S> in_e3;     // C -> C (used in both the concat and the sum)
  CblT<S> fuse_cat;  // 2C -> C
  ChannelAttnT<S> ca;
  Conv2dT<S> sa_f_dw, sa_f_pw;  // depthwise separable C -> 1 on the fused path
  Conv2dT<S> sa_d_dw, sa_d_pw;  // depthwise separable C -> 1 on D_prev
  SepConvCcnnT<S> sep;
  TsaT<S> tsa;
  bool tsa_enabled = true;

  static DfiModuleT make(ParamStoreT<S>& store, const std::string& name, int width, int h, int w,
                         const CcnnHyper& hyper, int reduction, std::mt19937& rng);

  std::pair<int, CcnnStateIds> forward(CtxT<S>& ctx, int e3, int e4, int d_prev,
                                       CcnnStateIds state, int t_steps) const;
};

// Multi-feature enhancement: learnable convex blends of M_{j-1} with the
// weighted S/D sum, twin channel-attention branches, and the stage merge.
template <typename S>
struct MfeModuleT {
  Conv2dT<S> conv_m;   // 3x3 C -> C on M_{j-1}
  Conv2dT<S> conv_sd;  // 3x3 C -> C on the weighted sum
  ChannelAttnT<S> ca_s, ca_d;
  CblT<S> merge;  // 3C -> C
  ParamT<S>* delta_raw = nullptr;  // blend gates, sigmoid-parametrized
  ParamT<S>* gamma_raw = nullptr;

  struct Outputs {
    int s_next = -1, d_next = -1, m = -1;
  };

  static MfeModuleT make(ParamStoreT<S>& store, const std::string& name, int width, int reduction,
                         std::mt19937& rng);

  Outputs forward(CtxT<S>& ctx, int s_out, int d_out, int m_prev) const;
};

struct DecoderOutputIds {
  std::array<int, 3> s_out{-1, -1, -1};
  std::array<int, 3> d_out{-1, -1, -1};
  std::array<int, 3> m{-1, -1, -1};
  int logits = -1;  // summed semantic head outputs, upsampled to input size
  CcnnStateIds sfi_state, dfi_state;
  int stage1_s_prev = -1, stage1_d_prev = -1, stage1_m_prev = -1;  // wiring checks
};

struct DecoderAblation {
  bool disable_sfi = false;  // S_outj := resized E_2
  bool disable_dfi = false;  // D_outj := resized E_4
  bool disable_mfe = false;  // S_j = D_j = M_j := S_outj + D_outj
};

// Three decoder stages at the stride-4 working resolution. Each stage has its
// own SFI/DFI/MFE parameters; the SFI chain and the DFI chain each thread one
// CCNN lineage through their three modules.
template <typename S>
struct DecoderT {
  int width = 64;
  int h = 0, w = 0;  // working resolution (input / 4)
  int n_classes = 2;
  std::vector<SfiModuleT<S>> sfi;  // [3]
  std::vector<DfiModuleT<S>> dfi;  // [3]
  std::vector<MfeModuleT<S>> mfe;  // [3]
  StateAdapterT<S> seed_adapter;
  Conv2dT<S> head_se;  // shared 1x1 C -> n_classes
  DecoderAblation ablation;

  static DecoderT make(ParamStoreT<S>& store, int width, int h, int w, int n_classes,
                       int encoder_c4, const CcnnHyper& hyper, int reduction, std::mt19937& rng);

  // Pyramid levels arrive at their native strides and are resized on entry.
  DecoderOutputIds decode(CtxT<S>& ctx, const std::array<int, 4>& pyramid,
                          const CcnnStateIds& merged_encoder_state, int t_steps, int out_h,
                          int out_w) const;
};

}  // namespace bimii
