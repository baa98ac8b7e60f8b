#include "bimii/encoder.hpp"

namespace bimii {

namespace {
constexpr int kStageStride[4] = {4, 2, 2, 2};
}

template <typename S>
EncoderBranchT<S> EncoderBranchT<S>::make(ParamStoreT<S>& store, const std::string& name,
                                          const EncoderConfig& cfg, int in_channels,
                                          const CcnnHyper& hyper, std::mt19937& rng) {
  cfg.validate();
  EncoderBranchT b;
  b.cfg = cfg;
  b.in_channels = in_channels;
  b.stage_blocks.resize(4);
  for (int i = 0; i < 4; ++i) {
    int cin = i == 0 ? in_channels : cfg.channels[(size_t)(i - 1)];
    int cout = cfg.channels[(size_t)i];
    std::string sname = name + ".stage" + std::to_string(i + 1);
    // Stage 1 downsamples x4 with a 5x5 window; later stages x2 with 3x3.
    int k = i == 0 ? 5 : 3;
    b.stage_blocks[(size_t)i].push_back(CblT<S>::make(store, sname + ".block0", cin, cout, k,
                                                      kStageStride[i], k / 2, 1, rng));
    for (int j = 1; j < cfg.blocks_per_stage; ++j)
      b.stage_blocks[(size_t)i].push_back(
          CblT<S>::make(store, sname + ".block" + std::to_string(j), cout, cout, 3, 1, 1, 1, rng));
    b.ccnn.push_back(CcnnLayerT<S>::make(store, sname + ".ccnn", cout, hyper, rng));
    if (i > 0)
      b.adapters.push_back(StateAdapterT<S>::make(store, name + ".adapt" + std::to_string(i),
                                                  cfg.channels[(size_t)(i - 1)], cout, rng));
  }
  return b;
}

template <typename S>
std::pair<int, CcnnStateIds> EncoderBranchT<S>::stage(CtxT<S>& ctx, int stage_index, int x,
                                                      CcnnStateIds state, int t_steps) const {
  auto& t = ctx.t();
  int xi = x;
  for (const auto& blk : stage_blocks[(size_t)stage_index]) xi = blk.forward(ctx, xi);
  auto [y_avg, state2] = ccnn[(size_t)stage_index].forward(ctx, state, xi, t_steps);
  return {t.add(y_avg, xi), state2};
}

template <typename S>
BranchIds EncoderBranchT<S>::forward(CtxT<S>& ctx, int input, int t_steps) const {
  auto& t = ctx.t();
  BranchIds out;
  CcnnStateIds state;
  int x = input;
  for (int i = 0; i < 4; ++i) {
    if (i == 0) {
      const auto& in_shape = t.val(input).shape;
      Shape s0{in_shape[0], cfg.channels[0], in_shape[2] / 4, in_shape[3] / 4};
      state = state_to_ids(t, CcnnStateT<S>::zero(s0));
    } else {
      const auto& prev = t.val(out.features[(size_t)(i - 1)]).shape;
      state = state_adapt(ctx, state, adapters[(size_t)(i - 1)], prev[2] / 2, prev[3] / 2);
    }
    auto [o, s2] = stage(ctx, i, x, state, t_steps);
    out.features[(size_t)i] = o;
    state = s2;
    x = o;
  }
  out.final_state = state;
  return out;
}

template <typename S>
EncoderT<S> EncoderT<S>::make(ParamStoreT<S>& store, const EncoderConfig& cfg,
                              const CcnnHyper& hyper, std::mt19937& rng) {
  EncoderT e;
  e.replicate_thermal = !cfg.thermal_dedicated_stem;
  e.rgb = EncoderBranchT<S>::make(store, "encoder.rgb", cfg, 3, hyper, rng);
  e.thermal = EncoderBranchT<S>::make(store, "encoder.thermal", cfg,
                                      cfg.thermal_dedicated_stem ? 1 : 3, hyper, rng);
  return e;
}

template <typename S>
std::pair<BranchIds, BranchIds> EncoderT<S>::encode(CtxT<S>& ctx, int rgb_in, int thermal_in,
                                                    int t_steps) const {
  auto& t = ctx.t();
  const auto& rs = t.val(rgb_in).shape;
  const auto& ts = t.val(thermal_in).shape;
  if (rs.size() != 4 || rs[1] != 3) throw ContractError("encode: rgb input must be Bx3xHxW");
  if (ts.size() != 4 || ts[1] != 1) throw ContractError("encode: thermal input must be Bx1xHxW");
  if (rs[2] % 32 != 0 || rs[3] % 32 != 0)
    throw ContractError("encode: spatial extents must be divisible by 32, got " + shape_str(rs));
  if (ts[2] != rs[2] || ts[3] != rs[3])
    throw ContractError("encode: rgb and thermal spatial extents differ");

  int th_in = thermal_in;
  if (replicate_thermal) th_in = t.concat_ch({thermal_in, thermal_in, thermal_in});
  BranchIds r = rgb.forward(ctx, rgb_in, t_steps);
  BranchIds h = thermal.forward(ctx, th_in, t_steps);
  return {r, h};
}

template struct EncoderBranchT<float>;
template struct EncoderBranchT<double>;
template struct EncoderT<float>;
template struct EncoderT<double>;

}  // namespace bimii
