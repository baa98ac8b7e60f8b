#include "bimii/model.hpp"

namespace bimii {

template <typename S>
BimiiNetT<S>::BimiiNetT(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937 rng(cfg_.init_seed);
  CcnnHyper hyper = cfg_.ccnn;
  if (cfg_.ablation.ccnn_mode) {
    if (cfg_.ccnn.mode != CcnnMode::Full && *cfg_.ablation.ccnn_mode != cfg_.ccnn.mode)
      throw ConfigError("conflicting ccnn modes between ccnn.mode and ablation.ccnn_mode");
    hyper.mode = *cfg_.ablation.ccnn_mode;
  }

  encoder_ = EncoderT<S>::make(params_, cfg_.encoder, hyper, rng);
  for (int i = 0; i < 4; ++i)
    ceaef_.push_back(CeaefModuleT<S>::make(params_, "ceaef.l" + std::to_string(i + 1),
                                           cfg_.encoder.channels[(size_t)i], cfg_.decoder_width,
                                           cfg_.ceaef_reduction, rng));
  decoder_ = DecoderT<S>::make(params_, cfg_.decoder_width, cfg_.in_h / 4, cfg_.in_w / 4,
                               cfg_.n_classes, cfg_.encoder.channels[3], hyper,
                               cfg_.ceaef_reduction, rng);
  decoder_.ablation.disable_sfi = cfg_.ablation.disable_sfi;
  decoder_.ablation.disable_dfi = cfg_.ablation.disable_dfi;
  decoder_.ablation.disable_mfe = cfg_.ablation.disable_mfe;
  heads_ = HeadsT<S>::make(params_, cfg_.decoder_width, rng);
  awl_s_ = &params_.create("awl.s", {7});
}

template <typename S>
typename BimiiNetT<S>::Forward BimiiNetT<S>::forward(CtxT<S>& ctx, int rgb_in, int thermal_in,
                                                     int t_steps) const {
  auto& t = ctx.t();
  const auto& rs = t.val(rgb_in).shape;
  if (rs[2] != cfg_.in_h || rs[3] != cfg_.in_w)
    throw ContractError("forward: input is " + shape_str(rs) + " but the model is configured for " +
                        std::to_string(cfg_.in_h) + "x" + std::to_string(cfg_.in_w));
  Forward f;
  auto [rb, tb] = encoder_.encode(ctx, rgb_in, thermal_in, t_steps);
  f.rgb = rb;
  f.thermal = tb;
  for (int i = 0; i < 4; ++i) {
    int r = rb.features[(size_t)i], h = tb.features[(size_t)i];
    f.fused[(size_t)i] = cfg_.ablation.disable_ceaef
                             ? ceaef_[(size_t)i].out_cbl.forward(ctx, t.add(r, h))
                             : ceaef_[(size_t)i].forward(ctx, r, h);
  }
  CcnnStateIds merged = state_merge(ctx, rb.final_state, tb.final_state);
  f.dec = decoder_.decode(ctx, f.fused, merged, t_steps, cfg_.in_h, cfg_.in_w);
  return f;
}

template <typename S>
TensorT<S> BimiiNetT<S>::infer_logits(const TensorT<S>& rgb, const TensorT<S>& thermal,
                                      int t_steps) const {
  TapeT<S> tape;
  CtxT<S> ctx{&tape, false, false};
  Forward f = forward(ctx, tape.leaf(rgb), tape.leaf(thermal), t_steps);
  return tape.val(f.dec.logits);
}

template <typename S>
void BimiiNetT<S>::set_ccnn_mode(CcnnMode mode) {
  for (auto* branch : {&encoder_.rgb, &encoder_.thermal})
    for (auto& layer : branch->ccnn) layer.hp.mode = mode;
  for (auto& m : decoder_.sfi) m.sep.ccnn.hp.mode = mode;
  for (auto& m : decoder_.dfi) m.sep.ccnn.hp.mode = mode;
}

template <typename S>
void BimiiNetT<S>::set_ablation(const AblationConfig& abl) {
  if (abl.ccnn_mode) {
    if (cfg_.ccnn.mode != CcnnMode::Full && *abl.ccnn_mode != cfg_.ccnn.mode)
      throw ConfigError("conflicting ccnn modes between ccnn.mode and ablation.ccnn_mode");
    set_ccnn_mode(*abl.ccnn_mode);
  } else {
    set_ccnn_mode(cfg_.ccnn.mode);
  }
  cfg_.ablation = abl;
  decoder_.ablation.disable_sfi = abl.disable_sfi;
  decoder_.ablation.disable_dfi = abl.disable_dfi;
  decoder_.ablation.disable_mfe = abl.disable_mfe;
}

template <typename S>
void apply_ablation(BimiiNetT<S>& model, const AblationConfig& abl) {
  model.set_ablation(abl);
}

template class BimiiNetT<float>;
template class BimiiNetT<double>;
template void apply_ablation<float>(BimiiNetT<float>&, const AblationConfig&);
template void apply_ablation<double>(BimiiNetT<double>&, const AblationConfig&);

}  // namespace bimii
