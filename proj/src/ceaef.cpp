#include "bimii/ceaef.hpp"

namespace bimii {

template <typename S>
CeaefModuleT<S> CeaefModuleT<S>::make(ParamStoreT<S>& store, const std::string& name, int channels,
                                      int out_channels, int reduction, std::mt19937& rng) {
  CeaefModuleT m;
  m.channels = channels;
  int c = channels, c2 = 2 * channels;
  int hidden = std::max(1, c / reduction);
  int hidden2 = std::max(1, c2 / reduction);
  m.ca_mlp_rgb = MlpT<S>::make(store, name + ".ca_mlp_rgb", c, hidden, c, rng);
  m.ca_mlp_th = MlpT<S>::make(store, name + ".ca_mlp_th", c, hidden, c, rng);
  m.gate_mlp_main = MlpT<S>::make(store, name + ".gate_mlp_main", c2, hidden2, c2, rng);
  m.gate_mlp_comp = MlpT<S>::make(store, name + ".gate_mlp_comp", c2, hidden2, c2, rng);
  auto dw = [&](const std::string& n, int ch) {
    return Conv2dT<S>::make(store, n, ch, ch, 3, 1, 1, 1, ch, /*bias=*/true, rng);
  };
  auto pw = [&](const std::string& n, int cin, int cout) {
    return Conv2dT<S>::make(store, n, cin, cout, 1, 1, 0, 1, 1, /*bias=*/true, rng);
  };
  m.dw_main = dw(name + ".dw_main", c2);
  m.dw_comp = dw(name + ".dw_comp", c2);
  m.dw_fi_dw = dw(name + ".dw_fi.dw", c2);
  m.dw_fi_pw = pw(name + ".dw_fi.pw", c2, c);
  m.dw_fc_dw = dw(name + ".dw_fc.dw", c2);
  m.dw_fc_pw = pw(name + ".dw_fc.pw", c2, c);
  m.ds_fi_dw = dw(name + ".ds_fi.dw", c);
  m.ds_fi_pw = pw(name + ".ds_fi.pw", c, 1);
  m.ds_fc_dw = dw(name + ".ds_fc.dw", c);
  m.ds_fc_pw = pw(name + ".ds_fc.pw", c, 1);
  m.out_cbl = CblT<S>::make(store, name + ".out_cbl", c, out_channels, 3, 1, 1, 1, rng);
  return m;
}

template <typename S>
int CeaefModuleT<S>::descriptor(CtxT<S>& ctx, int x, const MlpT<S>& mlp) const {
  auto& t = ctx.t();
  int b = t.val(x).dim(0);
  int pooled = t.reshape(t.global_pool(x, PoolMode::Average), {b, channels});
  return t.reshape(mlp.forward(ctx, pooled), {b, channels, 1, 1});
}

template <typename S>
int CeaefModuleT<S>::forward(CtxT<S>& ctx, int r_i, int t_i, Trace* trace) const {
  auto& t = ctx.t();
  require_same_shape(t.val(r_i), t.val(t_i), "ceaef_forward");
  if (t.val(r_i).dim(1) != channels)
    throw ShapeError("ceaef_forward: channel extent (axis 1) " + std::to_string(t.val(r_i).dim(1)) +
                     " != configured " + std::to_string(channels));
  int b = t.val(r_i).dim(0);
  int c = channels;

  // Complementary activation: both modalities gated by one mask and its complement.
  int r_desc = descriptor(ctx, r_i, ca_mlp_rgb);
  int t_desc = descriptor(ctx, t_i, ca_mlp_th);
  int mask = t.sigmoid(t.scale(t.mul(r_desc, t_desc), (S)c));
  int inv_mask = t.one_minus(mask);
  int r_main = t.mul_bcast(r_i, mask);
  int t_main = t.mul_bcast(t_i, mask);
  int r_comp = t.mul_bcast(r_i, inv_mask);
  int t_comp = t.mul_bcast(t_i, inv_mask);

  // Cross mechanism: pooled gates from each concatenated pair, applied crosswise.
  auto gates = [&](int cat, const Conv2dT<S>& dwc, const MlpT<S>& mlp) {
    int refined = dwc.forward(ctx, cat);
    int pooled = t.reshape(t.global_pool(refined, PoolMode::Max), {b, 2 * c});
    return t.reshape(t.sigmoid(mlp.forward(ctx, pooled)), {b, 2 * c, 1, 1});
  };
  int g_main = gates(t.concat_ch({r_main, t_main}), dw_main, gate_mlp_main);
  int g_comp = gates(t.concat_ch({r_comp, t_comp}), dw_comp, gate_mlp_comp);
  int r_int = t.mul_bcast(r_main, t.slice_ch(g_main, 0, c));
  int t_int = t.mul_bcast(t_main, t.slice_ch(g_main, c, 2 * c));
  int r_cross = t.mul_bcast(r_comp, t.slice_ch(g_comp, 0, c));
  int t_cross = t.mul_bcast(t_comp, t.slice_ch(g_comp, c, 2 * c));
  int f_i = t.add(dw_fi_pw.forward(ctx, dw_fi_dw.forward(ctx, t.concat_ch({r_int, t_cross}))),
                  r_comp);
  int f_c = t.add(dw_fc_pw.forward(ctx, dw_fc_dw.forward(ctx, t.concat_ch({r_cross, t_int}))),
                  t_comp);

  // Spatial selection between the two fused branches.
  int fi_map = ds_fi_pw.forward(ctx, ds_fi_dw.forward(ctx, f_i));
  int fc_map = ds_fc_pw.forward(ctx, ds_fc_dw.forward(ctx, f_c));
  auto [v_fi, v_fc] = t.softmax_pair(fi_map, fc_map);
  int fused = t.add(t.mul_bcast(f_i, v_fi), t.mul_bcast(f_c, v_fc));
  if (trace) {
    trace->mask = mask;
    trace->r_main = r_main;
    trace->t_main = t_main;
    trace->r_comp = r_comp;
    trace->t_comp = t_comp;
    trace->f_i = f_i;
    trace->f_c = f_c;
    trace->v_fi = v_fi;
    trace->v_fc = v_fc;
  }
  return out_cbl.forward(ctx, fused);
}

template struct CeaefModuleT<float>;
template struct CeaefModuleT<double>;

}  // namespace bimii
