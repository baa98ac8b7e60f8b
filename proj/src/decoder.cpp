#include "bimii/decoder.hpp"

namespace bimii {

template <typename S>
SepConvCcnnT<S> SepConvCcnnT<S>::make(ParamStoreT<S>& store, const std::string& name, int channels,
                                      const CcnnHyper& hyper, std::mt19937& rng) {
  SepConvCcnnT m;
  m.ccnn = CcnnLayerT<S>::make(store, name + ".ccnn", channels, hyper, rng);
  m.pw = Conv2dT<S>::make(store, name + ".pw", channels, channels, 1, 1, 0, 1, 1, true, rng);
  m.ds_dw = Conv2dT<S>::make(store, name + ".ds.dw", channels, channels, 3, 1, 1, 1, channels,
                             true, rng);
  m.ds_pw = Conv2dT<S>::make(store, name + ".ds.pw", channels, channels, 1, 1, 0, 1, 1, true, rng);
  return m;
}

template <typename S>
std::pair<int, CcnnStateIds> SepConvCcnnT<S>::forward(CtxT<S>& ctx, int x, CcnnStateIds state,
                                                      int t_steps) const {
  auto& t = ctx.t();
  auto [avg, state2] = ccnn.forward(ctx, state, x, t_steps);
  int conv = ds_pw.forward(ctx, ds_dw.forward(ctx, pw.forward(ctx, avg)));
  return {t.add(conv, x), state2};
}

template <typename S>
SfiModuleT<S> SfiModuleT<S>::make(ParamStoreT<S>& store, const std::string& name, int width,
                                  const CcnnHyper& hyper, std::mt19937& rng) {
  if (width % 2 != 0) throw ConfigError("decoder width must be even");
  SfiModuleT m;
  m.in_e1 = CblT<S>::make(store, name + ".in_e1", width, width, 3, 1, 1, 1, rng);
  m.in_e2 = CblT<S>::make(store, name + ".in_e2", width, width, 3, 1, 1, 1, rng);
  m.in_s = CblT<S>::make(store, name + ".in_s", width, width, 3, 1, 1, 1, rng);
  m.fuse_add = CblT<S>::make(store, name + ".fuse_add", width, width / 2, 3, 1, 1, 1, rng);
  m.fuse_cat = CblT<S>::make(store, name + ".fuse_cat", 2 * width, width / 2, 3, 1, 1, 1, rng);
  m.sep = SepConvCcnnT<S>::make(store, name + ".sep", width, hyper, rng);
  const int rates[4] = {1, 3, 6, 12};
  for (int i = 0; i < 4; ++i)
    m.mdfe[(size_t)i] = CblT<S>::make(store, name + ".mdfe_r" + std::to_string(rates[i]), width,
                                      width, 3, 1, rates[i], rates[i], rng);
  m.mdfe_merge = CblT<S>::make(store, name + ".mdfe_merge", 4 * width, width, 3, 1, 1, 1, rng);
  return m;
}

template <typename S>
std::pair<int, CcnnStateIds> SfiModuleT<S>::forward(CtxT<S>& ctx, int e1, int e2, int s_prev,
                                                    CcnnStateIds state, int t_steps,
                                                    Trace* trace) const {
  auto& t = ctx.t();
  int a1 = in_e1.forward(ctx, e1);
  int a2 = in_e2.forward(ctx, e2);
  int as = in_s.forward(ctx, s_prev);
  int f_add = t.add(a1, a2);
  int f_cat = t.concat_ch({a1, as});
  int f_fuse = t.concat_ch({fuse_add.forward(ctx, f_add), fuse_cat.forward(ctx, f_cat)});
  auto [f_out, state2] = sep.forward(ctx, f_fuse, state, t_steps);
  int merged = f_out;
  if (mdfe_enabled) {
    std::vector<int> scales;
    for (const auto& blk : mdfe) scales.push_back(blk.forward(ctx, f_out));
    merged = mdfe_merge.forward(ctx, t.concat_ch(scales));
  }
  if (trace) {
    trace->f_fuse = f_fuse;
    trace->f_out = f_out;
  }
  return {merged, state2};
}

template <typename S>
TsaT<S> TsaT<S>::make(ParamStoreT<S>& store, const std::string& name, int width, int h, int w,
                      std::mt19937& rng) {
  TsaT m;
  m.h = h;
  m.w = w;
  m.entry = Conv2dT<S>::make(store, name + ".entry", width, width, 3, 1, 1, 1, 1, true, rng);
  m.norm_r_gamma = &store.create(name + ".norm_r.gamma", {w});
  m.norm_r_beta = &store.create(name + ".norm_r.beta", {w});
  m.norm_c_gamma = &store.create(name + ".norm_c.gamma", {h});
  m.norm_c_beta = &store.create(name + ".norm_c.beta", {h});
  m.norm_r_gamma->value.fill(S(1));
  m.norm_c_gamma->value.fill(S(1));
  m.lin_r_w = &store.create(name + ".lin_r.weight", {w, w});
  m.lin_r_b = &store.create(name + ".lin_r.bias", {w});
  m.lin_c_w = &store.create(name + ".lin_c.weight", {h, h});
  m.lin_c_b = &store.create(name + ".lin_c.bias", {h});
  // Near-identity start keeps the two splicing paths aligned with the input.
  fill_normal(m.lin_r_w->value, rng, S(0), (S)0.02);
  fill_normal(m.lin_c_w->value, rng, S(0), (S)0.02);
  for (int i = 0; i < w; ++i) m.lin_r_w->value.data[(size_t)(i * w + i)] += S(1);
  for (int i = 0; i < h; ++i) m.lin_c_w->value.data[(size_t)(i * h + i)] += S(1);
  m.proj = CblT<S>::make(store, name + ".proj", 3 * width, width, 3, 1, 1, 1, rng);
  return m;
}

template <typename S>
int TsaT<S>::forward(CtxT<S>& ctx, int f_out, Trace* trace) const {
  auto& t = ctx.t();
  const auto& xs = t.val(f_out).shape;
  int B = xs[0], C = xs[1];
  if (xs[2] != h || xs[3] != w)
    throw ShapeError("tsa: spatial extents " + shape_str(xs) + " differ from configured " +
                     std::to_string(h) + "x" + std::to_string(w));
  int x = entry.forward(ctx, f_out);

  int lrw = t.param(*lin_r_w), lrb = t.param(*lin_r_b);
  int lcw = t.param(*lin_c_w), lcb = t.param(*lin_c_b);
  auto norm_r = [&](int v) {
    return norm_enabled
               ? t.layer_norm_last(v, t.param(*norm_r_gamma), t.param(*norm_r_beta), (S)1e-5)
               : v;
  };
  auto norm_c = [&](int v) {
    return norm_enabled
               ? t.layer_norm_last(v, t.param(*norm_c_gamma), t.param(*norm_c_beta), (S)1e-5)
               : v;
  };
  // rows view: (B, C*H, W); columns view: (B, C*W, H) via an H/W transpose
  auto rows = [&](int v) { return t.reshape(v, {B, C * h, w}); };
  auto cols = [&](int v) { return t.reshape(t.transpose_hw(t.reshape(v, {B, C, h, w})), {B, C * w, h}); };
  auto uncols = [&](int v) { return t.transpose_hw(t.reshape(v, {B, C, w, h})); };

  // Branch 1: rows first, then columns.
  int x1r = t.linear(norm_r(rows(x)), lrw, lrb);                    // (B, CH, W)
  int x1c = uncols(t.linear(norm_c(cols(t.reshape(x1r, {B, C, h, w}))), lcw, lcb));
  // Branch 2: columns first, then rows.
  int x2c = t.linear(norm_c(cols(x)), lcw, lcb);                    // (B, CW, H)
  int x2r = t.reshape(t.linear(norm_r(rows(uncols(x2c))), lrw, lrb), {B, C, h, w});

  int x12 = t.add(x1c, x2r);
  int cat = t.concat_ch({x12, x1c, x2r});
  if (trace) {
    trace->x = x;
    trace->x1c = x1c;
    trace->x2r = x2r;
    trace->x12 = x12;
    trace->cat = cat;
  }
  return proj.forward(ctx, cat);
}

template <typename S>
DfiModuleT<S> DfiModuleT<S>::make(ParamStoreT<S>& store, const std::string& name, int width, int h,
                                  int w, const CcnnHyper& hyper, int reduction, std::mt19937& rng) {
  DfiModuleT m;
  m.in_e3 = CblT<S>::make(store, name + ".in_e3", width, width, 3, 1, 1, 1, rng);
  m.fuse_cat = CblT<S>::make(store, name + ".fuse_cat", 2 * width, width, 3, 1, 1, 1, rng);
  m.ca = ChannelAttnT<S>::make(store, name + ".ca", width, reduction, rng);
  auto dw = [&](const std::string& n, int ch) {
    return Conv2dT<S>::make(store, n, ch, ch, 3, 1, 1, 1, ch, true, rng);
  };
  auto pw1 = [&](const std::string& n, int ch) {
    return Conv2dT<S>::make(store, n, ch, 1, 1, 1, 0, 1, 1, true, rng);
  };
  m.sa_f_dw = dw(name + ".sa_f.dw", width);
  m.sa_f_pw = pw1(name + ".sa_f.pw", width);
  m.sa_d_dw = dw(name + ".sa_d.dw", width);
  m.sa_d_pw = pw1(name + ".sa_d.pw", width);
  m.sep = SepConvCcnnT<S>::make(store, name + ".sep", width, hyper, rng);
  m.tsa = TsaT<S>::make(store, name + ".tsa", width, h, w, rng);
  return m;
}

template <typename S>
std::pair<int, CcnnStateIds> DfiModuleT<S>::forward(CtxT<S>& ctx, int e3, int e4, int d_prev,
                                                    CcnnStateIds state, int t_steps) const {
  auto& t = ctx.t();
  int e3c = in_e3.forward(ctx, e3);
  int fused_cat = fuse_cat.forward(ctx, t.concat_ch({e3c, e4}));
  int gate = ca.forward(ctx, fused_cat);
  int f34 = t.mul_bcast(t.add(e3c, e4), gate);

  // Spatial selection between the deep fusion and the previous stage's D.
  int f_map = sa_f_pw.forward(ctx, sa_f_dw.forward(ctx, f34));
  int d_map = sa_d_pw.forward(ctx, sa_d_dw.forward(ctx, d_prev));
  auto [v_f, v_d] = t.softmax_pair(f_map, d_map);
  int f_fuse = t.add(t.mul_bcast(f34, v_f), t.mul_bcast(d_prev, v_d));

  auto [f_out, state2] = sep.forward(ctx, f_fuse, state, t_steps);
  int d_out = tsa_enabled ? tsa.forward(ctx, f_out) : f_out;
  return {d_out, state2};
}

template <typename S>
MfeModuleT<S> MfeModuleT<S>::make(ParamStoreT<S>& store, const std::string& name, int width,
                                  int reduction, std::mt19937& rng) {
  MfeModuleT m;
  m.conv_m = Conv2dT<S>::make(store, name + ".conv_m", width, width, 3, 1, 1, 1, 1, true, rng);
  m.conv_sd = Conv2dT<S>::make(store, name + ".conv_sd", width, width, 3, 1, 1, 1, 1, true, rng);
  m.ca_s = ChannelAttnT<S>::make(store, name + ".ca_s", width, reduction, rng);
  m.ca_d = ChannelAttnT<S>::make(store, name + ".ca_d", width, reduction, rng);
  m.merge = CblT<S>::make(store, name + ".merge", 3 * width, width, 3, 1, 1, 1, rng);
  m.delta_raw = &store.create(name + ".delta_raw", {1});  // sigmoid(0) = 0.5 blend
  m.gamma_raw = &store.create(name + ".gamma_raw", {1});
  return m;
}

template <typename S>
typename MfeModuleT<S>::Outputs MfeModuleT<S>::forward(CtxT<S>& ctx, int s_out, int d_out,
                                                       int m_prev) const {
  auto& t = ctx.t();
  require_same_shape(t.val(s_out), t.val(d_out), "mfe_forward");
  require_same_shape(t.val(s_out), t.val(m_prev), "mfe_forward");
  int delta = t.reshape(t.sigmoid(t.param(*delta_raw)), {1, 1, 1, 1});
  int gamma = t.reshape(t.sigmoid(t.param(*gamma_raw)), {1, 1, 1, 1});
  int weighted = t.add(t.mul_bcast(s_out, gamma), t.mul_bcast(d_out, t.one_minus(gamma)));
  int f_fuse = t.add(t.mul_bcast(conv_m.forward(ctx, m_prev), t.one_minus(delta)),
                     t.mul_bcast(conv_sd.forward(ctx, weighted), delta));
  int sum_sd = t.add(s_out, d_out);
  Outputs o;
  o.s_next = t.add(t.mul_bcast(sum_sd, ca_s.forward(ctx, f_fuse)), f_fuse);
  o.d_next = t.add(t.mul_bcast(sum_sd, ca_d.forward(ctx, f_fuse)), f_fuse);
  o.m = merge.forward(ctx, t.concat_ch({f_fuse, o.s_next, o.d_next}));
  return o;
}

template <typename S>
DecoderT<S> DecoderT<S>::make(ParamStoreT<S>& store, int width, int h, int w, int n_classes,
                              int encoder_c4, const CcnnHyper& hyper, int reduction,
                              std::mt19937& rng) {
  DecoderT d;
  d.width = width;
  d.h = h;
  d.w = w;
  d.n_classes = n_classes;
  for (int j = 0; j < 3; ++j) {
    std::string stage = "decoder.stage" + std::to_string(j + 1);
    d.sfi.push_back(SfiModuleT<S>::make(store, stage + ".sfi", width, hyper, rng));
    d.dfi.push_back(DfiModuleT<S>::make(store, stage + ".dfi", width, h, w, hyper, reduction, rng));
    d.mfe.push_back(MfeModuleT<S>::make(store, stage + ".mfe", width, reduction, rng));
  }
  d.seed_adapter = StateAdapterT<S>::make(store, "decoder.seed_adapt", encoder_c4, width, rng);
  d.head_se = Conv2dT<S>::make(store, "decoder.head_se", width, n_classes, 1, 1, 0, 1, 1, true, rng);
  return d;
}

template <typename S>
DecoderOutputIds DecoderT<S>::decode(CtxT<S>& ctx, const std::array<int, 4>& pyramid,
                                     const CcnnStateIds& merged_encoder_state, int t_steps,
                                     int out_h, int out_w) const {
  auto& t = ctx.t();
  for (int id : pyramid)
    if (id < 0) throw ContractError("decode: missing pyramid level");
  std::array<int, 4> up;
  for (int i = 0; i < 4; ++i) up[(size_t)i] = t.resize_bilinear(pyramid[(size_t)i], h, w);

  CcnnStateIds seed = state_adapt(ctx, merged_encoder_state, seed_adapter, h, w);
  DecoderOutputIds out;
  out.sfi_state = seed;
  out.dfi_state = seed;
  int s_prev = up[3], d_prev = up[3], m_prev = up[3];  // stage 1 consumes E_4
  out.stage1_s_prev = s_prev;
  out.stage1_d_prev = d_prev;
  out.stage1_m_prev = m_prev;
  int logits_sum = -1;
  for (int j = 0; j < 3; ++j) {
    int s_out, d_out;
    if (ablation.disable_sfi) {
      s_out = up[1];
      out.sfi_state.n += t_steps;
    } else {
      auto [so, st] = sfi[(size_t)j].forward(ctx, up[0], up[1], s_prev, out.sfi_state, t_steps);
      s_out = so;
      out.sfi_state = st;
    }
    if (ablation.disable_dfi) {
      d_out = up[3];
      out.dfi_state.n += t_steps;
    } else {
      auto [dd, dt] = dfi[(size_t)j].forward(ctx, up[2], up[3], d_prev, out.dfi_state, t_steps);
      d_out = dd;
      out.dfi_state = dt;
    }
    out.s_out[(size_t)j] = s_out;
    out.d_out[(size_t)j] = d_out;
    int m;
    if (ablation.disable_mfe) {
      m = t.add(s_out, d_out);
      s_prev = m;
      d_prev = m;
    } else {
      auto mo = mfe[(size_t)j].forward(ctx, s_out, d_out, m_prev);
      m = mo.m;
      s_prev = mo.s_next;
      d_prev = mo.d_next;
    }
    m_prev = m;
    out.m[(size_t)j] = m;
    int head = head_se.forward(ctx, m);
    logits_sum = logits_sum < 0 ? head : t.add(logits_sum, head);
  }
  out.logits = t.resize_bilinear(logits_sum, out_h, out_w);
  return out;
}

template struct SepConvCcnnT<float>;
template struct SepConvCcnnT<double>;
template struct SfiModuleT<float>;
template struct SfiModuleT<double>;
template struct TsaT<float>;
template struct TsaT<double>;
template struct DfiModuleT<float>;
template struct DfiModuleT<double>;
template struct MfeModuleT<float>;
template struct MfeModuleT<double>;
template struct DecoderT<float>;
template struct DecoderT<double>;

}  // namespace bimii
