#include "bimii/ccnn.hpp"

#include <cmath>

namespace bimii {

template <typename S>
CcnnLayerT<S> CcnnLayerT<S>::make(ParamStoreT<S>& store, const std::string& name, int channels,
                                  const CcnnHyper& hp, std::mt19937& rng) {
  CcnnLayerT l;
  l.hp = hp;
  int k = hp.kernel;
  l.conv_m = &store.create(name + ".conv_m", {channels, channels, k, k});
  l.conv_w = &store.create(name + ".conv_w", {channels, channels, k, k});
  // Small synapse weights keep U - E in the sigmoid's responsive band early.
  S stddev = (S)0.05 / std::sqrt((S)(channels * k * k));
  fill_normal(l.conv_m->value, rng, S(0), stddev);
  fill_normal(l.conv_w->value, rng, S(0), stddev);
  return l;
}

template <typename S>
CcnnStateIds CcnnLayerT<S>::step(CtxT<S>& ctx, const CcnnStateIds& state, int input,
                                 int* u_out) const {
  auto& t = ctx.t();
  require_same_shape(t.val(state.f), t.val(input), "ccnn_step");
  int pad = hp.padding();
  bool linked = hp.mode == CcnnMode::Full;

  CcnnStateIds next;
  int f_decay = t.scale(state.f, (S)std::exp(-hp.alpha_f));
  if (linked) {
    int m = t.conv2d(state.y, t.param(*conv_m), -1, 1, pad, hp.dilation, 1);
    next.f = t.add(t.add(f_decay, m), input);
  } else {
    // Nolinking: feedback coupling removed, beta forced to zero below.
    next.f = t.add(f_decay, input);
  }
  int w = t.conv2d(state.y, t.param(*conv_w), -1, 1, pad, hp.dilation, 1);
  next.l = t.add(t.scale(state.l, (S)std::exp(-hp.alpha_l)), w);
  S beta = linked ? (S)hp.beta : S(0);
  int u = t.mul(next.f, t.add_const(t.scale(next.l, beta), S(1)));
  next.e = t.add(t.scale(state.e, (S)std::exp(-hp.alpha_e)), t.scale(state.y, (S)hp.v_e));
  next.y = t.sigmoid(t.sub(u, next.e));
  next.n = state.n + 1;
  if (u_out) *u_out = u;
  return next;
}

template <typename S>
std::pair<int, CcnnStateIds> CcnnLayerT<S>::forward(CtxT<S>& ctx, CcnnStateIds state, int input,
                                                    int t_steps) const {
  if (t_steps < 1) throw ContractError("ccnn_forward: t_steps must be >= 1");
  auto& t = ctx.t();
  if (hp.mode == CcnnMode::IdentityBypass) {
    state.n += t_steps;
    return {input, state};
  }
  int acc = -1;
  for (int i = 0; i < t_steps; ++i) {
    state = step(ctx, state, input);
    acc = acc < 0 ? state.y : t.add(acc, state.y);
  }
  int y_avg = t.scale(acc, S(1) / (S)t_steps);
  return {y_avg, state};
}

template <typename S>
CcnnStateIds state_merge(CtxT<S>& ctx, const CcnnStateIds& a, const CcnnStateIds& b) {
  if (a.n != b.n)
    throw ContractError("state_merge: iteration counts differ (" + std::to_string(a.n) + " vs " +
                        std::to_string(b.n) + ")");
  auto& t = ctx.t();
  require_same_shape(t.val(a.f), t.val(b.f), "state_merge");
  auto mean2 = [&](int x, int y) { return t.scale(t.add(x, y), S(0.5)); };
  CcnnStateIds m;
  m.f = mean2(a.f, b.f);
  m.l = mean2(a.l, b.l);
  m.e = mean2(a.e, b.e);
  m.y = mean2(a.y, b.y);
  m.n = a.n;
  return m;
}

template <typename S>
StateAdapterT<S> StateAdapterT<S>::make(ParamStoreT<S>& store, const std::string& name, int cin,
                                        int cout, std::mt19937& rng) {
  StateAdapterT a;
  a.wf = &store.create(name + ".f", {cout, cin, 1, 1});
  a.wl = &store.create(name + ".l", {cout, cin, 1, 1});
  a.we = &store.create(name + ".e", {cout, cin, 1, 1});
  a.wy = &store.create(name + ".y", {cout, cin, 1, 1});
  S stddev = std::sqrt(S(1) / (S)cin);
  for (ParamT<S>* p : {a.wf, a.wl, a.we, a.wy}) fill_normal(p->value, rng, S(0), stddev);
  return a;
}

template <typename S>
CcnnStateIds state_adapt(CtxT<S>& ctx, const CcnnStateIds& state, const StateAdapterT<S>& adapter,
                         int target_h, int target_w) {
  auto& t = ctx.t();
  auto project = [&](int field, ParamT<S>* w) {
    int r = t.resize_bilinear(field, target_h, target_w);
    return t.conv2d(r, t.param(*w), -1, 1, 0, 1, 1);
  };
  CcnnStateIds out;
  out.f = project(state.f, adapter.wf);
  out.l = project(state.l, adapter.wl);
  out.e = project(state.e, adapter.we);
  out.y = t.clamp(project(state.y, adapter.wy), (S)1e-6, S(1) - (S)1e-6);
  out.n = state.n;
  return out;
}

template <typename S>
CcnnStateT<S> ccnn_step(const CcnnStateT<S>& state, const TensorT<S>& input,
                        const CcnnLayerT<S>& layer) {
  TapeT<S> tape;
  CtxT<S> ctx{&tape, false, false};
  CcnnStateIds ids = state_to_ids(tape, state);
  CcnnStateIds next = layer.step(ctx, ids, tape.leaf(input));
  return ids_to_state(tape, next);
}

template <typename S>
std::pair<TensorT<S>, CcnnStateT<S>> ccnn_forward(const CcnnStateT<S>& state,
                                                  const TensorT<S>& input,
                                                  const CcnnLayerT<S>& layer, int t_steps) {
  TapeT<S> tape;
  CtxT<S> ctx{&tape, false, false};
  CcnnStateIds ids = state_to_ids(tape, state);
  auto [y_avg, next] = layer.forward(ctx, ids, tape.leaf(input), t_steps);
  return {tape.val(y_avg), ids_to_state(tape, next)};
}

template <typename S>
CcnnStateT<S> state_merge(const CcnnStateT<S>& a, const CcnnStateT<S>& b) {
  TapeT<S> tape;
  CtxT<S> ctx{&tape, false, false};
  CcnnStateIds m = state_merge(ctx, state_to_ids(tape, a), state_to_ids(tape, b));
  return ids_to_state(tape, m);
}

template struct CcnnLayerT<float>;
template struct CcnnLayerT<double>;
template struct StateAdapterT<float>;
template struct StateAdapterT<double>;
template CcnnStateIds state_merge<float>(CtxT<float>&, const CcnnStateIds&, const CcnnStateIds&);
template CcnnStateIds state_merge<double>(CtxT<double>&, const CcnnStateIds&, const CcnnStateIds&);
template CcnnStateIds state_adapt<float>(CtxT<float>&, const CcnnStateIds&,
                                         const StateAdapterT<float>&, int, int);
template CcnnStateIds state_adapt<double>(CtxT<double>&, const CcnnStateIds&,
                                          const StateAdapterT<double>&, int, int);
template CcnnStateT<float> ccnn_step<float>(const CcnnStateT<float>&, const TensorT<float>&,
                                            const CcnnLayerT<float>&);
template CcnnStateT<double> ccnn_step<double>(const CcnnStateT<double>&, const TensorT<double>&,
                                              const CcnnLayerT<double>&);
template std::pair<TensorT<float>, CcnnStateT<float>> ccnn_forward<float>(
    const CcnnStateT<float>&, const TensorT<float>&, const CcnnLayerT<float>&, int);
template std::pair<TensorT<double>, CcnnStateT<double>> ccnn_forward<double>(
    const CcnnStateT<double>&, const TensorT<double>&, const CcnnLayerT<double>&, int);
template CcnnStateT<float> state_merge<float>(const CcnnStateT<float>&, const CcnnStateT<float>&);
template CcnnStateT<double> state_merge<double>(const CcnnStateT<double>&,
                                                const CcnnStateT<double>&);

}  // namespace bimii
