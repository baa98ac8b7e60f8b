#include <functional>

#include "bimii/ceaef.hpp"
#include "bimii/decoder.hpp"
#include "bimii/gradcheck.hpp"
#include "bimii/supervision.hpp"

namespace bimii {

namespace {

// Tiny shapes keep the central-difference sweeps inside the runtime budget;
// every parameter coordinate of each module is still covered.
constexpr int kC = 4;
constexpr int kH = 8;
constexpr int kW = 8;
constexpr double kEps = 1e-4;

Tensor64 rand_tensor(Shape sh, uint32_t seed, double stddev = 1.0) {
  Tensor64 t(std::move(sh));
  std::mt19937 rng(seed);
  fill_normal(t, rng, 0.0, stddev);
  return t;
}

std::vector<ParamT<double>*> all_params(ParamStoreT<double>& store) {
  std::vector<ParamT<double>*> out;
  for (const auto& p : store.all()) out.push_back(p.get());
  return out;
}

FdReport check(const std::function<double(bool)>& fn, const std::vector<ParamT<double>*>& params) {
  return finite_diff_check<double>(fn, params, kEps);
}

FdReport gradcheck_ccnn() {
  ParamStoreT<double> store;
  std::mt19937 rng(101);
  CcnnHyper hp;
  hp.kernel = 3;
  auto layer = CcnnLayerT<double>::make(store, "ccnn", 3, hp, rng);
  fill_normal(layer.conv_m->value, rng, 0.0, 0.3);
  fill_normal(layer.conv_w->value, rng, 0.0, 0.3);
  auto& input = store.create("input", {1, 3, 6, 6});
  fill_normal(input.value, rng, 0.0, 1.0);
  Tensor64 probe = rand_tensor({1, 3, 6, 6}, 102);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    auto s = state_to_ids(t, CcnnStateT<double>::zero({1, 3, 6, 6}));
    auto [avg, s4] = layer.forward(ctx, s, t.param(input), 4);
    int y = t.mean_all(t.mul(avg, t.leaf(probe)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  return check(fn, all_params(store));
}

FdReport gradcheck_ceaef() {
  ParamStoreT<double> store;
  std::mt19937 rng(201);
  auto mod = CeaefModuleT<double>::make(store, "ceaef", kC, kC, 4, rng);
  auto& r = store.create("input_r", {1, kC, kH, kW});
  auto& h = store.create("input_t", {1, kC, kH, kW});
  fill_normal(r.value, rng, 0.0, 1.0);
  fill_normal(h.value, rng, 0.0, 1.0);
  Tensor64 probe = rand_tensor({1, kC, kH, kW}, 202);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    int e = mod.forward(ctx, t.param(r), t.param(h));
    int y = t.mean_all(t.mul(e, t.leaf(probe)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  return check(fn, all_params(store));
}

FdReport gradcheck_sfi() {
  ParamStoreT<double> store;
  std::mt19937 rng(301);
  CcnnHyper hp;
  hp.kernel = 3;
  auto mod = SfiModuleT<double>::make(store, "sfi", kC, hp, rng);
  auto& e1 = store.create("input_e1", {1, kC, kH, kW});
  auto& e2 = store.create("input_e2", {1, kC, kH, kW});
  auto& sp = store.create("input_s", {1, kC, kH, kW});
  for (auto* p : {&e1, &e2, &sp}) fill_normal(p->value, rng, 0.0, 1.0);
  Tensor64 probe = rand_tensor({1, kC, kH, kW}, 302);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    auto st = state_to_ids(t, CcnnStateT<double>::zero({1, kC, kH, kW}));
    auto [s_out, st2] = mod.forward(ctx, t.param(e1), t.param(e2), t.param(sp), st, 2);
    int y = t.mean_all(t.mul(s_out, t.leaf(probe)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  return check(fn, all_params(store));
}

FdReport gradcheck_dfi() {
  ParamStoreT<double> store;
  std::mt19937 rng(401);
  CcnnHyper hp;
  hp.kernel = 3;
  auto mod = DfiModuleT<double>::make(store, "dfi", kC, kH, kW, hp, 4, rng);
  auto& e3 = store.create("input_e3", {1, kC, kH, kW});
  auto& e4 = store.create("input_e4", {1, kC, kH, kW});
  auto& dp = store.create("input_d", {1, kC, kH, kW});
  for (auto* p : {&e3, &e4, &dp}) fill_normal(p->value, rng, 0.0, 1.0);
  Tensor64 probe = rand_tensor({1, kC, kH, kW}, 402);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    auto st = state_to_ids(t, CcnnStateT<double>::zero({1, kC, kH, kW}));
    auto [d_out, st2] = mod.forward(ctx, t.param(e3), t.param(e4), t.param(dp), st, 2);
    int y = t.mean_all(t.mul(d_out, t.leaf(probe)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  return check(fn, all_params(store));
}

FdReport gradcheck_mfe() {
  ParamStoreT<double> store;
  std::mt19937 rng(501);
  auto mod = MfeModuleT<double>::make(store, "mfe", kC, 4, rng);
  auto& so = store.create("input_s", {1, kC, kH, kW});
  auto& dd = store.create("input_d", {1, kC, kH, kW});
  auto& mp = store.create("input_m", {1, kC, kH, kW});
  for (auto* p : {&so, &dd, &mp}) fill_normal(p->value, rng, 0.0, 1.0);
  Tensor64 p_s = rand_tensor({1, kC, kH, kW}, 502);
  Tensor64 p_d = rand_tensor({1, kC, kH, kW}, 503);
  Tensor64 p_m = rand_tensor({1, kC, kH, kW}, 504);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    auto o = mod.forward(ctx, t.param(so), t.param(dd), t.param(mp));
    int y = t.add(t.mean_all(t.mul(o.s_next, t.leaf(p_s))),
                  t.add(t.mean_all(t.mul(o.d_next, t.leaf(p_d))),
                        t.mean_all(t.mul(o.m, t.leaf(p_m)))));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  return check(fn, all_params(store));
}

FdReport gradcheck_loss() {
  ParamStoreT<double> store;
  std::mt19937 rng(601);
  const int K = 4;
  auto heads = HeadsT<double>::make(store, kC, rng);
  auto& awl = store.create("awl.s", {7});
  fill_normal(awl.value, rng, 0.0, 0.3);
  std::vector<ParamT<double>*> feats;
  for (const char* base : {"s_out", "d_out", "m"})
    for (int j = 1; j <= 3; ++j) {
      auto& p = store.create(std::string("input_") + base + std::to_string(j), {1, kC, 4, 4});
      fill_normal(p.value, rng, 0.0, 1.0);
      feats.push_back(&p);
    }
  auto& logits = store.create("input_logits", {1, K, kH, kW});
  fill_normal(logits.value, rng, 0.0, 1.0);

  LabelMap semantic({1, kH, kW}), binary({1, kH, kW}), boundary({1, kH, kW});
  std::mt19937 lrng(602);
  for (auto& v : semantic.data) v = (int32_t)(lrng() % K);
  for (auto& v : binary.data) v = (int32_t)(lrng() % 2);
  for (auto& v : boundary.data) v = (int32_t)(lrng() % 2);
  SupervisionTargets targets{semantic, binary, boundary};

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    DecoderOutputIds outs;
    for (int j = 0; j < 3; ++j) {
      outs.s_out[(size_t)j] = t.param(*feats[(size_t)j]);
      outs.d_out[(size_t)j] = t.param(*feats[(size_t)(3 + j)]);
      outs.m[(size_t)j] = t.param(*feats[(size_t)(6 + j)]);
    }
    outs.logits = t.param(logits);
    LossOptions opts;
    LossIds ids = compute_losses(ctx, outs, heads, targets, awl, opts);
    if (with_grad) t.backward(ids.total);
    return t.val(ids.total).data[0];
  };
  return check(fn, all_params(store));
}

}  // namespace

std::vector<std::pair<std::string, FdReport>> gradcheck_run(const std::string& module,
                                                            int precision) {
  if (precision != 64)
    throw ConfigError("gradcheck runs in the 64-bit verification mode; pass --precision 64");
  static const std::pair<const char*, FdReport (*)()> kDrivers[] = {
      {"ccnn", gradcheck_ccnn}, {"ceaef", gradcheck_ceaef}, {"sfi", gradcheck_sfi},
      {"dfi", gradcheck_dfi},   {"mfe", gradcheck_mfe},     {"loss", gradcheck_loss},
  };
  std::vector<std::pair<std::string, FdReport>> out;
  for (const auto& [name, run] : kDrivers)
    if (module == "all" || module == name) out.emplace_back(name, run());
  if (out.empty())
    throw ConfigError("unknown gradcheck module '" + module +
                      "' (expected ccnn|ceaef|sfi|dfi|mfe|loss|all)");
  return out;
}

FdReport gradcheck_module(const std::string& module, int precision) {
  FdReport worst;
  for (auto& [name, rep] : gradcheck_run(module, precision)) {
    int64_t coords = worst.coords_checked + rep.coords_checked;
    if (rep.max_rel_err >= worst.max_rel_err) worst = rep;
    worst.coords_checked = coords;
  }
  return worst;
}

}  // namespace bimii
