#include <doctest.h>

#include <cmath>

#include "bimii/ceaef.hpp"
#include "bimii/gradcheck.hpp"
#include "oracles.hpp"

using namespace bimii;

namespace {

CeaefModuleT<double> make_module(ParamStoreT<double>& store, int c, std::mt19937& rng,
                                 int out_c = -1) {
  return CeaefModuleT<double>::make(store, "ceaef", c, out_c < 0 ? c : out_c, 4, rng);
}

void zero_biases(ParamStoreT<double>& store) {
  for (const auto& p : store.all())
    if (p->name.find("bias") != std::string::npos || p->name.find(".bn.beta") != std::string::npos)
      p->value.fill(0.0);
}

}  // namespace

TEST_CASE("channel descriptor examples") {
  ParamStoreT<double> store;
  std::mt19937 rng(1);
  auto mod = make_module(store, 2, rng);

  SUBCASE("constant map through an averaging MLP keeps the value") {
    // 2 -> 1 -> 2 with fan-averaging weights reproduces a constant positive input.
    mod.ca_mlp_rgb.w1->value.fill(0.5);
    mod.ca_mlp_rgb.b1->value.fill(0.0);
    mod.ca_mlp_rgb.w2->value.fill(1.0);
    mod.ca_mlp_rgb.b2->value.fill(0.0);
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    int d = mod.descriptor(ctx, t.leaf(Tensor64::full({1, 2, 3, 3}, 2.0)), mod.ca_mlp_rgb);
    CHECK(t.val(d).shape == Shape{1, 2, 1, 1});
    CHECK(t.val(d).data[0] == doctest::Approx(2.0));
    CHECK(t.val(d).data[1] == doctest::Approx(2.0));
  }
  SUBCASE("zero input with zero biases gives a zero descriptor") {
    mod.ca_mlp_th.b1->value.fill(0.0);
    mod.ca_mlp_th.b2->value.fill(0.0);
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    int d = mod.descriptor(ctx, t.leaf(Tensor64::zeros({1, 2, 4, 4})), mod.ca_mlp_th);
    for (double v : t.val(d).data) CHECK(v == 0.0);
  }
  SUBCASE("hand-computed two-channel case") {
    // w1 = [0.5, -1], b1 = 0.2; w2 = [[2],[−1]], b2 = (0.3, −0.4)
    mod.ca_mlp_rgb.w1->value = Tensor64({1, 2}, {0.5, -1.0});
    mod.ca_mlp_rgb.b1->value = Tensor64({1}, {0.2});
    mod.ca_mlp_rgb.w2->value = Tensor64({2, 1}, {2.0, -1.0});
    mod.ca_mlp_rgb.b2->value = Tensor64({2}, {0.3, -0.4});
    Tensor64 x({1, 2, 1, 2}, {1.0, 3.0, 0.5, 0.5});  // GAP -> (2.0, 0.5)
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    int d = mod.descriptor(ctx, t.leaf(x), mod.ca_mlp_rgb);
    // hidden = relu(0.5*2.0 - 1*0.5 + 0.2) = 0.7; out = (2*0.7+0.3, -0.7-0.4)
    CHECK(t.val(d).data[0] == doctest::Approx(1.7));
    CHECK(t.val(d).data[1] == doctest::Approx(-1.1));
  }
}

TEST_CASE("zero inputs with zero biases fuse to zero") {
  ParamStoreT<double> store;
  std::mt19937 rng(2);
  auto mod = make_module(store, 3, rng);
  zero_biases(store);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  int e = mod.forward(ctx, t.leaf(Tensor64::zeros({1, 3, 4, 4})),
                      t.leaf(Tensor64::zeros({1, 3, 4, 4})));
  for (double v : t.val(e).data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("complementary masks reconstruct both inputs") {
  ParamStoreT<double> store;
  std::mt19937 rng(3);
  auto mod = make_module(store, 4, rng);
  Tape64 t;
  CtxT<double> ctx{&t, true, false};
  std::mt19937 ir(4);
  Tensor64 r({2, 4, 6, 6}), h({2, 4, 6, 6});
  fill_normal(r, ir, 0.0, 1.0);
  fill_normal(h, ir, 0.0, 1.0);
  typename CeaefModuleT<double>::Trace tr;
  mod.forward(ctx, t.leaf(r), t.leaf(h), &tr);
  for (int64_t i = 0; i < r.numel(); ++i) {
    CHECK(std::fabs(t.val(tr.r_main).data[(size_t)i] + t.val(tr.r_comp).data[(size_t)i] -
                    r.data[(size_t)i]) < 1e-6);
    CHECK(std::fabs(t.val(tr.t_main).data[(size_t)i] + t.val(tr.t_comp).data[(size_t)i] -
                    h.data[(size_t)i]) < 1e-6);
  }
  SUBCASE("spatial selection weights sum to one") {
    for (int64_t i = 0; i < t.val(tr.v_fi).numel(); ++i)
      CHECK(std::fabs(t.val(tr.v_fi).data[(size_t)i] + t.val(tr.v_fc).data[(size_t)i] - 1.0) <
            1e-6);
  }
}

TEST_CASE("a strongly positive descriptor product saturates the mask") {
  ParamStoreT<double> store;
  std::mt19937 rng(5);
  auto mod = make_module(store, 2, rng);
  // Force both descriptors to a large constant via the final MLP bias.
  for (auto* mlp : {&mod.ca_mlp_rgb, &mod.ca_mlp_th}) {
    mlp->w1->value.fill(0.0);
    mlp->b1->value.fill(0.0);
    mlp->w2->value.fill(0.0);
    mlp->b2->value.fill(5.0);
  }
  Tape64 t;
  CtxT<double> ctx{&t, true, false};
  std::mt19937 ir(6);
  Tensor64 r({1, 2, 4, 4}), h({1, 2, 4, 4});
  fill_normal(r, ir, 0.0, 1.0);
  fill_normal(h, ir, 0.0, 1.0);
  typename CeaefModuleT<double>::Trace tr;
  mod.forward(ctx, t.leaf(r), t.leaf(h), &tr);
  // mask = sigmoid(2 * 25) -> 1 within 1e-6
  for (int64_t i = 0; i < r.numel(); ++i) {
    CHECK(std::fabs(t.val(tr.r_main).data[(size_t)i] - r.data[(size_t)i]) < 1e-6);
    CHECK(std::fabs(t.val(tr.r_comp).data[(size_t)i]) < 1e-6);
  }
}

// With every pairwise parameter tied across modality halves the module is
// swap-equivariant: feeding (t, r) instead of (r, t) swaps (F_I, F_C).
TEST_CASE("swapping modalities with tied parameters mirrors the branches") {
  const int C = 3;
  ParamStoreT<double> store;
  std::mt19937 rng(7);
  auto mod = make_module(store, C, rng);

  auto copy_mlp = [](MlpT<double>& dst, const MlpT<double>& src) {
    dst.w1->value = src.w1->value;
    dst.b1->value = src.b1->value;
    dst.w2->value = src.w2->value;
    dst.b2->value = src.b2->value;
  };
  copy_mlp(mod.ca_mlp_th, mod.ca_mlp_rgb);

  auto tie_pair = [&](Conv2dT<double>& a, Conv2dT<double>& b) {
    b.weight->value = a.weight->value;
    if (a.bias && b.bias) b.bias->value = a.bias->value;
  };
  tie_pair(mod.dw_fi_dw, mod.dw_fc_dw);
  tie_pair(mod.dw_fi_pw, mod.dw_fc_pw);
  tie_pair(mod.ds_fi_dw, mod.ds_fc_dw);
  tie_pair(mod.ds_fi_pw, mod.ds_fc_pw);

  // Depthwise convs on 2C channels: per-channel taps tied across the halves.
  auto tie_dw_halves = [&](Conv2dT<double>& dw) {
    auto& w = dw.weight->value;  // (2C, 1, 3, 3)
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < 9; ++k) w.data[(size_t)((c + C) * 9 + k)] = w.data[(size_t)(c * 9 + k)];
    if (dw.bias)
      for (int c = 0; c < C; ++c)
        dw.bias->value.data[(size_t)(c + C)] = dw.bias->value.data[(size_t)c];
  };
  tie_dw_halves(mod.dw_main);
  tie_dw_halves(mod.dw_comp);
  tie_dw_halves(mod.dw_fi_dw);
  tie_dw_halves(mod.dw_fc_dw);

  // Pointwise 2C -> C convs: columns tied across the halves so a block swap
  // of the input leaves the output unchanged.
  auto tie_pw_cols = [&](Conv2dT<double>& pw) {
    auto& w = pw.weight->value;  // (C, 2C, 1, 1)
    for (int o = 0; o < w.dim(0); ++o)
      for (int i = 0; i < C; ++i)
        w.data[(size_t)(o * 2 * C + i + C)] = w.data[(size_t)(o * 2 * C + i)];
  };
  tie_pw_cols(mod.dw_fi_pw);
  tie_pw_cols(mod.dw_fc_pw);

  // Gate MLPs: columns of the first layer tied (hidden is swap-invariant) and
  // rows of the second tied (both gate halves equal).
  for (auto* mlp : {&mod.gate_mlp_main, &mod.gate_mlp_comp}) {
    auto& w1 = mlp->w1->value;  // (hidden, 2C)
    int hidden = w1.dim(0);
    for (int o = 0; o < hidden; ++o)
      for (int i = 0; i < C; ++i)
        w1.data[(size_t)(o * 2 * C + i + C)] = w1.data[(size_t)(o * 2 * C + i)];
    auto& w2 = mlp->w2->value;  // (2C, hidden)
    for (int o = 0; o < C; ++o) {
      for (int i = 0; i < hidden; ++i)
        w2.data[(size_t)((o + C) * hidden + i)] = w2.data[(size_t)(o * hidden + i)];
      mlp->b2->value.data[(size_t)(o + C)] = mlp->b2->value.data[(size_t)o];
    }
  }

  std::mt19937 ir(8);
  Tensor64 r({1, C, 5, 5}), h({1, C, 5, 5});
  fill_normal(r, ir, 0.0, 1.0);
  fill_normal(h, ir, 0.0, 1.0);

  Tape64 t;
  CtxT<double> ctx{&t, true, false};
  typename CeaefModuleT<double>::Trace fwd_tr, swap_tr;
  mod.forward(ctx, t.leaf(r), t.leaf(h), &fwd_tr);
  mod.forward(ctx, t.leaf(h), t.leaf(r), &swap_tr);
  for (int64_t i = 0; i < r.numel(); ++i) {
    CHECK(t.val(fwd_tr.f_i).data[(size_t)i] ==
          doctest::Approx(t.val(swap_tr.f_c).data[(size_t)i]).epsilon(1e-9));
    CHECK(t.val(fwd_tr.f_c).data[(size_t)i] ==
          doctest::Approx(t.val(swap_tr.f_i).data[(size_t)i]).epsilon(1e-9));
  }
}

TEST_CASE("shape mismatch is rejected") {
  ParamStoreT<double> store;
  std::mt19937 rng(9);
  auto mod = make_module(store, 2, rng);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  CHECK_THROWS_AS(
      mod.forward(ctx, t.leaf(Tensor64::zeros({1, 2, 4, 4})), t.leaf(Tensor64::zeros({1, 2, 4, 5}))),
      ShapeError);
}
