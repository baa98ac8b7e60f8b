#include <doctest.h>

#include <cmath>
#include <random>

#include "bimii/ccnn.hpp"
#include "bimii/gradcheck.hpp"
#include "oracles.hpp"

using namespace bimii;

namespace {

CcnnLayerT<double> zero_kernel_layer(ParamStoreT<double>& store, const std::string& name, int c,
                                     CcnnHyper hp, std::mt19937& rng) {
  auto l = CcnnLayerT<double>::make(store, name, c, hp, rng);
  l.conv_m->value.fill(0.0);
  l.conv_w->value.fill(0.0);
  return l;
}

}  // namespace

TEST_CASE("first step from the zero state outputs exactly 0.5") {
  ParamStoreT<double> store;
  std::mt19937 rng(1);
  CcnnHyper hp;
  hp.kernel = 3;
  auto layer = zero_kernel_layer(store, "ccnn", 2, hp, rng);
  auto s0 = CcnnStateT<double>::zero({1, 2, 4, 4});
  auto s1 = ccnn_step(s0, Tensor64::zeros({1, 2, 4, 4}), layer);
  CHECK(s1.n == 1);
  for (double v : s1.y.data) CHECK(v == 0.5);
}

TEST_CASE("second step matches the scalar recursion (sigmoid(-0.5))") {
  ParamStoreT<double> store;
  std::mt19937 rng(1);
  CcnnHyper hp;
  hp.kernel = 3;
  hp.v_e = 1.0;
  auto layer = zero_kernel_layer(store, "ccnn", 1, hp, rng);
  auto s = CcnnStateT<double>::zero({1, 1, 1, 1});
  Tensor64 input = Tensor64::zeros({1, 1, 1, 1});
  s = ccnn_step(s, input, layer);
  s = ccnn_step(s, input, layer);
  double expect = 1.0 / (1.0 + std::exp(0.5));
  CHECK(s.y.data[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(s.y.data[0] == doctest::Approx(0.37754).epsilon(1e-4));
}

TEST_CASE("nolinking mode keeps U identical to F") {
  ParamStoreT<double> store;
  std::mt19937 rng(2);
  CcnnHyper hp;
  hp.kernel = 3;
  hp.mode = CcnnMode::Nolinking;
  auto layer = CcnnLayerT<double>::make(store, "ccnn", 2, hp, rng);

  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 xr(3);
  Tensor64 x({1, 2, 5, 5});
  fill_normal(x, xr, 0.0, 2.0);
  auto s = CcnnStateT<double>::zero(x.shape);
  s.y = Tensor64::full(x.shape, 0.4);  // active previous output so conv_w fires
  s.f = Tensor64::full(x.shape, 0.3);
  CcnnStateIds ids = state_to_ids(t, s);
  int u = -1;
  CcnnStateIds next = layer.step(ctx, ids, t.leaf(x), &u);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(t.val(u).data[(size_t)i] == t.val(next.f).data[(size_t)i]);

  SUBCASE("output is invariant to conv_w weights") {
    auto y_before = t.val(next.y);
    std::mt19937 wr(17);
    fill_normal(layer.conv_w->value, wr, 0.0, 1.0);
    Tape64 t2;
    CtxT<double> ctx2{&t2, false, false};
    CcnnStateIds next2 = layer.step(ctx2, state_to_ids(t2, s), t2.leaf(x));
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(t2.val(next2.y).data[(size_t)i] == y_before.data[(size_t)i]);
  }
}

TEST_CASE("ccnn_forward basics") {
  ParamStoreT<double> store;
  std::mt19937 rng(4);
  CcnnHyper hp;
  hp.kernel = 3;
  auto layer = zero_kernel_layer(store, "ccnn", 1, hp, rng);

  SUBCASE("t_steps below one is a contract error") {
    auto s = CcnnStateT<double>::zero({1, 1, 2, 2});
    CHECK_THROWS_AS(ccnn_forward(s, Tensor64::zeros({1, 1, 2, 2}), layer, 0), ContractError);
  }
  SUBCASE("t_steps = 1 returns that step's Y") {
    auto s0 = CcnnStateT<double>::zero({1, 1, 2, 2});
    auto [avg, s1] = ccnn_forward(s0, Tensor64::full({1, 1, 2, 2}, 0.3), layer, 1);
    auto s1b = ccnn_step(s0, Tensor64::full({1, 1, 2, 2}, 0.3), layer);
    for (int64_t i = 0; i < 4; ++i) CHECK(avg.data[(size_t)i] == s1b.y.data[(size_t)i]);
    CHECK(s1.n == 1);
  }
  SUBCASE("contrived fixed point keeps y_avg at the constant") {
    CcnnHyper fp;
    fp.kernel = 3;
    fp.v_e = 0.0;  // threshold frozen at zero
    ParamStoreT<double> st2;
    auto layer2 = zero_kernel_layer(st2, "fp", 1, fp, rng);
    double input = 0.8;
    double fstar = input / (1.0 - std::exp(-fp.alpha_f));
    auto s = CcnnStateT<double>::zero({1, 1, 2, 2});
    s.f = Tensor64::full({1, 1, 2, 2}, fstar);
    auto [avg, s2] = ccnn_forward(s, Tensor64::full({1, 1, 2, 2}, input), layer2, 5);
    double ystar = 1.0 / (1.0 + std::exp(-fstar));
    for (double v : avg.data) CHECK(v == doctest::Approx(ystar).epsilon(1e-12));
  }
  SUBCASE("four steps match the scalar recursion oracle") {
    CcnnHyper hp4;
    hp4.kernel = 3;
    hp4.v_e = 1.0;
    ParamStoreT<double> st3;
    auto layer3 = zero_kernel_layer(st3, "r4", 1, hp4, rng);
    auto s = CcnnStateT<double>::zero({1, 1, 1, 1});
    auto [avg, s4] = ccnn_forward(s, Tensor64::zeros({1, 1, 1, 1}), layer3, 4);
    auto tr = oracle::ccnn_scalar(0.0, hp4.alpha_f, hp4.alpha_l, hp4.alpha_e, hp4.v_e, hp4.beta, 4);
    double mean = (tr.y[0] + tr.y[1] + tr.y[2] + tr.y[3]) / 4.0;
    CHECK(avg.data[0] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(s4.n == 4);
    CHECK(s4.y.data[0] == doctest::Approx(tr.y[3]).epsilon(1e-12));
    CHECK(s4.e.data[0] == doctest::Approx(tr.e[3]).epsilon(1e-12));
    CHECK(s4.f.data[0] == doctest::Approx(tr.f[3]).epsilon(1e-12));
  }
  SUBCASE("nonzero driven recursion with input matches the oracle") {
    CcnnHyper hp4;
    hp4.kernel = 3;
    ParamStoreT<double> st4;
    auto layer4 = zero_kernel_layer(st4, "r5", 1, hp4, rng);
    auto s = CcnnStateT<double>::zero({1, 1, 1, 1});
    auto [avg, s6] = ccnn_forward(s, Tensor64::full({1, 1, 1, 1}, 0.6), layer4, 6);
    auto tr = oracle::ccnn_scalar(0.6, hp4.alpha_f, hp4.alpha_l, hp4.alpha_e, hp4.v_e, hp4.beta, 6);
    double mean = 0;
    for (double v : tr.y) mean += v;
    mean /= 6.0;
    CHECK(avg.data[0] == doctest::Approx(mean).epsilon(1e-12));
  }
}

// Parameterizations are drawn from the non-saturating regime the defaults
// live in (decay exponents and gains of order one, init-scale synapses).
TEST_CASE("Y stays strictly inside (0,1) for random parameterizations") {
  std::mt19937 rng(99);
  std::uniform_real_distribution<double> decay(0.05, 2.0);
  std::uniform_real_distribution<double> gain(0.0, 2.0);
  std::uniform_real_distribution<double> link(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    CcnnHyper hp;
    hp.kernel = 3;
    hp.alpha_f = decay(rng);
    hp.alpha_l = decay(rng);
    hp.alpha_e = decay(rng);
    hp.v_e = gain(rng);
    hp.beta = link(rng);
    if (trial % 3 == 0) hp.mode = CcnnMode::Nolinking;
    ParamStoreT<double> store;
    auto layer = CcnnLayerT<double>::make(store, "c", 2, hp, rng);
    Tensor64 x({1, 2, 3, 3});
    fill_normal(x, rng, 0.0, 1.0);
    auto s = CcnnStateT<double>::zero(x.shape);
    for (int step = 0; step < 3; ++step) {
      s = ccnn_step(s, x, layer);
      for (double v : s.y.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("step rejects shape mismatch") {
  ParamStoreT<double> store;
  std::mt19937 rng(5);
  CcnnHyper hp;
  hp.kernel = 3;
  auto layer = CcnnLayerT<double>::make(store, "c", 1, hp, rng);
  auto s = CcnnStateT<double>::zero({1, 1, 4, 4});
  CHECK_THROWS_AS(ccnn_step(s, Tensor64::zeros({1, 1, 3, 3}), layer), ShapeError);
}

TEST_CASE("state_merge") {
  auto mk = [](double v, int n) {
    auto s = CcnnStateT<double>::zero({1, 1, 2, 2});
    s.f = Tensor64::full({1, 1, 2, 2}, v);
    s.l = Tensor64::full({1, 1, 2, 2}, 2 * v);
    s.e = Tensor64::full({1, 1, 2, 2}, -v);
    s.y = Tensor64::full({1, 1, 2, 2}, 0.3 * v);
    s.n = n;
    return s;
  };
  SUBCASE("merging a state with itself is the identity") {
    auto a = mk(0.7, 4);
    auto m = state_merge(a, a);
    CHECK(m.n == 4);
    for (int64_t i = 0; i < 4; ++i) CHECK(m.f.data[(size_t)i] == a.f.data[(size_t)i]);
  }
  SUBCASE("fieldwise negation cancels") {
    auto a = mk(0.9, 2), b = mk(-0.9, 2);
    auto m = state_merge(a, b);
    for (double v : m.f.data) CHECK(v == 0.0);
    for (double v : m.y.data) CHECK(v == 0.0);
  }
  SUBCASE("random states average elementwise") {
    std::mt19937 rng(7);
    auto a = CcnnStateT<double>::zero({1, 2, 3, 3});
    auto b = CcnnStateT<double>::zero({1, 2, 3, 3});
    for (auto* f : {&a.f, &a.l, &a.e, &a.y, &b.f, &b.l, &b.e, &b.y}) fill_normal(*f, rng, 0.0, 1.0);
    a.n = b.n = 3;
    auto m = state_merge(a, b);
    for (int64_t i = 0; i < a.f.numel(); ++i)
      CHECK(m.f.data[(size_t)i] ==
            doctest::Approx((a.f.data[(size_t)i] + b.f.data[(size_t)i]) / 2.0));
  }
  SUBCASE("iteration count mismatch is a contract error") {
    auto a = mk(0.1, 2), b = mk(0.1, 3);
    CHECK_THROWS_AS(state_merge(a, b), ContractError);
  }
}

TEST_CASE("state_adapt") {
  SUBCASE("identity adapter at the same shape changes nothing material") {
    ParamStoreT<double> store;
    std::mt19937 rng(8);
    auto ad = StateAdapterT<double>::make(store, "ad", 2, 2, rng);
    for (ParamT<double>* w : {ad.wf, ad.wl, ad.we, ad.wy}) {
      w->value.fill(0.0);
      for (int c = 0; c < 2; ++c) w->value.at4(c, c, 0, 0) = 1.0;
    }
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    auto s = CcnnStateT<double>::zero({1, 2, 4, 4});
    std::mt19937 sr(9);
    fill_normal(s.f, sr, 0.0, 1.0);
    fill_uniform(s.y, sr, 0.2, 0.8);  // interior values: clamp is a no-op
    s.n = 5;
    auto out = state_adapt(ctx, state_to_ids(t, s), ad, 4, 4);
    CHECK(out.n == 5);
    for (int64_t i = 0; i < s.f.numel(); ++i) {
      CHECK(t.val(out.f).data[(size_t)i] == doctest::Approx(s.f.data[(size_t)i]));
      CHECK(t.val(out.y).data[(size_t)i] == doctest::Approx(s.y.data[(size_t)i]));
    }
  }
  SUBCASE("zero state maps to zero state") {
    ParamStoreT<double> store;
    std::mt19937 rng(10);
    auto ad = StateAdapterT<double>::make(store, "ad", 2, 3, rng);
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    auto s = CcnnStateT<double>::zero({1, 2, 4, 4});
    auto out = state_adapt(ctx, state_to_ids(t, s), ad, 2, 2);
    for (double v : t.val(out.f).data) CHECK(v == 0.0);
    for (double v : t.val(out.e).data) CHECK(v == 0.0);
    // Y clamps into (0,1) even from zero
    for (double v : t.val(out.y).data) CHECK(v == doctest::Approx(1e-6));
  }
  SUBCASE("constant fields propagate through an average-preserving adapter") {
    ParamStoreT<double> store;
    std::mt19937 rng(11);
    auto ad = StateAdapterT<double>::make(store, "ad", 2, 1, rng);
    for (ParamT<double>* w : {ad.wf, ad.wl, ad.we, ad.wy}) w->value.fill(0.5);  // mean of 2 channels
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    auto s = CcnnStateT<double>::zero({1, 2, 4, 4});
    s.f = Tensor64::full({1, 2, 4, 4}, 0.7);
    s.y = Tensor64::full({1, 2, 4, 4}, 0.4);
    auto out = state_adapt(ctx, state_to_ids(t, s), ad, 8, 8);
    for (double v : t.val(out.f).data) CHECK(v == doctest::Approx(0.7));
    for (double v : t.val(out.y).data) CHECK(v == doctest::Approx(0.4));
  }
}

TEST_CASE("ccnn_forward gradients match finite differences through the recursion") {
  ParamStoreT<double> store;
  std::mt19937 rng(12);
  CcnnHyper hp;
  hp.kernel = 3;
  auto layer = CcnnLayerT<double>::make(store, "c", 2, hp, rng);
  fill_normal(layer.conv_m->value, rng, 0.0, 0.3);
  fill_normal(layer.conv_w->value, rng, 0.0, 0.3);
  auto& input = store.create("input", {1, 2, 5, 5});
  fill_normal(input.value, rng, 0.0, 1.0);
  Tensor64 weights({1, 2, 5, 5});
  fill_normal(weights, rng, 0.0, 1.0);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    auto s = state_to_ids(t, CcnnStateT<double>::zero({1, 2, 5, 5}));
    auto [avg, s4] = layer.forward(ctx, s, t.param(input), 4);
    int y = t.sum_all(t.mul(avg, t.leaf(weights)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  auto rep = finite_diff_check<double>(fn, {layer.conv_m, layer.conv_w, &input}, 1e-5);
  CHECK(rep.max_rel_err < 1e-4);
}
