#include <doctest.h>

#include <cmath>
#include <random>

#include "bimii/gradcheck.hpp"
#include "bimii/nn.hpp"
#include "bimii/tape.hpp"
#include "oracles.hpp"

using namespace bimii;

namespace {

template <typename S>
void check_close(const TensorT<S>& a, const TensorT<S>& b, double tol) {
  REQUIRE(a.shape == b.shape);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(std::fabs((double)a.data[(size_t)i] - (double)b.data[(size_t)i]) <= tol);
}

Tensor64 randn(Shape sh, uint32_t seed, double stddev = 1.0) {
  Tensor64 t(std::move(sh));
  std::mt19937 rng(seed);
  fill_normal(t, rng, 0.0, stddev);
  return t;
}

}  // namespace

TEST_CASE("conv2d matches the nested-loop oracle on the worked example") {
  Tape64 t;
  int x = t.leaf(Tensor64::full({1, 1, 3, 3}, 1.0));
  int k = t.leaf(Tensor64::full({1, 1, 3, 3}, 1.0));
  int y = t.conv2d(x, k, -1, 1, 1, 1, 1);
  const auto& yv = t.val(y);
  CHECK(yv.at4(0, 0, 1, 1) == doctest::Approx(9.0));
  CHECK(yv.at4(0, 0, 0, 0) == doctest::Approx(4.0));
  CHECK(yv.at4(0, 0, 2, 2) == doctest::Approx(4.0));

  auto ref = oracle::conv2d<double>(t.val(x), t.val(k), nullptr, 1, 1, 1, 1);
  check_close(yv, ref, 1e-12);
}

TEST_CASE("conv2d with a delta kernel is the identity over random shapes") {
  std::mt19937 shapes(7);
  for (int trial = 0; trial < 25; ++trial) {
    int b = 1 + (int)(shapes() % 2), c = 1 + (int)(shapes() % 3);
    int h = 1 + (int)(shapes() % 16), w = 1 + (int)(shapes() % 16);
    int K = (shapes() % 2) ? 3 : 5;
    Tensor64 kern({c, c, K, K});
    for (int oc = 0; oc < c; ++oc) kern.at4(oc, oc, K / 2, K / 2) = 1.0;
    Tape64 t;
    int x = t.leaf(randn({b, c, h, w}, 100 + (uint32_t)trial));
    int y = t.conv2d(x, t.leaf(kern), -1, 1, K / 2, 1, 1);
    check_close(t.val(y), t.val(x), 1e-12);
  }
}

TEST_CASE("conv2d zero kernel gives zero output") {
  Tape64 t;
  int x = t.leaf(randn({2, 3, 5, 5}, 11));
  int y = t.conv2d(x, t.leaf(Tensor64::zeros({4, 3, 3, 3})), -1, 1, 1, 1, 1);
  for (double v : t.val(y).data) CHECK(v == 0.0);
}

TEST_CASE("conv2d stride/dilation/groups agree with the oracle") {
  std::mt19937 shapes(21);
  for (int trial = 0; trial < 20; ++trial) {
    int groups = 1 + (int)(shapes() % 3);
    int cin = groups * (1 + (int)(shapes() % 3));
    int cout = groups * (1 + (int)(shapes() % 3));
    int K = (shapes() % 2) ? 3 : 5;
    int stride = 1 + (int)(shapes() % 3);
    int pad = (int)(shapes() % 3);
    int dil = 1 + (int)(shapes() % 2);
    int h = 6 + (int)(shapes() % 9), w = 6 + (int)(shapes() % 9);
    if (h + 2 * pad < dil * (K - 1) + 1) continue;
    Tensor64 xx = randn({2, cin, h, w}, 300 + (uint32_t)trial);
    Tensor64 kk = randn({cout, cin / groups, K, K}, 400 + (uint32_t)trial);
    std::vector<double> bias((size_t)cout);
    for (size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1 * (double)i - 0.2;
    Tensor64 bt({cout}, bias);
    Tape64 t;
    int y = t.conv2d(t.leaf(xx), t.leaf(kk), t.leaf(bt), stride, pad, dil, groups);
    auto ref = oracle::conv2d<double>(xx, kk, &bias, stride, pad, dil, groups);
    check_close(t.val(y), ref, 1e-9);
  }
}

TEST_CASE("conv2d rejects bad geometry with the axis named") {
  Tape64 t;
  int x = t.leaf(Tensor64::zeros({1, 3, 4, 4}));
  CHECK_THROWS_WITH_AS(t.conv2d(x, t.leaf(Tensor64::zeros({2, 2, 3, 3})), -1, 1, 1, 1, 1),
                       doctest::Contains("axis 1"), ShapeError);
  CHECK_THROWS_AS(t.conv2d(x, t.leaf(Tensor64::zeros({2, 3, 2, 2})), -1, 1, 1, 1, 1), ShapeError);
  CHECK_THROWS_AS(t.conv2d(x, t.leaf(Tensor64::zeros({2, 1, 3, 3})), -1, 1, 1, 1, 2), ShapeError);
}

TEST_CASE("linear examples") {
  Tape64 t;
  SUBCASE("identity weight, zero bias") {
    Tensor64 w({3, 3});
    for (int i = 0; i < 3; ++i) w.data[(size_t)(i * 3 + i)] = 1.0;
    Tensor64 x = randn({5, 3}, 3);
    int y = t.linear(t.leaf(x), t.leaf(w), t.leaf(Tensor64::zeros({3})));
    check_close(t.val(y), x, 1e-12);
  }
  SUBCASE("zero weight, bias only") {
    int y = t.linear(t.leaf(randn({4, 2}, 5)), t.leaf(Tensor64::zeros({3, 2})),
                     t.leaf(Tensor64({3}, {1.0, 2.0, 3.0})));
    for (int m = 0; m < 4; ++m)
      for (int o = 0; o < 3; ++o) CHECK(t.val(y).data[(size_t)(m * 3 + o)] == doctest::Approx(o + 1.0));
  }
  SUBCASE("hand matrix product") {
    int y = t.linear(t.leaf(Tensor64({1, 2}, {1.0, 1.0})),
                     t.leaf(Tensor64({2, 2}, {1.0, 2.0, 3.0, 4.0})), -1);
    CHECK(t.val(y).data[0] == doctest::Approx(3.0));
    CHECK(t.val(y).data[1] == doctest::Approx(7.0));
  }
  SUBCASE("extent mismatch") {
    CHECK_THROWS_AS(t.linear(t.leaf(Tensor64::zeros({2, 3})), t.leaf(Tensor64::zeros({2, 2})), -1),
                    ShapeError);
  }
}

TEST_CASE("global_pool examples") {
  Tape64 t;
  Tensor64 x({1, 2, 1, 2}, {1.0, 3.0, 5.0, 5.0});
  int avg = t.global_pool(t.leaf(x), PoolMode::Average);
  int mx = t.global_pool(t.leaf(x), PoolMode::Max);
  CHECK(t.val(avg).data[0] == doctest::Approx(2.0));
  CHECK(t.val(mx).data[0] == doctest::Approx(3.0));
  CHECK(t.val(avg).data[1] == doctest::Approx(5.0));  // constant map
  CHECK(t.val(mx).data[1] == doctest::Approx(5.0));
}

TEST_CASE("resize_bilinear matches closed-form weights") {
  SUBCASE("1x2 row to 1x4") {
    Tape64 t;
    int y = t.resize_bilinear(t.leaf(Tensor64({1, 1, 1, 2}, {0.0, 1.0})), 1, 4);
    const auto& yv = t.val(y);
    CHECK(yv.data[0] == doctest::Approx(0.0));
    CHECK(yv.data[1] == doctest::Approx(0.25));
    CHECK(yv.data[2] == doctest::Approx(0.75));
    CHECK(yv.data[3] == doctest::Approx(1.0));
  }
  SUBCASE("same size is the identity") {
    Tape64 t;
    Tensor64 x = randn({1, 2, 5, 7}, 13);
    int y = t.resize_bilinear(t.leaf(x), 5, 7);
    check_close(t.val(y), x, 0.0);
  }
  SUBCASE("constants stay constant and bounds are preserved") {
    Tape64 t;
    int y = t.resize_bilinear(t.leaf(Tensor64::full({1, 1, 3, 3}, 4.25)), 8, 5);
    for (double v : t.val(y).data) CHECK(v == doctest::Approx(4.25));

    Tensor64 x = randn({1, 1, 6, 6}, 17);
    double lo = *std::min_element(x.data.begin(), x.data.end());
    double hi = *std::max_element(x.data.begin(), x.data.end());
    int z = t.resize_bilinear(t.leaf(x), 13, 4);
    for (double v : t.val(z).data) {
      CHECK(v >= lo - 1e-12);
      CHECK(v <= hi + 1e-12);
    }
  }
  SUBCASE("agrees with oracle on random resizes") {
    std::mt19937 rng(23);
    for (int trial = 0; trial < 10; ++trial) {
      int h = 2 + (int)(rng() % 7), w = 2 + (int)(rng() % 7);
      int th = 1 + (int)(rng() % 12), tw = 1 + (int)(rng() % 12);
      Tensor64 x = randn({1, 2, h, w}, 600 + (uint32_t)trial);
      Tape64 t;
      int y = t.resize_bilinear(t.leaf(x), th, tw);
      check_close(t.val(y), oracle::resize_bilinear(x, th, tw), 1e-9);
    }
  }
}

TEST_CASE("softmax_pair examples and sum-to-one invariant") {
  Tape64 t;
  SUBCASE("equal inputs split evenly") {
    int a = t.leaf(Tensor64::full({1, 1, 2, 2}, 0.7));
    auto [wa, wb] = t.softmax_pair(a, a);
    for (double v : t.val(wa).data) CHECK(v == doctest::Approx(0.5));
    for (double v : t.val(wb).data) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("difference ln 3 gives 3:1") {
    int a = t.leaf(Tensor64::full({1, 1, 1, 1}, std::log(3.0)));
    int b = t.leaf(Tensor64::zeros({1, 1, 1, 1}));
    auto [wa, wb] = t.softmax_pair(a, b);
    CHECK(t.val(wa).data[0] == doctest::Approx(0.75));
    CHECK(t.val(wb).data[0] == doctest::Approx(0.25));
  }
  SUBCASE("large difference saturates") {
    int a = t.leaf(Tensor64::full({1, 1, 1, 1}, 50.0));
    int b = t.leaf(Tensor64::zeros({1, 1, 1, 1}));
    auto [wa, wb] = t.softmax_pair(a, b);
    CHECK(std::fabs(t.val(wa).data[0] - 1.0) < 1e-9);
    CHECK(std::fabs(t.val(wb).data[0]) < 1e-9);
  }
  SUBCASE("weights sum to one on random inputs") {
    auto [wa, wb] = t.softmax_pair(t.leaf(randn({2, 1, 4, 4}, 31)), t.leaf(randn({2, 1, 4, 4}, 37)));
    for (int64_t i = 0; i < 32; ++i)
      CHECK(std::fabs(t.val(wa).data[(size_t)i] + t.val(wb).data[(size_t)i] - 1.0) < 1e-6);
  }
}

TEST_CASE("cbl block closed forms") {
  ParamStoreT<double> store;
  std::mt19937 rng(1);
  auto cbl = CblT<double>::make(store, "cbl", 1, 1, 3, 1, 1, 1, rng);
  cbl.conv.weight->value.fill(0.0);
  cbl.conv.weight->value.at4(0, 0, 1, 1) = 1.0;  // delta kernel

  auto run_eval = [&](double v) {
    Tape64 t;
    CtxT<double> ctx{&t, false, false};
    int y = cbl.forward(ctx, t.leaf(Tensor64::full({1, 1, 2, 2}, v)));
    return t.val(y).data[0];
  };
  CHECK(run_eval(2.0) == doctest::Approx(2.0).epsilon(1e-4));
  CHECK(run_eval(-1.0) == doctest::Approx(-0.1).epsilon(1e-4));

  SUBCASE("zero kernel and zero shift give zeros") {
    cbl.conv.weight->value.fill(0.0);
    CHECK(run_eval(3.7) == doctest::Approx(0.0));
  }
  SUBCASE("zero-variance channel is epsilon-guarded in train mode") {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    int y = cbl.forward(ctx, t.leaf(Tensor64::full({1, 1, 4, 4}, 5.0)));
    for (double v : t.val(y).data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("backward basics") {
  SUBCASE("gradient of sum is all ones") {
    Tape64 t;
    ParamT<double> p;
    p.name = "x";
    p.value = randn({2, 3}, 41);
    p.grad = Tensor64::zeros({2, 3});
    int x = t.param(p);
    t.backward(t.sum_all(x));
    for (double g : p.grad.data) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("gradient of sum of squares is 2x") {
    Tape64 t;
    ParamT<double> p;
    p.name = "x";
    p.value = randn({3, 2}, 43);
    p.grad = Tensor64::zeros({3, 2});
    int x = t.param(p);
    t.backward(t.sum_all(t.mul(x, x)));
    for (int64_t i = 0; i < 6; ++i)
      CHECK(p.grad.data[(size_t)i] == doctest::Approx(2.0 * p.value.data[(size_t)i]));
  }
  SUBCASE("non-scalar result is a contract error") {
    Tape64 t;
    int x = t.leaf(randn({2, 2}, 47));
    CHECK_THROWS_AS(t.backward(x), ContractError);
  }
  SUBCASE("non-participating params get zero gradients") {
    Tape64 t;
    ParamT<double> used, unused;
    used.name = "used";
    used.value = randn({2}, 51);
    used.grad = Tensor64::zeros({2});
    unused.name = "unused";
    unused.value = randn({3}, 53);
    unused.grad = Tensor64::zeros({3});
    t.backward(t.sum_all(t.param(used)));
    auto grads = t.gradients({&used, &unused});
    CHECK(grads["used"].data[0] == doctest::Approx(1.0));
    for (double g : grads["unused"].data) CHECK(g == 0.0);
  }
}

TEST_CASE("backward of sigmoid(conv2d) matches finite differences") {
  ParamStoreT<double> store;
  std::mt19937 rng(3);
  auto& x = store.create("x", {1, 2, 5, 5});
  auto& k = store.create("k", {3, 2, 3, 3});
  fill_normal(x.value, rng, 0.0, 1.0);
  fill_normal(k.value, rng, 0.0, 0.5);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    int y = t.sum_all(t.sigmoid(t.conv2d(t.param(x), t.param(k), -1, 1, 1, 1, 1)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  auto rep = finite_diff_check<double>(fn, {&x, &k}, 1e-4);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("finite_diff_check oracle behaviors") {
  SUBCASE("sum of cubes is tight") {
    ParamStoreT<double> store;
    std::mt19937 rng(5);
    auto& p = store.create("p", {6});
    fill_uniform(p.value, rng, 0.5, 1.5);
    auto fn = [&](bool with_grad) {
      Tape64 t;
      int x = t.param(p);
      int y = t.sum_all(t.mul(t.mul(x, x), x));
      if (with_grad) t.backward(y);
      return t.val(y).data[0];
    };
    auto rep = finite_diff_check<double>(fn, {&p}, 1e-4);
    CHECK(rep.max_rel_err < 1e-6);
  }
  SUBCASE("constant function has zero error") {
    ParamStoreT<double> store;
    auto& p = store.create("p", {3});
    auto fn = [&](bool with_grad) {
      Tape64 t;
      t.param(p);
      int y = t.leaf(Tensor64::scalar(4.0));
      if (with_grad) t.backward(y);
      return t.val(y).data[0];
    };
    auto rep = finite_diff_check<double>(fn, {&p}, 1e-4);
    CHECK(rep.max_rel_err == 0.0);
  }
  SUBCASE("corrupted analytic gradient fails the check") {
    ParamStoreT<double> store;
    std::mt19937 rng(6);
    auto& p = store.create("p", {4});
    fill_uniform(p.value, rng, 0.5, 1.5);
    auto fn = [&](bool with_grad) {
      Tape64 t;
      int y = t.sum_all(t.mul(t.param(p), t.param(p)));
      if (with_grad) {
        t.backward(y);
        p.grad.data[2] += 3.0;  // negative control
      }
      return t.val(y).data[0];
    };
    auto rep = finite_diff_check<double>(fn, {&p}, 1e-4);
    CHECK(rep.max_rel_err > 0.1);
  }
}

TEST_CASE("backward through a randomized op composition matches finite differences") {
  for (uint32_t seed = 0; seed < 4; ++seed) {
    ParamStoreT<double> store;
    std::mt19937 rng(900 + seed);
    auto& x = store.create("x", {1, 2, 6, 6});
    auto& k = store.create("k", {2, 2, 3, 3});
    auto& g = store.create("g", {2});
    auto& b = store.create("b", {2});
    fill_normal(x.value, rng, 0.0, 1.0);
    fill_normal(k.value, rng, 0.0, 0.4);
    fill_uniform(g.value, rng, 0.5, 1.5);
    fill_normal(b.value, rng, 0.0, 0.2);

    auto fn = [&, seed](bool with_grad) {
      Tape64 t;
      int h = t.conv2d(t.param(x), t.param(k), -1, 1, 1, 1, 1);
      switch (seed % 4) {
        case 0: h = t.leaky_relu(h, 0.1); break;
        case 1: h = t.sigmoid(h); break;
        case 2: h = t.bn_train(h, t.param(g), t.param(b), 1e-5, nullptr); break;
        case 3: h = t.resize_bilinear(h, 4, 9); break;
      }
      int up = t.resize_bilinear(h, 7, 5);
      auto [wa, wb] = t.softmax_pair(up, t.scale(up, -0.5));
      int mix = t.add(t.mul(wa, up), t.mul(wb, t.exp_(t.scale(up, 0.1))));
      int pooled = t.global_pool(mix, seed % 2 ? PoolMode::Max : PoolMode::Average);
      int y = t.sum_all(t.mul(pooled, pooled));
      if (with_grad) t.backward(y);
      return t.val(y).data[0];
    };
    auto rep = finite_diff_check<double>(fn, {&x, &k, &g, &b}, 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
  }
}
