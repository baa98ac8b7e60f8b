#include <doctest.h>

#include <cmath>

#include "bimii/encoder.hpp"
#include "bimii/gradcheck.hpp"
#include "oracles.hpp"

using namespace bimii;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.channels = {2, 3, 4, 5};
  c.blocks_per_stage = 1;
  return c;
}

CcnnHyper tiny_hyper() {
  CcnnHyper hp;
  hp.kernel = 3;
  return hp;
}

}  // namespace

TEST_CASE("stage outputs sit at strides 4/8/16/32") {
  ParamStoreT<double> store;
  std::mt19937 rng(1);
  auto enc = EncoderT<double>::make(store, tiny_config(), tiny_hyper(), rng);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 ir(2);
  Tensor64 rgb({1, 3, 64, 64}), th({1, 1, 64, 64});
  fill_normal(rgb, ir, 0.0, 1.0);
  fill_normal(th, ir, 0.0, 1.0);
  auto [r, h] = enc.encode(ctx, t.leaf(rgb), t.leaf(th), 1);
  int sizes[4] = {16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) {
    CHECK(t.val(r.features[(size_t)i]).dim(2) == sizes[i]);
    CHECK(t.val(r.features[(size_t)i]).dim(3) == sizes[i]);
    CHECK(t.val(r.features[(size_t)i]).dim(1) == tiny_config().channels[(size_t)i]);
    CHECK(t.val(h.features[(size_t)i]).dim(2) == sizes[i]);
  }
}

TEST_CASE("indivisible extents are rejected before compute") {
  ParamStoreT<double> store;
  std::mt19937 rng(3);
  auto enc = EncoderT<double>::make(store, tiny_config(), tiny_hyper(), rng);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  int rgb = t.leaf(Tensor64::zeros({1, 3, 48, 64}));
  int th = t.leaf(Tensor64::zeros({1, 1, 48, 64}));
  CHECK_THROWS_AS(enc.encode(ctx, rgb, th, 1), ContractError);
}

TEST_CASE("zeroed CCNN kernels and zero stage features give out = X + 0.5") {
  ParamStoreT<double> store;
  std::mt19937 rng(4);
  auto branch = EncoderBranchT<double>::make(store, "b", tiny_config(), 3, tiny_hyper(), rng);
  branch.ccnn[0].conv_m->value.fill(0.0);
  branch.ccnn[0].conv_w->value.fill(0.0);
  // Zero stem: the stage feature X_1 collapses to zero, so the first CCNN
  // step fires at sigmoid(0) and the residual output is X_1 + 0.5 = 0.5.
  for (auto& blk : branch.stage_blocks[0]) blk.conv.weight->value.fill(0.0);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 ir(5);
  Tensor64 x({1, 3, 32, 32});
  fill_normal(x, ir, 0.0, 1.0);

  int xin = t.leaf(x);
  int xi = xin;
  for (const auto& blk : branch.stage_blocks[0]) xi = blk.forward(ctx, xi);
  for (double v : t.val(xi).data) REQUIRE(v == 0.0);
  auto state = state_to_ids(t, CcnnStateT<double>::zero(t.val(xi).shape));
  auto [out, st2] = branch.stage(ctx, 0, xin, state, 1);
  for (int64_t i = 0; i < t.val(out).numel(); ++i)
    CHECK(t.val(out).data[(size_t)i] ==
          doctest::Approx(t.val(xi).data[(size_t)i] + 0.5).epsilon(1e-12));
}

TEST_CASE("residual identity: out - X equals the ccnn average") {
  ParamStoreT<double> store;
  std::mt19937 rng(40);
  auto branch = EncoderBranchT<double>::make(store, "b", tiny_config(), 3, tiny_hyper(), rng);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 ir(41);
  Tensor64 x({1, 3, 32, 32});
  fill_normal(x, ir, 0.0, 1.0);

  int xin = t.leaf(x);
  int xi = xin;
  for (const auto& blk : branch.stage_blocks[0]) xi = blk.forward(ctx, xi);
  auto state = state_to_ids(t, CcnnStateT<double>::zero(t.val(xi).shape));
  auto [out, st2] = branch.stage(ctx, 0, xin, state, 2);
  auto state2 = state_to_ids(t, CcnnStateT<double>::zero(t.val(xi).shape));
  auto [avg, st3] = branch.ccnn[0].forward(ctx, state2, xi, 2);
  for (int64_t i = 0; i < t.val(out).numel(); ++i)
    CHECK(t.val(out).data[(size_t)i] - t.val(xi).data[(size_t)i] ==
          doctest::Approx(t.val(avg).data[(size_t)i]).epsilon(1e-12));
}

TEST_CASE("replicated thermal with tied weights mirrors the rgb branch") {
  EncoderConfig cfg = tiny_config();
  cfg.thermal_dedicated_stem = false;
  ParamStoreT<double> store;
  std::mt19937 rng(6);
  auto enc = EncoderT<double>::make(store, cfg, tiny_hyper(), rng);
  // Tie the thermal branch to the rgb branch parameter by parameter.
  for (const auto& p : store.all()) {
    const std::string prefix = "encoder.thermal.";
    if (p->name.rfind(prefix, 0) == 0) {
      auto* src = store.find("encoder.rgb." + p->name.substr(prefix.size()));
      REQUIRE(src != nullptr);
      p->value = src->value;
    }
  }
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 ir(7);
  Tensor64 gray({1, 1, 32, 32});
  fill_normal(gray, ir, 0.0, 1.0);
  Tensor64 rgb({1, 3, 32, 32});
  for (int c = 0; c < 3; ++c)
    std::copy(gray.data.begin(), gray.data.end(), rgb.data.begin() + (int64_t)c * 32 * 32);
  auto [r, h] = enc.encode(ctx, t.leaf(rgb), t.leaf(gray), 2);
  for (int i = 0; i < 4; ++i)
    for (int64_t j = 0; j < t.val(r.features[(size_t)i]).numel(); ++j)
      CHECK(t.val(r.features[(size_t)i]).data[(size_t)j] ==
            doctest::Approx(t.val(h.features[(size_t)i]).data[(size_t)j]).epsilon(1e-9));
}

TEST_CASE("one lineage threads all four stages: final n = 4 * t_steps") {
  ParamStoreT<double> store;
  std::mt19937 rng(8);
  auto enc = EncoderT<double>::make(store, tiny_config(), tiny_hyper(), rng);
  Tape64 t;
  CtxT<double> ctx{&t, false, false};
  std::mt19937 ir(9);
  Tensor64 rgb({1, 3, 32, 32}), th({1, 1, 32, 32});
  fill_normal(rgb, ir, 0.0, 1.0);
  fill_normal(th, ir, 0.0, 1.0);
  for (int t_steps : {1, 3, 4}) {
    auto [r, h] = enc.encode(ctx, t.leaf(rgb), t.leaf(th), t_steps);
    CHECK(r.final_state.n == 4 * t_steps);
    CHECK(h.final_state.n == 4 * t_steps);
  }
}

TEST_CASE("stage-1 weights influence R4 and match finite differences") {
  ParamStoreT<double> store;
  std::mt19937 rng(10);
  EncoderConfig cfg;
  cfg.channels = {2, 3, 4, 5};
  cfg.blocks_per_stage = 1;
  auto branch = EncoderBranchT<double>::make(store, "b", cfg, 3, tiny_hyper(), rng);
  auto& input = store.create("input", {1, 3, 32, 32});
  fill_normal(input.value, rng, 0.0, 1.0);
  Tensor64 probe({1, 5, 1, 1});
  fill_normal(probe, rng, 0.0, 1.0);

  auto fn = [&](bool with_grad) {
    Tape64 t;
    CtxT<double> ctx{&t, true, false};
    BranchIds out = branch.forward(ctx, t.param(input), 1);
    int y = t.mean_all(t.mul(t.global_pool(out.features[3], PoolMode::Average), t.leaf(probe)));
    if (with_grad) t.backward(y);
    return t.val(y).data[0];
  };
  ParamT<double>* w1 = branch.stage_blocks[0][0].conv.weight;
  auto rep = finite_diff_check<double>(fn, {w1}, 1e-4);
  CHECK(rep.max_rel_err < 1e-4);

  // connectivity: the analytic gradient itself must be non-trivial
  w1->zero_grad();
  fn(true);
  double norm = 0;
  for (double g : w1->grad.data) norm += g * g;
  CHECK(norm > 1e-18);
}
