#include <doctest.h>

#include <cmath>
#include <cstring>

#include "bimii/train.hpp"

using namespace bimii;

namespace {

ModelConfig tiny_model() {
  RunConfig cfg = RunConfig::parse_text(
      "encoder.channels = 4,6,8,10\n"
      "encoder.blocks_per_stage = 1\n"
      "ccnn.kernel = 3\n"
      "decoder.width = 8\n"
      "data.classes = 4\n"
      "data.height = 64\n"
      "data.width = 64\n"
      "run.seed = 31\n");
  return cfg.model;
}

struct FixedBatch {
  Tensor rgb, thermal;
  SupervisionTargets targets;
};

FixedBatch fixed_batch() {
  SceneSample s = gen_synthetic_scene(77, 64, 64, 4, 0.0);
  FixedBatch b;
  b.rgb = Tensor({1, 3, 64, 64}, s.rgb.data);
  b.thermal = Tensor({1, 1, 64, 64}, s.thermal.data);
  SupervisionTargets t = make_targets(s.labels);
  b.targets.semantic = LabelMap({1, 64, 64});
  b.targets.binary = LabelMap({1, 64, 64});
  b.targets.boundary = LabelMap({1, 64, 64});
  b.targets.semantic.data = t.semantic.data;
  b.targets.binary.data = t.binary.data;
  b.targets.boundary.data = t.boundary.data;
  return b;
}

Tensor logits_for(BimiiNet& model, const FixedBatch& b, int t_steps = 1) {
  return model.infer_logits(b.rgb, b.thermal, t_steps);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    d = std::max(d, std::fabs((double)a.data[(size_t)i] - (double)b.data[(size_t)i]));
  return d;
}

double total_loss(BimiiNet& model, const FixedBatch& b) {
  Tape tape;
  CtxT<float> ctx{&tape, false, false};
  auto fwd = model.forward(ctx, tape.leaf(b.rgb), tape.leaf(b.thermal), 1);
  LossIds ids =
      compute_losses(ctx, fwd.dec, model.heads(), b.targets, model.awl(), model.loss_options());
  return (double)tape.val(ids.total).data[0];
}

}  // namespace

TEST_CASE("empty ablation is a bitwise no-op") {
  BimiiNet model(tiny_model());
  FixedBatch b = fixed_batch();
  Tensor before = logits_for(model, b);
  apply_ablation(model, AblationConfig{});
  Tensor after = logits_for(model, b);
  CHECK(std::memcmp(before.data.data(), after.data.data(), before.data.size() * sizeof(float)) ==
        0);
}

TEST_CASE("identity bypass makes each encoder stage emit 2x its features") {
  ModelConfig mc = tiny_model();
  mc.ablation.ccnn_mode = CcnnMode::IdentityBypass;
  BimiiNet model(mc);
  FixedBatch b = fixed_batch();

  Tape tape;
  CtxT<float> ctx{&tape, false, false};
  auto& branch = model.encoder().rgb;
  int x = tape.leaf(b.rgb);
  int xi = x;
  for (const auto& blk : branch.stage_blocks[0]) xi = blk.forward(ctx, xi);
  CcnnStateIds st = state_to_ids(tape, CcnnStateT<float>::zero(tape.val(xi).shape));
  auto [out, st2] = branch.stage(ctx, 0, x, st, 1);
  for (int64_t i = 0; i < tape.val(out).numel(); ++i)
    CHECK(tape.val(out).data[(size_t)i] == doctest::Approx(2.0f * tape.val(xi).data[(size_t)i]));
  CHECK(st2.n == 1);  // counters still advance through the bypass
}

TEST_CASE("every structural toggle changes the forward output") {
  FixedBatch b = fixed_batch();
  BimiiNet base(tiny_model());
  Tensor base_logits = logits_for(base, b);

  auto changed_by = [&](AblationConfig abl) {
    ModelConfig mc = tiny_model();
    mc.ablation = abl;
    BimiiNet model(mc);
    return max_abs_diff(base_logits, logits_for(model, b));
  };

  AblationConfig a1;
  a1.disable_ceaef = true;
  CHECK(changed_by(a1) > 1e-9);
  AblationConfig a2;
  a2.disable_sfi = true;
  CHECK(changed_by(a2) > 1e-9);
  AblationConfig a3;
  a3.disable_dfi = true;
  CHECK(changed_by(a3) > 1e-9);
  AblationConfig a4;
  a4.disable_mfe = true;
  CHECK(changed_by(a4) > 1e-9);
  AblationConfig a5;
  a5.ccnn_mode = CcnnMode::IdentityBypass;
  CHECK(changed_by(a5) > 1e-9);
  AblationConfig a6;
  a6.ccnn_mode = CcnnMode::Nolinking;
  CHECK(changed_by(a6) > 1e-9);
}

TEST_CASE("loss toggles change the loss and zero masked gradients") {
  FixedBatch b = fixed_batch();

  SUBCASE("fixed weights reproduce hand arithmetic on frozen losses") {
    BimiiNet model(tiny_model());
    Tape tape;
    CtxT<float> ctx{&tape, false, false};
    auto fwd = model.forward(ctx, tape.leaf(b.rgb), tape.leaf(b.thermal), 1);
    LossIds plain =
        compute_losses(ctx, fwd.dec, model.heads(), b.targets, model.awl(), LossOptions{});
    LossOptions fixed;
    fixed.fixed_weights = std::array<double, 7>{1, 1, 1, 1, 1, 1, 3};
    int total_fixed = awl_total(ctx, plain.components, model.awl(), fixed);
    double expect = 0;
    for (int k = 0; k < 6; ++k) expect += 0.5 * (double)tape.val(plain.components[(size_t)k]).data[0];
    expect += 1.5 * (double)tape.val(plain.components[6]).data[0];
    CHECK((double)tape.val(total_fixed).data[0] == doctest::Approx(expect).epsilon(1e-6));
  }

  SUBCASE("masked heads contribute no gradient") {
    ModelConfig mc = tiny_model();
    mc.ablation.loss_mask = {true, true, true, false, false, false, true};  // drop boundary heads
    BimiiNet model(mc);
    double masked = total_loss(model, b);
    ModelConfig mc2 = tiny_model();
    BimiiNet full(mc2);
    double unmasked = total_loss(full, b);
    CHECK(std::fabs(masked - unmasked) > 1e-9);

    // gradient of the boundary head must vanish under the mask
    Tape tape;
    CtxT<float> ctx{&tape, true, false};
    auto fwd = model.forward(ctx, tape.leaf(b.rgb), tape.leaf(b.thermal), 1);
    LossIds ids =
        compute_losses(ctx, fwd.dec, model.heads(), b.targets, model.awl(), model.loss_options());
    model.params().zero_grads();
    tape.backward(ids.total);
    double bou_norm = 0, bin_norm = 0;
    for (float g : model.heads().boundary.weight->grad.data) bou_norm += std::fabs((double)g);
    for (float g : model.heads().binary.weight->grad.data) bin_norm += std::fabs((double)g);
    CHECK(bou_norm == 0.0);
    CHECK(bin_norm > 0.0);
  }

  SUBCASE("conflicting ccnn modes are a config error") {
    ModelConfig mc = tiny_model();
    mc.ccnn.mode = CcnnMode::Nolinking;
    mc.ablation.ccnn_mode = CcnnMode::IdentityBypass;
    CHECK_THROWS_AS(BimiiNet{mc}, ConfigError);
  }
}
