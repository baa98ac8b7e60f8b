// Command-line front end over the C API.

#include <CLI11.hpp>
#include <cstdio>
#include <string>
#include <vector>

#include "bimii.h"

namespace {

struct CtxGuard {
  bimii_ctx* ctx = nullptr;
  CtxGuard() {
    if (bimii_create(&ctx) != BIMII_OK) {
      std::fprintf(stderr, "error: cannot create context\n");
      std::exit(1);
    }
  }
  ~CtxGuard() { bimii_destroy(ctx); }
};

int fail(bimii_ctx* ctx, bimii_status st) {
  std::fprintf(stderr, "error (%s): %s\n", bimii_status_name(st), bimii_last_error(ctx));
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bimii: brain-inspired RGB-T semantic segmentation"};
  app.require_subcommand(1);

  std::string config_path, resume, checkpoint, split = "val", out_path, rgb_path, thermal_path;
  std::string module = "all";
  int precision = 64;
  bool zero_thermal_night = false;
  int count = 250, height = 64, width = 64, classes = 4, t_steps = 28;
  unsigned int seed = 7;
  double night_prob = 0.3, train_frac = 0.8, val_frac = 0.2, input_value = 1.0;

  auto* cmd_train = app.add_subcommand("train", "two-stage training run");
  cmd_train->add_option("--config", config_path, "run config file")->required();
  cmd_train->add_option("--resume", resume, "checkpoint to resume from");

  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  cmd_eval->add_option("--config", config_path)->required();
  cmd_eval->add_option("--checkpoint", checkpoint)->required();
  cmd_eval->add_option("--split", split, "train|val|test");
  cmd_eval->add_option("--out", out_path, "metrics CSV path")->required();
  cmd_eval->add_flag("--zero-thermal-night", zero_thermal_night,
                     "zero the thermal channel on night samples (degraded control)");

  auto* cmd_infer = app.add_subcommand("infer", "segment one RGB-T pair");
  cmd_infer->add_option("--checkpoint", checkpoint)->required();
  cmd_infer->add_option("--rgb", rgb_path)->required();
  cmd_infer->add_option("--thermal", thermal_path)->required();
  cmd_infer->add_option("--out", out_path, "color-coded PNG; ids land beside it")->required();

  auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  cmd_grad->add_option("--module", module, "ccnn|ceaef|sfi|dfi|mfe|loss|all");
  cmd_grad->add_option("--precision", precision, "scalar bits (64)");

  auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic RGB-T dataset");
  cmd_synth->add_option("--out", out_path)->required();
  cmd_synth->add_option("--count", count);
  cmd_synth->add_option("--seed", seed);
  cmd_synth->add_option("--height", height);
  cmd_synth->add_option("--width", width);
  cmd_synth->add_option("--classes", classes);
  cmd_synth->add_option("--night-prob", night_prob);
  cmd_synth->add_option("--train-frac", train_frac);
  cmd_synth->add_option("--val-frac", val_frac);

  auto* cmd_dyn = app.add_subcommand("dynamics", "dump a scalar neuron trajectory");
  cmd_dyn->add_option("--t-steps", t_steps);
  cmd_dyn->add_option("--out", out_path)->required();
  cmd_dyn->add_option("--input", input_value, "external input level");
  cmd_dyn->add_option("--config", config_path, "optional config for neuron constants");

  CLI11_PARSE(app, argc, argv);
  CtxGuard guard;
  bimii_ctx* ctx = guard.ctx;

  if (!config_path.empty()) {
    bimii_status st = bimii_load_config(ctx, config_path.c_str());
    if (st != BIMII_OK) return fail(ctx, st);
  }

  if (cmd_train->parsed()) {
    char final_ckpt[4096];
    bimii_status st =
        bimii_train(ctx, resume.empty() ? nullptr : resume.c_str(), final_ckpt, sizeof(final_ckpt));
    if (st != BIMII_OK) return fail(ctx, st);
    std::printf("final checkpoint: %s\n", final_ckpt);
  } else if (cmd_eval->parsed()) {
    double m_acc = 0, m_iou = 0;
    bimii_status st = bimii_evaluate(ctx, checkpoint.c_str(), split.c_str(), out_path.c_str(),
                                     zero_thermal_night ? 1 : 0, &m_acc, &m_iou);
    if (st != BIMII_OK) return fail(ctx, st);
    std::printf("split %s: mAcc %.4f mIoU %.4f -> %s\n", split.c_str(), m_acc, m_iou,
                out_path.c_str());
  } else if (cmd_infer->parsed()) {
    bimii_status st = bimii_infer(ctx, checkpoint.c_str(), rgb_path.c_str(), thermal_path.c_str(),
                                  out_path.c_str());
    if (st != BIMII_OK) return fail(ctx, st);
    std::printf("wrote %s\n", out_path.c_str());
  } else if (cmd_grad->parsed()) {
    std::vector<std::string> modules;
    if (module == "all")
      modules = {"ccnn", "ceaef", "sfi", "dfi", "mfe", "loss"};
    else
      modules = {module};
    bool ok = true;
    for (const auto& m : modules) {
      double err = 0;
      bimii_status st = bimii_gradcheck(ctx, m.c_str(), precision, &err);
      if (st == BIMII_OK) {
        std::printf("[PASS] gradcheck %-5s max relative error %.3e\n", m.c_str(), err);
      } else if (st == BIMII_ERR_NUMERIC) {
        std::printf("[FAIL] gradcheck %-5s %s\n", m.c_str(), bimii_last_error(ctx));
        ok = false;
      } else {
        return fail(ctx, st);
      }
    }
    if (!ok) return 1;
  } else if (cmd_synth->parsed()) {
    bimii_status st = bimii_synth(ctx, out_path.c_str(), count, seed, height, width, classes,
                                  night_prob, train_frac, val_frac);
    if (st != BIMII_OK) return fail(ctx, st);
    std::printf("wrote %d samples under %s\n", count, out_path.c_str());
  } else if (cmd_dyn->parsed()) {
    bimii_status st = bimii_dynamics(ctx, t_steps, input_value, out_path.c_str());
    if (st != BIMII_OK) return fail(ctx, st);
    std::printf("wrote %s\n", out_path.c_str());
  }
  return 0;
}
