#include "bimii.h"

#include <cstring>
#include <fstream>

#include "bimii/gradcheck.hpp"
#include "bimii/train.hpp"

struct bimii_ctx {
  bimii::RunConfig config;
  std::string config_text;  // raw lines accumulated via set_config
  std::string last_error;
};

namespace {

bimii_status classify(const std::exception& e) {
  using namespace bimii;
  if (dynamic_cast<const ConfigError*>(&e)) return BIMII_ERR_CONFIG;
  if (dynamic_cast<const IoError*>(&e)) return BIMII_ERR_IO;
  if (dynamic_cast<const ShapeError*>(&e)) return BIMII_ERR_SHAPE;
  if (dynamic_cast<const NumericError*>(&e)) return BIMII_ERR_NUMERIC;
  if (dynamic_cast<const ContractError*>(&e)) return BIMII_ERR_CONTRACT;
  return BIMII_ERR_RUNTIME;
}

template <typename Fn>
bimii_status guarded(bimii_ctx* ctx, Fn&& fn) {
  if (!ctx) return BIMII_ERR_INVALID_ARG;
  try {
    fn();
    ctx->last_error.clear();
    return BIMII_OK;
  } catch (const std::exception& e) {
    ctx->last_error = e.what();
    return classify(e);
  } catch (...) {
    ctx->last_error = "unknown error";
    return BIMII_ERR_RUNTIME;
  }
}

bimii::RunConfig& current_config(bimii_ctx* ctx) {
  // Re-parse accumulated text so validation always sees the full picture.
  ctx->config = bimii::RunConfig::parse_text(ctx->config_text);
  return ctx->config;
}

}  // namespace

extern "C" {

const char* bimii_status_name(bimii_status status) {
  switch (status) {
    case BIMII_OK: return "ok";
    case BIMII_ERR_INVALID_ARG: return "invalid_arg";
    case BIMII_ERR_CONFIG: return "config_error";
    case BIMII_ERR_IO: return "io_error";
    case BIMII_ERR_SHAPE: return "shape_error";
    case BIMII_ERR_CONTRACT: return "contract_error";
    case BIMII_ERR_NUMERIC: return "numeric_error";
    case BIMII_ERR_RUNTIME: return "runtime_error";
  }
  return "unknown";
}

bimii_status bimii_create(bimii_ctx** out) {
  if (!out) return BIMII_ERR_INVALID_ARG;
  try {
    *out = new bimii_ctx();
    return BIMII_OK;
  } catch (...) {
    *out = nullptr;
    return BIMII_ERR_RUNTIME;
  }
}

void bimii_destroy(bimii_ctx* ctx) { delete ctx; }

const char* bimii_last_error(const bimii_ctx* ctx) {
  return ctx ? ctx->last_error.c_str() : "null context";
}

bimii_status bimii_load_config(bimii_ctx* ctx, const char* path) {
  return guarded(ctx, [&] {
    if (!path) throw bimii::ContractError("config path is null");
    std::ifstream f(path);
    if (!f) throw bimii::IoError(std::string("cannot open config file: ") + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    bimii::RunConfig::parse_text(text);  // validate before committing
    ctx->config_text = text;
  });
}

bimii_status bimii_set_config(bimii_ctx* ctx, const char* key, const char* value) {
  return guarded(ctx, [&] {
    if (!key || !value) throw bimii::ContractError("config key/value is null");
    std::string line = std::string(key) + " = " + value + "\n";
    bimii::RunConfig::parse_text(ctx->config_text + line);  // validate
    ctx->config_text += line;
  });
}

bimii_status bimii_train(bimii_ctx* ctx, const char* resume_checkpoint, char* final_ckpt_out,
                         size_t final_ckpt_cap) {
  return guarded(ctx, [&] {
    bimii::RunConfig& cfg = current_config(ctx);
    bimii::Dataset dataset = bimii::Dataset::load(cfg.data_root, cfg.model.n_classes);
    bimii::TrainResult r =
        bimii::train(cfg, dataset, resume_checkpoint ? resume_checkpoint : "");
    if (final_ckpt_out && final_ckpt_cap > 0) {
      std::strncpy(final_ckpt_out, r.final_checkpoint.c_str(), final_ckpt_cap - 1);
      final_ckpt_out[final_ckpt_cap - 1] = '\0';
    }
  });
}

bimii_status bimii_evaluate(bimii_ctx* ctx, const char* checkpoint, const char* split,
                            const char* out_csv, int zero_thermal_on_night, double* m_acc_out,
                            double* m_iou_out) {
  return guarded(ctx, [&] {
    if (!checkpoint || !split) throw bimii::ContractError("checkpoint/split is null");
    bimii::RunConfig& cfg = current_config(ctx);
    bimii::EvalOptions opts;
    opts.zero_thermal_on_night = zero_thermal_on_night != 0;
    bimii::MetricsReport r = bimii::evaluate_checkpoint(checkpoint, cfg.data_root, split,
                                                        out_csv ? out_csv : "", opts);
    if (m_acc_out) *m_acc_out = r.m_acc;
    if (m_iou_out) *m_iou_out = r.m_iou;
  });
}

bimii_status bimii_infer(bimii_ctx* ctx, const char* checkpoint, const char* rgb_png,
                         const char* thermal_png, const char* out_png) {
  return guarded(ctx, [&] {
    if (!checkpoint || !rgb_png || !thermal_png || !out_png)
      throw bimii::ContractError("infer arguments must be non-null");
    bimii::infer_to_png(checkpoint, rgb_png, thermal_png, out_png);
  });
}

bimii_status bimii_gradcheck(bimii_ctx* ctx, const char* module, int precision,
                             double* max_rel_err_out) {
  return guarded(ctx, [&] {
    if (!module) throw bimii::ContractError("module is null");
    bimii::FdReport r = bimii::gradcheck_module(module, precision);
    if (max_rel_err_out) *max_rel_err_out = r.max_rel_err;
    if (r.max_rel_err > bimii::kGradTolerance)
      throw bimii::NumericError("gradcheck failed: max relative error " +
                                std::to_string(r.max_rel_err) + " at " + r.worst_coord);
  });
}

bimii_status bimii_synth(bimii_ctx* ctx, const char* out_dir, int count, unsigned int seed,
                         int height, int width, int classes, double night_prob, double train_frac,
                         double val_frac) {
  return guarded(ctx, [&] {
    if (!out_dir) throw bimii::ContractError("out_dir is null");
    bimii::SynthSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.height = height;
    spec.width = width;
    spec.n_classes = classes;
    spec.night_prob = night_prob;
    spec.train_frac = train_frac;
    spec.val_frac = val_frac;
    if (count < 1) throw bimii::ContractError("count must be positive");
    bimii::write_synthetic_dataset(out_dir, spec);
  });
}

bimii_status bimii_dynamics(bimii_ctx* ctx, int t_steps, double input, const char* out_csv) {
  return guarded(ctx, [&] {
    if (!out_csv) throw bimii::ContractError("out_csv is null");
    bimii::RunConfig& cfg = current_config(ctx);
    std::string csv = bimii::dynamics_csv(cfg.model.ccnn, input, t_steps);
    std::ofstream f(out_csv, std::ios::trunc | std::ios::binary);
    if (!f) throw bimii::IoError(std::string("cannot write csv: ") + out_csv);
    f << csv;
  });
}

}  // extern "C"
