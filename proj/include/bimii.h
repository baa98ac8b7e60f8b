/* C interface to the bimii segmentation engine.
 *
 * All entry points are exception-safe: failures come back as status codes and
 * the per-context message from bimii_last_error(). A context carries the run
 * configuration; train/eval read dataset paths from it.
 */
#ifndef BIMII_H_
#define BIMII_H_

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct bimii_ctx bimii_ctx;

typedef enum bimii_status {
  BIMII_OK = 0,
  BIMII_ERR_INVALID_ARG = 1,
  BIMII_ERR_CONFIG = 2,
  BIMII_ERR_IO = 3,
  BIMII_ERR_SHAPE = 4,
  BIMII_ERR_CONTRACT = 5,
  BIMII_ERR_NUMERIC = 6,
  BIMII_ERR_RUNTIME = 7
} bimii_status;

const char* bimii_status_name(bimii_status status);

bimii_status bimii_create(bimii_ctx** out);
void bimii_destroy(bimii_ctx* ctx);

/* Message for the most recent failing call on this context. */
const char* bimii_last_error(const bimii_ctx* ctx);

bimii_status bimii_load_config(bimii_ctx* ctx, const char* path);
bimii_status bimii_set_config(bimii_ctx* ctx, const char* key, const char* value);

/* Two-stage training against the configured dataset. resume_checkpoint may be
 * NULL; when it names a stage-1 checkpoint only fine-tuning runs. The final
 * checkpoint path is copied into final_ckpt_out (if non-NULL). */
bimii_status bimii_train(bimii_ctx* ctx, const char* resume_checkpoint, char* final_ckpt_out,
                         size_t final_ckpt_cap);

bimii_status bimii_evaluate(bimii_ctx* ctx, const char* checkpoint, const char* split,
                            const char* out_csv, int zero_thermal_on_night, double* m_acc_out,
                            double* m_iou_out);

bimii_status bimii_infer(bimii_ctx* ctx, const char* checkpoint, const char* rgb_png,
                         const char* thermal_png, const char* out_png);

/* module: ccnn | ceaef | sfi | dfi | mfe | loss | all. precision must be 64. */
bimii_status bimii_gradcheck(bimii_ctx* ctx, const char* module, int precision,
                             double* max_rel_err_out);

bimii_status bimii_synth(bimii_ctx* ctx, const char* out_dir, int count, unsigned int seed,
                         int height, int width, int classes, double night_prob, double train_frac,
                         double val_frac);

/* Scalar neuron trajectory CSV (columns n,f,l,u,e,y). */
bimii_status bimii_dynamics(bimii_ctx* ctx, int t_steps, double input, const char* out_csv);

#ifdef __cplusplus
}
#endif

#endif /* BIMII_H_ */
