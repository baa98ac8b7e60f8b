#pragma once

#include <functional>
#include <string>

#include "bimii/checkpoint.hpp"
#include "bimii/config.hpp"
#include "bimii/data.hpp"

namespace bimii {

// Momentum-free adaptive moment estimation with decoupled weight decay and a
// constant per-stage learning rate.
class Optimizer {
 public:
  Optimizer(std::vector<ParamT<float>*> params, double lr, double weight_decay);

  void step();
  void zero_grad();
  double global_grad_norm() const;
  void clip_global_norm(double max_norm);

  double lr;
  double weight_decay;
  double beta2 = 0.999;
  double eps = 1e-8;

 private:
  std::vector<ParamT<float>*> params_;
  std::vector<Tensor> second_moment_;
  int64_t t_ = 0;
};

struct EpochLog {
  int stage = 0;
  int epoch = 0;
  double total = 0.0;
  std::array<double, 7> components{};  // bin1..3, bou1..3, se
};

struct TrainResult {
  std::string final_checkpoint;
  std::vector<EpochLog> log;
  double epoch1_loss = 0.0;
  double final_loss = 0.0;
};

// Two-stage schedule; `resume` may point at a stage-1 checkpoint, in which
// case only the fine-tuning stage runs. Emits stage1.ckpt / stage2.ckpt under
// cfg.out_dir plus a train_log.csv.
TrainResult train(const RunConfig& cfg, const Dataset& dataset,
                  const std::string& resume_checkpoint = "");

struct EvalOptions {
  bool zero_thermal_on_night = false;  // degraded control
};

MetricsReport evaluate_model(const BimiiNet& model, const Dataset& dataset,
                             const std::string& split, int t_steps,
                             const EvalOptions& opts = {});

// Rebuilds the model a checkpoint was trained with (config text rides in the
// checkpoint) and loads the weights. t_steps_out gets the stage's step count.
BimiiNet model_from_checkpoint(const LoadedCheckpoint& ckpt, int* t_steps_out);

MetricsReport evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_root,
                                  const std::string& split, const std::string& out_csv,
                                  const EvalOptions& opts = {});

// Color-coded prediction plus the raw id map ("<out>_ids.png").
void infer_to_png(const std::string& checkpoint_path, const std::string& rgb_path,
                  const std::string& thermal_path, const std::string& out_png);

// Scalar zero-kernel neuron trajectory, one row per step: n,F,L,U,E,Y.
std::string dynamics_csv(const CcnnHyper& hyper, double input, int t_steps);

LabelMap argmax_labels(const Tensor& logits_bkhw, int batch_index);

}  // namespace bimii
