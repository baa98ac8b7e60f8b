#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bimii/decoder.hpp"

namespace bimii {

// Derived ground truth for the three supervision kinds.
struct SupervisionTargets {
  LabelMap semantic;  // class ids
  LabelMap binary;    // 1 where class > 0
  LabelMap boundary;  // 1 on the dilated inter-class edge band
};

// Pixel marked where any 4-neighbor holds a different class id, then one 3x3
// dilation (a two-pixel tolerance band on each side of an edge).
LabelMap boundary_target(const LabelMap& labels);

// Foreground indicator; class 0 is background.
LabelMap binary_target(const LabelMap& labels);

SupervisionTargets make_targets(const LabelMap& labels);

// Loss head configuration: which of the seven supervised losses are active
// and whether learned weighting is replaced by fixed weights.
struct LossOptions {
  std::array<bool, 7> mask{true, true, true, true, true, true, true};  // bin1..3, bou1..3, se
  std::optional<std::array<double, 7>> fixed_weights;
};

struct LossIds {
  std::array<int, 7> components{-1, -1, -1, -1, -1, -1, -1};  // bin1..3, bou1..3, se
  int total = -1;
};

// Automatically weighted total over the seven losses: each active task k
// contributes exp(-s_k)/2 * L_k + s_k/2 (sigma_k = exp(s_k/2)). With fixed
// weights the contribution is w_k * L_k / 2 and the log term is dropped.
template <typename S>
int awl_total(CtxT<S>& ctx, const std::array<int, 7>& losses, ParamT<S>& s_params,
              const LossOptions& opts);

template <typename S>
struct HeadsT {
  Conv2dT<S> boundary;  // 1x1 C_dec -> 2, applied to S_outj
  Conv2dT<S> binary;    // 1x1 C_dec -> 2, applied to D_outj

  static HeadsT make(ParamStoreT<S>& store, int width, std::mt19937& rng);
};

// Seven supervised losses from the decoder outputs: boundary from S_outj,
// binary from D_outj (heads shared across stages, upsampled to label
// resolution), semantic from the summed logits.
template <typename S>
LossIds compute_losses(CtxT<S>& ctx, const DecoderOutputIds& outs, const HeadsT<S>& heads,
                       const SupervisionTargets& targets, ParamT<S>& s_params,
                       const LossOptions& opts);

// --- Metrics ---

struct ConfusionCounts {
  int n_classes = 0;
  std::vector<int64_t> tp, fp, fn;

  explicit ConfusionCounts(int n)
      : n_classes(n), tp((size_t)n, 0), fp((size_t)n, 0), fn((size_t)n, 0) {}
  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionCounts& other);
};

struct MetricsReport {
  struct ClassScore {
    int cls = 0;
    double acc = 0.0, iou = 0.0;
    bool present = false;  // appears in pred or gt
  };
  std::vector<ClassScore> per_class;
  double m_acc = 0.0, m_iou = 0.0;
};

MetricsReport metrics_from_counts(const ConfusionCounts& counts);
MetricsReport metrics(const LabelMap& pred, const LabelMap& gt, int n_classes);

// One row per class (class, Acc, IoU) plus a summary row (mAcc, mIoU).
std::string metrics_csv(const MetricsReport& report);

}  // namespace bimii
