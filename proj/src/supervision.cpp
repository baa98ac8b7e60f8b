#include "bimii/supervision.hpp"

#include <cmath>
#include <sstream>

namespace bimii {

namespace {

void require_hw(const LabelMap& m, const char* who) {
  if (m.shape.size() != 2) throw ContractError(std::string(who) + ": label map must be HxW");
}

}  // namespace

LabelMap boundary_target(const LabelMap& labels) {
  require_hw(labels, "boundary_target");
  int H = labels.shape[0], W = labels.shape[1];
  LabelMap edges({H, W});
  auto at = [&](const LabelMap& m, int y, int x) { return m.data[(size_t)(y * W + x)]; };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int32_t c = at(labels, y, x);
      bool edge = (y > 0 && at(labels, y - 1, x) != c) || (y + 1 < H && at(labels, y + 1, x) != c) ||
                  (x > 0 && at(labels, y, x - 1) != c) || (x + 1 < W && at(labels, y, x + 1) != c);
      edges.data[(size_t)(y * W + x)] = edge ? 1 : 0;
    }
  LabelMap dilated({H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int32_t v = 0;
      for (int dy = -1; dy <= 1 && !v; ++dy)
        for (int dx = -1; dx <= 1 && !v; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < H && xx >= 0 && xx < W && at(edges, yy, xx)) v = 1;
        }
      dilated.data[(size_t)(y * W + x)] = v;
    }
  return dilated;
}

LabelMap binary_target(const LabelMap& labels) {
  require_hw(labels, "binary_target");
  LabelMap out(labels.shape);
  for (int64_t i = 0; i < labels.numel(); ++i) out.data[(size_t)i] = labels.data[(size_t)i] > 0;
  return out;
}

SupervisionTargets make_targets(const LabelMap& labels) {
  SupervisionTargets t;
  t.semantic = labels;
  t.binary = binary_target(labels);
  t.boundary = boundary_target(labels);
  return t;
}

template <typename S>
int awl_total(CtxT<S>& ctx, const std::array<int, 7>& losses, ParamT<S>& s_params,
              const LossOptions& opts) {
  auto& t = ctx.t();
  if (s_params.value.numel() != 7) throw ContractError("awl_total: expected 7 task weights");
  int s_node = t.param(s_params);
  int total = -1;
  for (int k = 0; k < 7; ++k) {
    if (!opts.mask[(size_t)k]) continue;
    if (losses[(size_t)k] < 0) throw ContractError("awl_total: missing loss component");
    int term;
    if (opts.fixed_weights) {
      term = t.scale(losses[(size_t)k], (S)((*opts.fixed_weights)[(size_t)k] * 0.5));
    } else {
      int sk = t.gather_scalar(s_node, k);
      int w = t.scale(t.exp_(t.scale(sk, S(-1))), (S)0.5);
      term = t.add(t.mul(w, losses[(size_t)k]), t.scale(sk, (S)0.5));
    }
    total = total < 0 ? term : t.add(total, term);
  }
  if (total < 0) throw ConfigError("awl_total: loss mask disables every head");
  return total;
}

template <typename S>
HeadsT<S> HeadsT<S>::make(ParamStoreT<S>& store, int width, std::mt19937& rng) {
  HeadsT h;
  h.boundary = Conv2dT<S>::make(store, "heads.boundary", width, 2, 1, 1, 0, 1, 1, true, rng);
  h.binary = Conv2dT<S>::make(store, "heads.binary", width, 2, 1, 1, 0, 1, 1, true, rng);
  return h;
}

template <typename S>
LossIds compute_losses(CtxT<S>& ctx, const DecoderOutputIds& outs, const HeadsT<S>& heads,
                       const SupervisionTargets& targets, ParamT<S>& s_params,
                       const LossOptions& opts) {
  auto& t = ctx.t();
  if (targets.semantic.shape.size() != 3)
    throw ContractError("compute_losses: semantic target must be BxHxW");
  int H = targets.semantic.shape[1], W = targets.semantic.shape[2];

  LossIds ids;
  for (int j = 0; j < 3; ++j) {
    int bin_logits = t.resize_bilinear(heads.binary.forward(ctx, outs.d_out[(size_t)j]), H, W);
    ids.components[(size_t)j] = t.cross_entropy_mean(bin_logits, targets.binary);
    int bou_logits = t.resize_bilinear(heads.boundary.forward(ctx, outs.s_out[(size_t)j]), H, W);
    ids.components[(size_t)(3 + j)] = t.cross_entropy_mean(bou_logits, targets.boundary);
  }
  ids.components[6] = t.cross_entropy_mean(outs.logits, targets.semantic);
  ids.total = awl_total(ctx, ids.components, s_params, opts);
  return ids;
}

void ConfusionCounts::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.shape != gt.shape) throw ContractError("metrics: pred/gt shape mismatch");
  for (int64_t i = 0; i < pred.numel(); ++i) {
    int32_t p = pred.data[(size_t)i], g = gt.data[(size_t)i];
    if (p < 0 || p >= n_classes || g < 0 || g >= n_classes)
      throw ContractError("metrics: class id out of range");
    if (p == g) {
      ++tp[(size_t)p];
    } else {
      ++fp[(size_t)p];
      ++fn[(size_t)g];
    }
  }
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.n_classes != n_classes) throw ContractError("metrics: class count mismatch");
  for (int c = 0; c < n_classes; ++c) {
    tp[(size_t)c] += other.tp[(size_t)c];
    fp[(size_t)c] += other.fp[(size_t)c];
    fn[(size_t)c] += other.fn[(size_t)c];
  }
}

MetricsReport metrics_from_counts(const ConfusionCounts& counts) {
  MetricsReport r;
  double acc_sum = 0.0, iou_sum = 0.0;
  int present = 0;
  for (int c = 0; c < counts.n_classes; ++c) {
    MetricsReport::ClassScore s;
    s.cls = c;
    int64_t tp = counts.tp[(size_t)c], fp = counts.fp[(size_t)c], fn = counts.fn[(size_t)c];
    s.present = (tp + fp + fn) > 0;
    if (s.present) {
      s.acc = (tp + fn) > 0 ? (double)tp / (double)(tp + fn) : 0.0;
      s.iou = (double)tp / (double)(tp + fp + fn);
      acc_sum += s.acc;
      iou_sum += s.iou;
      ++present;
    }
    r.per_class.push_back(s);
  }
  r.m_acc = present ? acc_sum / present : 0.0;
  r.m_iou = present ? iou_sum / present : 0.0;
  return r;
}

MetricsReport metrics(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  ConfusionCounts c(n_classes);
  c.add(pred, gt);
  return metrics_from_counts(c);
}

std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "class,acc,iou\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& s : report.per_class) {
    os << s.cls << ",";
    if (s.present)
      os << s.acc << "," << s.iou << "\n";
    else
      os << "absent,absent\n";
  }
  os << "mean," << report.m_acc << "," << report.m_iou << "\n";
  return os.str();
}

template int awl_total<float>(CtxT<float>&, const std::array<int, 7>&, ParamT<float>&,
                              const LossOptions&);
template int awl_total<double>(CtxT<double>&, const std::array<int, 7>&, ParamT<double>&,
                               const LossOptions&);
template struct HeadsT<float>;
template struct HeadsT<double>;
template LossIds compute_losses<float>(CtxT<float>&, const DecoderOutputIds&, const HeadsT<float>&,
                                       const SupervisionTargets&, ParamT<float>&,
                                       const LossOptions&);
template LossIds compute_losses<double>(CtxT<double>&, const DecoderOutputIds&,
                                        const HeadsT<double>&, const SupervisionTargets&,
                                        ParamT<double>&, const LossOptions&);

}  // namespace bimii
