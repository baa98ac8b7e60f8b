#pragma once

// Independent reference implementations used as test oracles. These are kept
// deliberately naive (direct definitions, straight loops) so they share no
// code path with the library.

#include <algorithm>
#include <cmath>
#include <vector>

#include "bimii/tensor.hpp"

namespace oracle {

template <typename S>
bimii::TensorT<S> conv2d(const bimii::TensorT<S>& x, const bimii::TensorT<S>& k,
                         const std::vector<S>* bias, int stride, int pad, int dil, int groups) {
  int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Cout = k.dim(0), K = k.dim(2);
  int Cg_in = Cin / groups, Cg_out = Cout / groups;
  int Ho = (H + 2 * pad - dil * (K - 1) - 1) / stride + 1;
  int Wo = (W + 2 * pad - dil * (K - 1) - 1) / stride + 1;
  bimii::TensorT<S> y({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = bias ? (double)(*bias)[(size_t)oc] : 0.0;
          int g = oc / Cg_out;
          for (int icl = 0; icl < Cg_in; ++icl)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                int iy = oy * stride - pad + ky * dil;
                int ix = ox * stride - pad + kx * dil;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += (double)x.at4(b, g * Cg_in + icl, iy, ix) * (double)k.at4(oc, icl, ky, kx);
              }
          y.at4(b, oc, oy, ox) = (S)acc;
        }
  return y;
}

template <typename S>
bimii::TensorT<S> resize_bilinear(const bimii::TensorT<S>& x, int th, int tw) {
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  bimii::TensorT<S> y({B, C, th, tw});
  auto sample = [&](int b, int c, double sy, double sx) {
    if (sy < 0) sy = 0;
    if (sx < 0) sx = 0;
    int y0 = std::min((int)sy, H - 1), x0 = std::min((int)sx, W - 1);
    int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
    double wy = sy - y0, wx = sx - x0;
    return (1 - wy) * ((1 - wx) * (double)x.at4(b, c, y0, x0) + wx * (double)x.at4(b, c, y0, x1)) +
           wy * ((1 - wx) * (double)x.at4(b, c, y1, x0) + wx * (double)x.at4(b, c, y1, x1));
  };
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < th; ++oy)
        for (int ox = 0; ox < tw; ++ox)
          y.at4(b, c, oy, ox) = (S)sample(b, c, (oy + 0.5) * H / (double)th - 0.5,
                                          (ox + 0.5) * W / (double)tw - 0.5);
  return y;
}

// Scalar (single neuron, zero-kernel) CCNN recursion.
struct CcnnScalarTrace {
  std::vector<double> f, l, u, e, y;
};

inline CcnnScalarTrace ccnn_scalar(double input, double alpha_f, double alpha_l, double alpha_e,
                                   double v_e, double beta, int steps) {
  CcnnScalarTrace tr;
  double f = 0, l = 0, e = 0, y = 0;
  for (int n = 0; n < steps; ++n) {
    f = std::exp(-alpha_f) * f + input;  // zero kernels: no feedback terms
    l = std::exp(-alpha_l) * l;
    double u = f * (1.0 + beta * l);
    e = std::exp(-alpha_e) * e + v_e * y;
    y = 1.0 / (1.0 + std::exp(-(u - e)));
    tr.f.push_back(f);
    tr.l.push_back(l);
    tr.u.push_back(u);
    tr.e.push_back(e);
    tr.y.push_back(y);
  }
  return tr;
}

// Brute-force confusion counting: per class, scan every pixel three times.
struct CountRow {
  long long tp = 0, fp = 0, fn = 0;
};

inline std::vector<CountRow> count_confusion(const bimii::LabelMap& pred,
                                             const bimii::LabelMap& gt, int n_classes) {
  std::vector<CountRow> rows((size_t)n_classes);
  for (int c = 0; c < n_classes; ++c) {
    for (int64_t i = 0; i < pred.numel(); ++i) {
      bool p = pred.data[(size_t)i] == c;
      bool g = gt.data[(size_t)i] == c;
      if (p && g) ++rows[(size_t)c].tp;
      if (p && !g) ++rows[(size_t)c].fp;
      if (!p && g) ++rows[(size_t)c].fn;
    }
  }
  return rows;
}

struct MeanScores {
  double m_acc = 0, m_iou = 0;
};

inline MeanScores mean_scores(const std::vector<CountRow>& rows) {
  MeanScores s;
  int present = 0;
  for (const auto& r : rows) {
    if (r.tp + r.fp + r.fn == 0) continue;
    ++present;
    s.m_acc += (r.tp + r.fn) > 0 ? (double)r.tp / (double)(r.tp + r.fn) : 0.0;
    s.m_iou += (double)r.tp / (double)(r.tp + r.fp + r.fn);
  }
  if (present) {
    s.m_acc /= present;
    s.m_iou /= present;
  }
  return s;
}

}  // namespace oracle
