#include "bimii/tape.hpp"

#include <algorithm>
#include <cmath>

#include "bimii/parallel.hpp"

namespace bimii {

namespace {

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  S e = std::exp(x);
  return e / (S(1) + e);
}

struct ConvDims {
  int B, Cin, H, W, Cout, K, Ho, Wo, Cg_in, Cg_out;
};

template <typename S>
ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& k, int stride, int pad, int dilation,
                   int groups) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be BCHW, got " + shape_str(x.shape));
  if (k.rank() != 4) throw ShapeError("conv2d: kernel must be OIKK, got " + shape_str(k.shape));
  if (k.dim(2) != k.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(k.shape));
  if (k.dim(2) % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + std::to_string(k.dim(2)));
  if (stride < 1 || pad < 0 || dilation < 1)
    throw ContractError("conv2d: stride/pad/dilation out of range");
  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = k.dim(0);
  d.K = k.dim(2);
  if (groups < 1 || d.Cin % groups != 0)
    throw ShapeError("conv2d: input channels (axis 1) = " + std::to_string(d.Cin) +
                     " not divisible by groups " + std::to_string(groups));
  if (d.Cout % groups != 0)
    throw ShapeError("conv2d: output channels (axis 0 of kernel) = " + std::to_string(d.Cout) +
                     " not divisible by groups " + std::to_string(groups));
  d.Cg_in = d.Cin / groups;
  d.Cg_out = d.Cout / groups;
  if (k.dim(1) != d.Cg_in)
    throw ShapeError("conv2d: kernel axis 1 = " + std::to_string(k.dim(1)) + ", expected " +
                     std::to_string(d.Cg_in) + " (= in_channels/groups)");
  d.Ho = (d.H + 2 * pad - dilation * (d.K - 1) - 1) / stride + 1;
  d.Wo = (d.W + 2 * pad - dilation * (d.K - 1) - 1) / stride + 1;
  if (d.Ho < 1 || d.Wo < 1)
    throw ShapeError("conv2d: output collapses to zero extent (axis 2/3) for input " +
                     shape_str(x.shape));
  return d;
}

// Valid output range [lo, hi) for which in = out*stride - pad + kk*dilation lands in [0, in_extent).
inline void tap_range(int out_extent, int in_extent, int stride, int pad, int kk, int dilation,
                      int& lo, int& hi) {
  int off = kk * dilation - pad;
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  int last = (in_extent - 1 - off) / stride;  // floor
  hi = std::min(out_extent, last + 1);
  if (hi < lo) hi = lo;
}

// Per-axis bilinear sampling table, align-corners=false convention.
struct LerpTable {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; (1-w1) on i0
};

inline LerpTable make_lerp(int in, int out) {
  LerpTable t;
  t.i0.resize((size_t)out);
  t.i1.resize((size_t)out);
  t.w1.resize((size_t)out);
  double scale = (double)in / (double)out;
  for (int o = 0; o < out; ++o) {
    double src = ((double)o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = (int)src;
    if (lo > in - 1) lo = in - 1;
    t.i0[(size_t)o] = lo;
    t.i1[(size_t)o] = std::min(lo + 1, in - 1);
    t.w1[(size_t)o] = src - (double)lo;
  }
  return t;
}

}  // namespace

template <typename S>
int TapeT<S>::push(TensorT<S> v, std::function<void(TapeT&)> back) {
  Node n;
  n.value = std::move(v);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return (int)nodes_.size() - 1;
}

template <typename S>
int TapeT<S>::mark(int id, std::initializer_list<int> parents) {
  bool needs = false;
  for (int p : parents)
    if (p >= 0 && nodes_[(size_t)p].needs) needs = true;
  nodes_[(size_t)id].needs = needs;
  return id;
}

template <typename S>
int TapeT<S>::mark_list(int id, const std::vector<int>& parents) {
  bool needs = false;
  for (int p : parents)
    if (p >= 0 && nodes_[(size_t)p].needs) needs = true;
  nodes_[(size_t)id].needs = needs;
  return id;
}

template <typename S>
TensorT<S>& TapeT<S>::gbuf(int id) {
  Node& n = nodes_[(size_t)id];
  if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape);
  return n.grad;
}

template <typename S>
int TapeT<S>::leaf(TensorT<S> v) {
  return push(std::move(v), nullptr);
}

template <typename S>
int TapeT<S>::param(ParamT<S>& p) {
  auto it = param_ids_.find(&p);
  if (it != param_ids_.end()) return it->second;
  int id = push(p.value, nullptr);
  nodes_[(size_t)id].from_param = &p;
  nodes_[(size_t)id].needs = true;
  param_ids_[&p] = id;
  return id;
}

template <typename S>
int TapeT<S>::add(int a, int b) {
  const auto& av = val(a);
  const auto& bv = val(b);
  require_same_shape(av, bv, "add");
  TensorT<S> y = av;
  for (int64_t i = 0; i < y.numel(); ++i) y.data[(size_t)i] += bv.data[(size_t)i];
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, b, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& ga = t.gbuf(a);
    auto& gb = t.gbuf(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga.data[(size_t)i] += g.data[(size_t)i];
      gb.data[(size_t)i] += g.data[(size_t)i];
    }
  };
  return mark(id, {a, b});
}

template <typename S>
int TapeT<S>::sub(int a, int b) {
  const auto& av = val(a);
  const auto& bv = val(b);
  require_same_shape(av, bv, "sub");
  TensorT<S> y = av;
  for (int64_t i = 0; i < y.numel(); ++i) y.data[(size_t)i] -= bv.data[(size_t)i];
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, b, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& ga = t.gbuf(a);
    auto& gb = t.gbuf(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga.data[(size_t)i] += g.data[(size_t)i];
      gb.data[(size_t)i] -= g.data[(size_t)i];
    }
  };
  return mark(id, {a, b});
}

template <typename S>
int TapeT<S>::mul(int a, int b) {
  const auto& av = val(a);
  const auto& bv = val(b);
  require_same_shape(av, bv, "mul");
  TensorT<S> y = av;
  for (int64_t i = 0; i < y.numel(); ++i) y.data[(size_t)i] *= bv.data[(size_t)i];
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, b, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    auto& ga = t.gbuf(a);
    auto& gb = t.gbuf(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      ga.data[(size_t)i] += g.data[(size_t)i] * bv2.data[(size_t)i];
      gb.data[(size_t)i] += g.data[(size_t)i] * av2.data[(size_t)i];
    }
  };
  return mark(id, {a, b});
}

namespace {
// Left-pads shapes to rank 4 and returns per-dim strides of b when broadcast
// against a (0 where b's extent is 1).
struct BcastPlan {
  int a0, a1, a2, a3;
  int64_t s0, s1, s2, s3;
};

inline BcastPlan bcast_plan(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw ShapeError("broadcast: rank mismatch");
  if (a.size() > 4) throw ShapeError("broadcast: rank > 4 unsupported");
  int ae[4] = {1, 1, 1, 1}, be[4] = {1, 1, 1, 1};
  int off = 4 - (int)a.size();
  for (size_t i = 0; i < a.size(); ++i) {
    ae[off + (int)i] = a[i];
    be[off + (int)i] = b[i];
  }
  for (int i = 0; i < 4; ++i)
    if (be[i] != 1 && be[i] != ae[i])
      throw ShapeError("broadcast: axis " + std::to_string(i - off) + " extent " +
                       std::to_string(be[i]) + " incompatible with " + std::to_string(ae[i]));
  BcastPlan p;
  p.a0 = ae[0];
  p.a1 = ae[1];
  p.a2 = ae[2];
  p.a3 = ae[3];
  int64_t st[4];
  int64_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = acc;
    acc *= be[i];
  }
  p.s0 = be[0] == 1 ? 0 : st[0];
  p.s1 = be[1] == 1 ? 0 : st[1];
  p.s2 = be[2] == 1 ? 0 : st[2];
  p.s3 = be[3] == 1 ? 0 : st[3];
  return p;
}

}  // namespace

template <typename S>
int TapeT<S>::mul_bcast(int a, int b) {
  const auto& av = val(a);
  const auto& bv = val(b);
  BcastPlan p = bcast_plan(av.shape, bv.shape);
  TensorT<S> y = av;
  {
    int64_t i = 0;
    for (int d0 = 0; d0 < p.a0; ++d0)
      for (int d1 = 0; d1 < p.a1; ++d1)
        for (int d2 = 0; d2 < p.a2; ++d2) {
          int64_t base = d0 * p.s0 + d1 * p.s1 + d2 * p.s2;
          for (int d3 = 0; d3 < p.a3; ++d3, ++i)
            y.data[(size_t)i] *= bv.data[(size_t)(base + d3 * p.s3)];
        }
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, b, id, p](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& av2 = t.val(a);
    const auto& bv2 = t.val(b);
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    TensorT<S>* ga = na ? &t.gbuf(a) : nullptr;
    TensorT<S>* gb = nb ? &t.gbuf(b) : nullptr;
    int64_t i = 0;
    for (int d0 = 0; d0 < p.a0; ++d0)
      for (int d1 = 0; d1 < p.a1; ++d1)
        for (int d2 = 0; d2 < p.a2; ++d2) {
          int64_t base = d0 * p.s0 + d1 * p.s1 + d2 * p.s2;
          for (int d3 = 0; d3 < p.a3; ++d3, ++i) {
            int64_t j = base + d3 * p.s3;
            if (na) ga->data[(size_t)i] += g.data[(size_t)i] * bv2.data[(size_t)j];
            if (nb) gb->data[(size_t)j] += g.data[(size_t)i] * av2.data[(size_t)i];
          }
        }
  };
  return mark(id, {a, b});
}

template <typename S>
int TapeT<S>::add_bcast(int a, int b) {
  const auto& av = val(a);
  const auto& bv = val(b);
  BcastPlan p = bcast_plan(av.shape, bv.shape);
  TensorT<S> y = av;
  {
    int64_t i = 0;
    for (int d0 = 0; d0 < p.a0; ++d0)
      for (int d1 = 0; d1 < p.a1; ++d1)
        for (int d2 = 0; d2 < p.a2; ++d2) {
          int64_t base = d0 * p.s0 + d1 * p.s1 + d2 * p.s2;
          for (int d3 = 0; d3 < p.a3; ++d3, ++i)
            y.data[(size_t)i] += bv.data[(size_t)(base + d3 * p.s3)];
        }
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, b, id, p](TapeT& t) {
    const auto& g = t.grad(id);
    bool na = t.needs_grad(a), nb = t.needs_grad(b);
    TensorT<S>* ga = na ? &t.gbuf(a) : nullptr;
    TensorT<S>* gb = nb ? &t.gbuf(b) : nullptr;
    int64_t i = 0;
    for (int d0 = 0; d0 < p.a0; ++d0)
      for (int d1 = 0; d1 < p.a1; ++d1)
        for (int d2 = 0; d2 < p.a2; ++d2) {
          int64_t base = d0 * p.s0 + d1 * p.s1 + d2 * p.s2;
          for (int d3 = 0; d3 < p.a3; ++d3, ++i) {
            int64_t j = base + d3 * p.s3;
            if (na) ga->data[(size_t)i] += g.data[(size_t)i];
            if (nb) gb->data[(size_t)j] += g.data[(size_t)i];
          }
        }
  };
  return mark(id, {a, b});
}

template <typename S>
int TapeT<S>::scale(int a, S c) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v *= c;
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, c, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[(size_t)i] += g.data[(size_t)i] * c;
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::add_const(int a, S c) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v += c;
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[(size_t)i] += g.data[(size_t)i];
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::sigmoid(int a) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v = sigmoid_scalar(v);
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& yv = t.val(id);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i) {
      S s = yv.data[(size_t)i];
      ga.data[(size_t)i] += g.data[(size_t)i] * s * (S(1) - s);
    }
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::leaky_relu(int a, S slope) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v = v > S(0) ? v : slope * v;
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, slope, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv = t.val(a);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[(size_t)i] += g.data[(size_t)i] * (xv.data[(size_t)i] > S(0) ? S(1) : slope);
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::exp_(int a) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v = std::exp(v);
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& yv = t.val(id);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[(size_t)i] += g.data[(size_t)i] * yv.data[(size_t)i];
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::clamp(int a, S lo, S hi) {
  TensorT<S> y = val(a);
  for (S& v : y.data) v = std::min(hi, std::max(lo, v));
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [a, lo, hi, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv = t.val(a);
    auto& ga = t.gbuf(a);
    for (int64_t i = 0; i < g.numel(); ++i) {
      S x = xv.data[(size_t)i];
      if (x >= lo && x <= hi) ga.data[(size_t)i] += g.data[(size_t)i];
    }
  };
  return mark(id, {a});
}

template <typename S>
int TapeT<S>::conv2d(int x, int k, int bias, int stride, int pad, int dilation, int groups) {
  const auto& xv = val(x);
  const auto& kv = val(k);
  ConvDims d = conv_dims(xv, kv, stride, pad, dilation, groups);
  const TensorT<S>* bv = nullptr;
  if (bias >= 0) {
    bv = &val(bias);
    if (bv->rank() != 1 || bv->dim(0) != d.Cout)
      throw ShapeError("conv2d: bias must have out_channels extent (axis 0), got " +
                       shape_str(bv->shape));
  }

  TensorT<S> y({d.B, d.Cout, d.Ho, d.Wo});
  const S* xd = xv.data.data();
  const S* kd = kv.data.data();
  S* yd = y.data.data();

  parallel_for((int64_t)d.B * d.Cout, [&](int64_t lo, int64_t hi) {
    for (int64_t bo = lo; bo < hi; ++bo) {
      int b = (int)(bo / d.Cout), oc = (int)(bo % d.Cout);
      int g = oc / d.Cg_out;
      S* yp = yd + ((int64_t)(b * d.Cout + oc)) * d.Ho * d.Wo;
      S b0 = bv ? bv->data[(size_t)oc] : S(0);
      for (int64_t i = 0; i < (int64_t)d.Ho * d.Wo; ++i) yp[i] = b0;
      for (int icl = 0; icl < d.Cg_in; ++icl) {
        int ic = g * d.Cg_in + icl;
        const S* xp = xd + ((int64_t)(b * d.Cin + ic)) * d.H * d.W;
        const S* kp = kd + ((int64_t)(oc * d.Cg_in + icl)) * d.K * d.K;
        for (int ky = 0; ky < d.K; ++ky) {
          int oy_lo, oy_hi;
          tap_range(d.Ho, d.H, stride, pad, ky, dilation, oy_lo, oy_hi);
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            int iy = oy * stride - pad + ky * dilation;
            const S* xrow = xp + (int64_t)iy * d.W;
            S* yrow = yp + (int64_t)oy * d.Wo;
            for (int kx = 0; kx < d.K; ++kx) {
              S w = kp[ky * d.K + kx];
              if (w == S(0)) continue;
              int ox_lo, ox_hi;
              tap_range(d.Wo, d.W, stride, pad, kx, dilation, ox_lo, ox_hi);
              int base = -pad + kx * dilation;
              if (stride == 1) {
                const S* xr = xrow + base;
                for (int ox = ox_lo; ox < ox_hi; ++ox) yrow[ox] += w * xr[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) yrow[ox] += w * xrow[ox * stride + base];
              }
            }
          }
        }
      }
    }
  });

  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, k, bias, stride, pad, dilation, d, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv2 = t.val(x);
    const auto& kv2 = t.val(k);
    const S* gd = g.data.data();
    const S* xd2 = xv2.data.data();
    const S* kd2 = kv2.data.data();

    if (bias >= 0 && t.needs_grad(bias)) {
      auto& gb = t.gbuf(bias);
      for (int oc = 0; oc < d.Cout; ++oc) {
        S acc = 0;
        for (int b = 0; b < d.B; ++b) {
          const S* gp = gd + ((int64_t)(b * d.Cout + oc)) * d.Ho * d.Wo;
          for (int64_t i = 0; i < (int64_t)d.Ho * d.Wo; ++i) acc += gp[i];
        }
        gb.data[(size_t)oc] += acc;
      }
    }

    if (t.needs_grad(k)) {
      auto& gk = t.gbuf(k);
      S* gkd = gk.data.data();
      parallel_for(d.Cout, [&](int64_t lo, int64_t hi) {
        for (int64_t oc64 = lo; oc64 < hi; ++oc64) {
          int oc = (int)oc64;
          int grp = oc / d.Cg_out;
          for (int icl = 0; icl < d.Cg_in; ++icl) {
            int ic = grp * d.Cg_in + icl;
            S* gkp = gkd + ((int64_t)(oc * d.Cg_in + icl)) * d.K * d.K;
            for (int ky = 0; ky < d.K; ++ky) {
              int oy_lo, oy_hi;
              tap_range(d.Ho, d.H, stride, pad, ky, dilation, oy_lo, oy_hi);
              for (int kx = 0; kx < d.K; ++kx) {
                int ox_lo, ox_hi;
                tap_range(d.Wo, d.W, stride, pad, kx, dilation, ox_lo, ox_hi);
                int base = -pad + kx * dilation;
                S acc = 0;
                for (int b = 0; b < d.B; ++b) {
                  const S* gp = gd + ((int64_t)(b * d.Cout + oc)) * d.Ho * d.Wo;
                  const S* xp = xd2 + ((int64_t)(b * d.Cin + ic)) * d.H * d.W;
                  for (int oy = oy_lo; oy < oy_hi; ++oy) {
                    int iy = oy * stride - pad + ky * dilation;
                    const S* grow = gp + (int64_t)oy * d.Wo;
                    const S* xrow = xp + (int64_t)iy * d.W;
                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc += grow[ox] * xrow[ox * stride + base];
                  }
                }
                gkp[ky * d.K + kx] += acc;
              }
            }
          }
        }
      });
    }

    if (t.needs_grad(x)) {
      auto& gx = t.gbuf(x);
      S* gxd = gx.data.data();
      if (stride == 1) {
        // Gather form: each (b, ic) owns a disjoint slice of gx.
        parallel_for((int64_t)d.B * d.Cin, [&](int64_t lo, int64_t hi) {
          for (int64_t bi = lo; bi < hi; ++bi) {
            int b = (int)(bi / d.Cin), ic = (int)(bi % d.Cin);
            int grp = ic / d.Cg_in, icl = ic % d.Cg_in;
            S* gxp = gxd + ((int64_t)(b * d.Cin + ic)) * d.H * d.W;
            for (int oc = grp * d.Cg_out; oc < (grp + 1) * d.Cg_out; ++oc) {
              const S* gp = gd + ((int64_t)(b * d.Cout + oc)) * d.Ho * d.Wo;
              const S* kp = kd2 + ((int64_t)(oc * d.Cg_in + icl)) * d.K * d.K;
              for (int ky = 0; ky < d.K; ++ky) {
                for (int iy = 0; iy < d.H; ++iy) {
                  int oy = iy + pad - ky * dilation;
                  if (oy < 0 || oy >= d.Ho) continue;
                  const S* grow = gp + (int64_t)oy * d.Wo;
                  S* gxrow = gxp + (int64_t)iy * d.W;
                  for (int kx = 0; kx < d.K; ++kx) {
                    S w = kp[ky * d.K + kx];
                    if (w == S(0)) continue;
                    int off = pad - kx * dilation;
                    int ix_lo = std::max(0, -off);
                    int ix_hi = std::min(d.W, d.Wo - off);
                    const S* gr = grow + off;
                    for (int ix = ix_lo; ix < ix_hi; ++ix) gxrow[ix] += w * gr[ix];
                  }
                }
              }
            }
          }
        });
      } else {
        // Strided convs are rare (stage downsamplers); scatter serially.
        for (int b = 0; b < d.B; ++b)
          for (int oc = 0; oc < d.Cout; ++oc) {
            int grp = oc / d.Cg_out;
            const S* gp = gd + ((int64_t)(b * d.Cout + oc)) * d.Ho * d.Wo;
            for (int icl = 0; icl < d.Cg_in; ++icl) {
              int ic = grp * d.Cg_in + icl;
              S* gxp = gxd + ((int64_t)(b * d.Cin + ic)) * d.H * d.W;
              const S* kp = kd2 + ((int64_t)(oc * d.Cg_in + icl)) * d.K * d.K;
              for (int ky = 0; ky < d.K; ++ky) {
                int oy_lo, oy_hi;
                tap_range(d.Ho, d.H, stride, pad, ky, dilation, oy_lo, oy_hi);
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  int iy = oy * stride - pad + ky * dilation;
                  const S* grow = gp + (int64_t)oy * d.Wo;
                  S* gxrow = gxp + (int64_t)iy * d.W;
                  for (int kx = 0; kx < d.K; ++kx) {
                    S w = kp[ky * d.K + kx];
                    int ox_lo, ox_hi;
                    tap_range(d.Wo, d.W, stride, pad, kx, dilation, ox_lo, ox_hi);
                    int base = -pad + kx * dilation;
                    for (int ox = ox_lo; ox < ox_hi; ++ox)
                      gxrow[ox * stride + base] += w * grow[ox];
                  }
                }
              }
            }
          }
      }
    }
  };
  return mark(id, {x, k, bias});
}

template <typename S>
int TapeT<S>::linear(int x, int w, int b) {
  const auto& xv = val(x);
  const auto& wv = val(w);
  if (wv.rank() != 2) throw ShapeError("linear: weight must be 2-d, got " + shape_str(wv.shape));
  int Din = xv.shape.back();
  int Dout = wv.dim(0);
  if (wv.dim(1) != Din)
    throw ShapeError("linear: last input extent " + std::to_string(Din) +
                     " != weight axis 1 extent " + std::to_string(wv.dim(1)));
  const TensorT<S>* bv = nullptr;
  if (b >= 0) {
    bv = &val(b);
    if (bv->rank() != 1 || bv->dim(0) != Dout)
      throw ShapeError("linear: bias extent mismatch (axis 0)");
  }
  int64_t M = xv.numel() / Din;
  Shape ys = xv.shape;
  ys.back() = Dout;
  TensorT<S> y(ys);
  for (int64_t m = 0; m < M; ++m) {
    const S* xr = xv.data.data() + m * Din;
    S* yr = y.data.data() + m * Dout;
    for (int o = 0; o < Dout; ++o) {
      S acc = bv ? bv->data[(size_t)o] : S(0);
      const S* wr = wv.data.data() + (int64_t)o * Din;
      for (int i = 0; i < Din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, w, b, Din, Dout, M, id](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv2 = t.val(x);
    const auto& wv2 = t.val(w);
    if (b >= 0 && t.needs_grad(b)) {
      auto& gb = t.gbuf(b);
      for (int64_t m = 0; m < M; ++m)
        for (int o = 0; o < Dout; ++o) gb.data[(size_t)o] += g.data[(size_t)(m * Dout + o)];
    }
    if (t.needs_grad(w)) {
      auto& gw = t.gbuf(w);
      for (int64_t m = 0; m < M; ++m) {
        const S* xr = xv2.data.data() + m * Din;
        const S* gr = g.data.data() + m * Dout;
        for (int o = 0; o < Dout; ++o) {
          S gv = gr[o];
          S* gwr = gw.data.data() + (int64_t)o * Din;
          for (int i = 0; i < Din; ++i) gwr[i] += gv * xr[i];
        }
      }
    }
    if (t.needs_grad(x)) {
      auto& gx = t.gbuf(x);
      for (int64_t m = 0; m < M; ++m) {
        S* gxr = gx.data.data() + m * Din;
        const S* gr = g.data.data() + m * Dout;
        for (int o = 0; o < Dout; ++o) {
          S gv = gr[o];
          const S* wr = wv2.data.data() + (int64_t)o * Din;
          for (int i = 0; i < Din; ++i) gxr[i] += gv * wr[i];
        }
      }
    }
  };
  return mark(id, {x, w, b});
}

template <typename S>
int TapeT<S>::global_pool(int x, PoolMode mode) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("global_pool: input must be BCHW");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t plane = (int64_t)H * W;
  TensorT<S> y({B, C, 1, 1});
  std::vector<int64_t> argmax;
  if (mode == PoolMode::Max) argmax.resize((size_t)B * C);
  for (int bc = 0; bc < B * C; ++bc) {
    const S* xp = xv.data.data() + bc * plane;
    if (mode == PoolMode::Average) {
      S acc = 0;
      for (int64_t i = 0; i < plane; ++i) acc += xp[i];
      y.data[(size_t)bc] = acc / (S)plane;
    } else {
      int64_t best = 0;
      for (int64_t i = 1; i < plane; ++i)
        if (xp[i] > xp[best]) best = i;  // first max wins ties
      argmax[(size_t)bc] = best;
      y.data[(size_t)bc] = xp[best];
    }
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, mode, plane, id, argmax = std::move(argmax)](TapeT& t) {
    const auto& g = t.grad(id);
    auto& gx = t.gbuf(x);
    int64_t planes = g.numel();
    for (int64_t bc = 0; bc < planes; ++bc) {
      S* gp = gx.data.data() + bc * plane;
      if (mode == PoolMode::Average) {
        S gv = g.data[(size_t)bc] / (S)plane;
        for (int64_t i = 0; i < plane; ++i) gp[i] += gv;
      } else {
        gp[argmax[(size_t)bc]] += g.data[(size_t)bc];
      }
    }
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::resize_bilinear(int x, int th, int tw) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("resize_bilinear: input must be BCHW");
  if (th < 1 || tw < 1) throw ContractError("resize_bilinear: target extents must be >= 1");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (th == H && tw == W) {  // identity, but keep the node so gradients flow
    TensorT<S> y = xv;
    int id = push(std::move(y), nullptr);
    nodes_[(size_t)id].back = [x, id](TapeT& t) {
      const auto& g = t.grad(id);
      auto& gx = t.gbuf(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[(size_t)i] += g.data[(size_t)i];
    };
    return mark(id, {x});
  }
  LerpTable ty = make_lerp(H, th), tx = make_lerp(W, tw);
  TensorT<S> y({B, C, th, tw});
  parallel_for((int64_t)B * C, [&](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const S* xp = xv.data.data() + bc * H * W;
      S* yp = y.data.data() + bc * (int64_t)th * tw;
      for (int oy = 0; oy < th; ++oy) {
        const S* r0 = xp + (int64_t)ty.i0[(size_t)oy] * W;
        const S* r1 = xp + (int64_t)ty.i1[(size_t)oy] * W;
        double wy = ty.w1[(size_t)oy];
        for (int ox = 0; ox < tw; ++ox) {
          double wx = tx.w1[(size_t)ox];
          int x0 = tx.i0[(size_t)ox], x1 = tx.i1[(size_t)ox];
          double v = (1.0 - wy) * ((1.0 - wx) * (double)r0[x0] + wx * (double)r0[x1]) +
                     wy * ((1.0 - wx) * (double)r1[x0] + wx * (double)r1[x1]);
          yp[(int64_t)oy * tw + ox] = (S)v;
        }
      }
    }
  });
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, th, tw, H, W, ty, tx, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& gx = t.gbuf(x);
    int64_t planes = g.dim(0) * (int64_t)g.dim(1);
    parallel_for(planes, [&](int64_t lo, int64_t hi) {
      for (int64_t bc = lo; bc < hi; ++bc) {
        const S* gp = g.data.data() + bc * (int64_t)th * tw;
        S* gxp = gx.data.data() + bc * (int64_t)H * W;
        for (int oy = 0; oy < th; ++oy) {
          double wy = ty.w1[(size_t)oy];
          int y0 = ty.i0[(size_t)oy], y1 = ty.i1[(size_t)oy];
          for (int ox = 0; ox < tw; ++ox) {
            double wx = tx.w1[(size_t)ox];
            int x0 = tx.i0[(size_t)ox], x1 = tx.i1[(size_t)ox];
            S gv = gp[(int64_t)oy * tw + ox];
            gxp[(int64_t)y0 * W + x0] += (S)((1.0 - wy) * (1.0 - wx)) * gv;
            gxp[(int64_t)y0 * W + x1] += (S)((1.0 - wy) * wx) * gv;
            gxp[(int64_t)y1 * W + x0] += (S)(wy * (1.0 - wx)) * gv;
            gxp[(int64_t)y1 * W + x1] += (S)(wy * wx) * gv;
          }
        }
      }
    });
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::concat_ch(const std::vector<int>& xs) {
  if (xs.empty()) throw ContractError("concat_ch: no inputs");
  const auto& first = val(xs[0]);
  if (first.rank() != 4) throw ShapeError("concat_ch: inputs must be BCHW");
  int B = first.dim(0), H = first.dim(2), W = first.dim(3);
  int Ctot = 0;
  for (int id : xs) {
    const auto& v = val(id);
    if (v.rank() != 4 || v.dim(0) != B || v.dim(2) != H || v.dim(3) != W)
      throw ShapeError("concat_ch: mismatch on non-channel axes, " + shape_str(v.shape) + " vs " +
                       shape_str(first.shape));
    Ctot += v.dim(1);
  }
  TensorT<S> y({B, Ctot, H, W});
  int64_t plane = (int64_t)H * W;
  for (int b = 0; b < B; ++b) {
    int coff = 0;
    for (int id : xs) {
      const auto& v = val(id);
      int c = v.dim(1);
      std::copy(v.data.begin() + (int64_t)b * c * plane, v.data.begin() + (int64_t)(b + 1) * c * plane,
                y.data.begin() + ((int64_t)b * Ctot + coff) * plane);
      coff += c;
    }
  }
  std::vector<int> channels;
  for (int id : xs) channels.push_back(val(id).dim(1));
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [xs, channels, B, Ctot, plane, id](TapeT& t) {
    const auto& g = t.grad(id);
    for (int b = 0; b < B; ++b) {
      int coff = 0;
      for (size_t i = 0; i < xs.size(); ++i) {
        int c = channels[i];
        if (t.needs_grad(xs[i])) {
          auto& gx = t.gbuf(xs[i]);
          const S* gp = g.data.data() + ((int64_t)b * Ctot + coff) * plane;
          S* gxp = gx.data.data() + (int64_t)b * c * plane;
          for (int64_t j = 0; j < (int64_t)c * plane; ++j) gxp[j] += gp[j];
        }
        coff += c;
      }
    }
  };
  return mark_list(id, xs);
}

template <typename S>
int TapeT<S>::slice_ch(int x, int c0, int c1) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("slice_ch: input must be BCHW");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw ShapeError("slice_ch: bad channel range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + std::to_string(C) + " channels");
  int Cs = c1 - c0;
  int64_t plane = (int64_t)H * W;
  TensorT<S> y({B, Cs, H, W});
  for (int b = 0; b < B; ++b)
    std::copy(xv.data.begin() + ((int64_t)b * C + c0) * plane,
              xv.data.begin() + ((int64_t)b * C + c1) * plane,
              y.data.begin() + (int64_t)b * Cs * plane);
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, c0, B, C, Cs, plane, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& gx = t.gbuf(x);
    for (int b = 0; b < B; ++b) {
      const S* gp = g.data.data() + (int64_t)b * Cs * plane;
      S* gxp = gx.data.data() + ((int64_t)b * C + c0) * plane;
      for (int64_t i = 0; i < (int64_t)Cs * plane; ++i) gxp[i] += gp[i];
    }
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::transpose_hw(int x) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("transpose_hw: input must be BCHW");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  TensorT<S> y({B, C, W, H});
  for (int bc = 0; bc < B * C; ++bc) {
    const S* xp = xv.data.data() + (int64_t)bc * H * W;
    S* yp = y.data.data() + (int64_t)bc * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) yp[(int64_t)w * H + h] = xp[(int64_t)h * W + w];
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, B, C, H, W, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& gx = t.gbuf(x);
    for (int bc = 0; bc < B * C; ++bc) {
      const S* gp = g.data.data() + (int64_t)bc * H * W;
      S* gxp = gx.data.data() + (int64_t)bc * H * W;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) gxp[(int64_t)h * W + w] += gp[(int64_t)w * H + h];
    }
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::reshape(int x, Shape sh) {
  const auto& xv = val(x);
  if (shape_numel(sh) != xv.numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(xv.shape) + " -> " + shape_str(sh));
  TensorT<S> y(sh, xv.data);
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, id](TapeT& t) {
    const auto& g = t.grad(id);
    auto& gx = t.gbuf(x);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[(size_t)i] += g.data[(size_t)i];
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::layer_norm_last(int x, int gamma, int beta, S eps) {
  const auto& xv = val(x);
  const auto& gv = val(gamma);
  const auto& bv = val(beta);
  int D = xv.shape.back();
  if (gv.numel() != D || bv.numel() != D)
    throw ShapeError("layer_norm_last: affine extent != last axis extent");
  int64_t M = xv.numel() / D;
  TensorT<S> y(xv.shape);
  TensorT<S> mean({(int)M}), istd({(int)M});
  for (int64_t m = 0; m < M; ++m) {
    const S* xr = xv.data.data() + m * D;
    S mu = 0;
    for (int i = 0; i < D; ++i) mu += xr[i];
    mu /= (S)D;
    S var = 0;
    for (int i = 0; i < D; ++i) {
      S dv = xr[i] - mu;
      var += dv * dv;
    }
    var /= (S)D;
    S is = S(1) / std::sqrt(var + eps);
    mean.data[(size_t)m] = mu;
    istd.data[(size_t)m] = is;
    S* yr = y.data.data() + m * D;
    for (int i = 0; i < D; ++i)
      yr[i] = (xr[i] - mu) * is * gv.data[(size_t)i] + bv.data[(size_t)i];
  }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, gamma, beta, D, M, id, mean = std::move(mean),
                             istd = std::move(istd)](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv2 = t.val(x);
    const auto& gm = t.val(gamma);
    bool nx = t.needs_grad(x), ng = t.needs_grad(gamma), nb = t.needs_grad(beta);
    TensorT<S>* gx = nx ? &t.gbuf(x) : nullptr;
    TensorT<S>* gg = ng ? &t.gbuf(gamma) : nullptr;
    TensorT<S>* gb = nb ? &t.gbuf(beta) : nullptr;
    for (int64_t m = 0; m < M; ++m) {
      const S* xr = xv2.data.data() + m * D;
      const S* gr = g.data.data() + m * D;
      S mu = mean.data[(size_t)m], is = istd.data[(size_t)m];
      if (ng || nb) {
        for (int i = 0; i < D; ++i) {
          S xh = (xr[i] - mu) * is;
          if (ng) gg->data[(size_t)i] += gr[i] * xh;
          if (nb) gb->data[(size_t)i] += gr[i];
        }
      }
      if (nx) {
        S sum_dxh = 0, sum_dxh_xh = 0;
        for (int i = 0; i < D; ++i) {
          S dxh = gr[i] * gm.data[(size_t)i];
          S xh = (xr[i] - mu) * is;
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        S* gxr = gx->data.data() + m * D;
        for (int i = 0; i < D; ++i) {
          S dxh = gr[i] * gm.data[(size_t)i];
          S xh = (xr[i] - mu) * is;
          gxr[i] += is * (dxh - sum_dxh / (S)D - xh * sum_dxh_xh / (S)D);
        }
      }
    }
  };
  return mark(id, {x, gamma, beta});
}

template <typename S>
int TapeT<S>::bn_train(int x, int gamma, int beta, S eps, BatchStats<S>* stats_out) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("bn_train: input must be BCHW");
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const auto& gv = val(gamma);
  const auto& bv = val(beta);
  if (gv.numel() != C || bv.numel() != C) throw ShapeError("bn_train: affine extent != channels");
  int64_t n = (int64_t)B * H * W;
  int64_t plane = (int64_t)H * W;
  TensorT<S> mean({C}), var({C});
  for (int c = 0; c < C; ++c) {
    S mu = 0;
    for (int b = 0; b < B; ++b) {
      const S* xp = xv.data.data() + ((int64_t)(b * C + c)) * plane;
      for (int64_t i = 0; i < plane; ++i) mu += xp[i];
    }
    mu /= (S)n;
    S v = 0;
    for (int b = 0; b < B; ++b) {
      const S* xp = xv.data.data() + ((int64_t)(b * C + c)) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        S dv = xp[i] - mu;
        v += dv * dv;
      }
    }
    v /= (S)n;
    mean.data[(size_t)c] = mu;
    var.data[(size_t)c] = v;
  }
  if (stats_out) {
    stats_out->mean = mean;
    stats_out->var = var;
  }
  TensorT<S> y(xv.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      S is = S(1) / std::sqrt(var.data[(size_t)c] + eps);
      S ga = gv.data[(size_t)c], be = bv.data[(size_t)c], mu = mean.data[(size_t)c];
      const S* xp = xv.data.data() + ((int64_t)(b * C + c)) * plane;
      S* yp = y.data.data() + ((int64_t)(b * C + c)) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = (xp[i] - mu) * is * ga + be;
    }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, gamma, beta, B, C, plane, n, eps, id, mean = std::move(mean),
                             var = std::move(var)](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv2 = t.val(x);
    const auto& gm = t.val(gamma);
    bool nx = t.needs_grad(x), ng = t.needs_grad(gamma), nb = t.needs_grad(beta);
    TensorT<S>* gx = nx ? &t.gbuf(x) : nullptr;
    TensorT<S>* gg = ng ? &t.gbuf(gamma) : nullptr;
    TensorT<S>* gb = nb ? &t.gbuf(beta) : nullptr;
    for (int c = 0; c < C; ++c) {
      S mu = mean.data[(size_t)c];
      S is = S(1) / std::sqrt(var.data[(size_t)c] + eps);
      S sum_g = 0, sum_g_xh = 0;
      for (int b = 0; b < B; ++b) {
        const S* gp = g.data.data() + ((int64_t)(b * C + c)) * plane;
        const S* xp = xv2.data.data() + ((int64_t)(b * C + c)) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          sum_g += gp[i];
          sum_g_xh += gp[i] * (xp[i] - mu) * is;
        }
      }
      if (ng) gg->data[(size_t)c] += sum_g_xh;
      if (nb) gb->data[(size_t)c] += sum_g;
      if (nx) {
        S ga = gm.data[(size_t)c];
        for (int b = 0; b < B; ++b) {
          const S* gp = g.data.data() + ((int64_t)(b * C + c)) * plane;
          const S* xp = xv2.data.data() + ((int64_t)(b * C + c)) * plane;
          S* gxp = gx->data.data() + ((int64_t)(b * C + c)) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            S xh = (xp[i] - mu) * is;
            gxp[i] += ga * is * (gp[i] - sum_g / (S)n - xh * sum_g_xh / (S)n);
          }
        }
      }
    }
  };
  return mark(id, {x, gamma, beta});
}

template <typename S>
int TapeT<S>::bn_eval(int x, int gamma, int beta, const TensorT<S>& mean, const TensorT<S>& var,
                      S eps) {
  const auto& xv = val(x);
  if (xv.rank() != 4) throw ShapeError("bn_eval: input must be BCHW");
  int B = xv.dim(0), C = xv.dim(1);
  int64_t plane = (int64_t)xv.dim(2) * xv.dim(3);
  const auto& gv = val(gamma);
  const auto& bv = val(beta);
  if (gv.numel() != C || bv.numel() != C || mean.numel() != C || var.numel() != C)
    throw ShapeError("bn_eval: per-channel extents disagree with channels");
  TensorT<S> y(xv.shape);
  TensorT<S> istd({C});
  for (int c = 0; c < C; ++c) istd.data[(size_t)c] = S(1) / std::sqrt(var.data[(size_t)c] + eps);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      S is = istd.data[(size_t)c], mu = mean.data[(size_t)c];
      S ga = gv.data[(size_t)c], be = bv.data[(size_t)c];
      const S* xp = xv.data.data() + ((int64_t)(b * C + c)) * plane;
      S* yp = y.data.data() + ((int64_t)(b * C + c)) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = (xp[i] - mu) * is * ga + be;
    }
  int id = push(std::move(y), nullptr);
  nodes_[(size_t)id].back = [x, gamma, beta, B, C, plane, id, mean, istd = std::move(istd)](TapeT& t) {
    const auto& g = t.grad(id);
    const auto& xv2 = t.val(x);
    const auto& gm = t.val(gamma);
    bool nx = t.needs_grad(x), ng = t.needs_grad(gamma), nb = t.needs_grad(beta);
    TensorT<S>* gx = nx ? &t.gbuf(x) : nullptr;
    TensorT<S>* gg = ng ? &t.gbuf(gamma) : nullptr;
    TensorT<S>* gb = nb ? &t.gbuf(beta) : nullptr;
    for (int c = 0; c < C; ++c) {
      S is = istd.data[(size_t)c], mu = mean.data[(size_t)c], ga = gm.data[(size_t)c];
      for (int b = 0; b < B; ++b) {
        const S* gp = g.data.data() + ((int64_t)(b * C + c)) * plane;
        const S* xp = xv2.data.data() + ((int64_t)(b * C + c)) * plane;
        S* gxp = nx ? gx->data.data() + ((int64_t)(b * C + c)) * plane : nullptr;
        for (int64_t i = 0; i < plane; ++i) {
          if (ng) gg->data[(size_t)c] += gp[i] * (xp[i] - mu) * is;
          if (nb) gb->data[(size_t)c] += gp[i];
          if (nx) gxp[i] += gp[i] * ga * is;
        }
      }
    }
  };
  return mark(id, {x, gamma, beta});
}

template <typename S>
int TapeT<S>::sum_all(int x) {
  const auto& xv = val(x);
  S acc = 0;
  for (S v : xv.data) acc += v;
  int id = push(TensorT<S>::scalar(acc), nullptr);
  nodes_[(size_t)id].back = [x, id](TapeT& t) {
    S gv = t.grad(id).data[0];
    auto& gx = t.gbuf(x);
    for (S& v : gx.data) v += gv;
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::mean_all(int x) {
  const auto& xv = val(x);
  S acc = 0;
  for (S v : xv.data) acc += v;
  S n = (S)xv.numel();
  int id = push(TensorT<S>::scalar(acc / n), nullptr);
  nodes_[(size_t)id].back = [x, n, id](TapeT& t) {
    S gv = t.grad(id).data[0] / n;
    auto& gx = t.gbuf(x);
    for (S& v : gx.data) v += gv;
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::gather_scalar(int x, int64_t flat_index) {
  const auto& xv = val(x);
  if (flat_index < 0 || flat_index >= xv.numel())
    throw ContractError("gather_scalar: index out of range");
  int id = push(TensorT<S>::scalar(xv.data[(size_t)flat_index]), nullptr);
  nodes_[(size_t)id].back = [x, flat_index, id](TapeT& t) {
    t.gbuf(x).data[(size_t)flat_index] += t.grad(id).data[0];
  };
  return mark(id, {x});
}

template <typename S>
int TapeT<S>::cross_entropy_mean(int logits, const LabelMap& target) {
  const auto& zv = val(logits);
  if (zv.rank() != 4) throw ShapeError("cross_entropy: logits must be BKHW");
  int B = zv.dim(0), K = zv.dim(1), H = zv.dim(2), W = zv.dim(3);
  if (K < 2) throw ContractError("cross_entropy: need at least 2 classes");
  if (target.shape != Shape{B, H, W})
    throw ShapeError("cross_entropy: target shape " + shape_str(target.shape) + " != " +
                     shape_str({B, H, W}));
  int64_t plane = (int64_t)H * W;
  int64_t npix = (int64_t)B * plane;
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const S* zp = zv.data.data() + (int64_t)b * K * plane;
    const int32_t* tp = target.data.data() + (int64_t)b * plane;
    for (int64_t i = 0; i < plane; ++i) {
      int32_t t = tp[i];
      if (t < 0 || t >= K)
        throw ContractError("cross_entropy: target id " + std::to_string(t) + " out of range [0," +
                            std::to_string(K) + ")");
      S m = zp[i];
      for (int k = 1; k < K; ++k) m = std::max(m, zp[(int64_t)k * plane + i]);
      double se = 0.0;
      for (int k = 0; k < K; ++k) se += std::exp((double)(zp[(int64_t)k * plane + i] - m));
      loss += (double)m + std::log(se) - (double)zp[(int64_t)t * plane + i];
    }
  }
  loss /= (double)npix;
  int id = push(TensorT<S>::scalar((S)loss), nullptr);
  nodes_[(size_t)id].back = [logits, target, B, K, plane, npix, id](TapeT& t) {
    S gv = t.grad(id).data[0];
    const auto& zv2 = t.val(logits);
    auto& gz = t.gbuf(logits);
    for (int b = 0; b < B; ++b) {
      const S* zp = zv2.data.data() + (int64_t)b * K * plane;
      S* gp = gz.data.data() + (int64_t)b * K * plane;
      const int32_t* tp = target.data.data() + (int64_t)b * plane;
      for (int64_t i = 0; i < plane; ++i) {
        S m = zp[i];
        for (int k = 1; k < K; ++k) m = std::max(m, zp[(int64_t)k * plane + i]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp((double)(zp[(int64_t)k * plane + i] - m));
        for (int k = 0; k < K; ++k) {
          double p = std::exp((double)(zp[(int64_t)k * plane + i] - m)) / se;
          double onehot = (k == tp[i]) ? 1.0 : 0.0;
          gp[(int64_t)k * plane + i] += gv * (S)((p - onehot) / (double)npix);
        }
      }
    }
  };
  return mark(id, {logits});
}

template <typename S>
std::pair<int, int> TapeT<S>::softmax_pair(int a, int b) {
  require_same_shape(val(a), val(b), "softmax_pair");
  // softmax over {a,b} per position reduces to a logistic of the difference,
  // which is stable for any magnitude.
  int d = sub(a, b);
  int wa = sigmoid(d);
  int wb = one_minus(wa);
  return {wa, wb};
}

template <typename S>
void TapeT<S>::backward(int result) {
  const auto& rv = val(result);
  if (rv.numel() != 1)
    throw ContractError("backward: result must be scalar, got " + shape_str(rv.shape));
  gbuf(result).data[0] = S(1);
  for (int id = result; id >= 0; --id) {
    Node& n = nodes_[(size_t)id];
    if (n.grad.numel() == 0 || !n.back) continue;
    n.back(*this);
  }
  for (auto& [p, id] : param_ids_) {
    Node& n = nodes_[(size_t)id];
    if (n.grad.numel() == 0) continue;
    ParamT<S>* pp = n.from_param;
    if (pp->grad.numel() == 0) pp->grad = TensorT<S>::zeros(pp->value.shape);
    for (int64_t i = 0; i < n.grad.numel(); ++i) pp->grad.data[(size_t)i] += n.grad.data[(size_t)i];
  }
}

template <typename S>
std::map<std::string, TensorT<S>> TapeT<S>::gradients(const std::vector<ParamT<S>*>& params) const {
  std::map<std::string, TensorT<S>> out;
  for (ParamT<S>* p : params) {
    auto it = param_ids_.find(p);
    if (it != param_ids_.end() && nodes_[(size_t)it->second].grad.numel() > 0)
      out[p->name] = nodes_[(size_t)it->second].grad;
    else
      out[p->name] = TensorT<S>::zeros(p->value.shape);
  }
  return out;
}

template class TapeT<float>;
template class TapeT<double>;

}  // namespace bimii
