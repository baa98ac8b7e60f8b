#pragma once

#include <utility>

#include "bimii/nn.hpp"

namespace bimii {

enum class CcnnMode { Full, Nolinking, IdentityBypass };

// Neuron hyperparameters. The decay exponents, threshold gain and linking
// strength are fixed (not trained); conv_m / conv_w are trained.
struct CcnnHyper {
  double alpha_f = 0.1;
  double alpha_l = 1.0;
  double alpha_e = 0.4;
  double v_e = 1.0;
  double beta = 0.5;
  int kernel = 7;
  int dilation = 1;
  CcnnMode mode = CcnnMode::Full;

  int padding() const { return dilation * (kernel - 1) / 2; }
};

// Dynamical signals of one lineage as plain tensors (graph boundaries only).
template <typename S>
struct CcnnStateT {
  TensorT<S> f, l, e, y;
  int n = 0;

  static CcnnStateT zero(const Shape& shape) {
    CcnnStateT s;
    s.f = TensorT<S>::zeros(shape);
    s.l = TensorT<S>::zeros(shape);
    s.e = TensorT<S>::zeros(shape);
    s.y = TensorT<S>::zeros(shape);
    return s;
  }
};

// Same signals as live tape nodes while a forward pass is being recorded.
struct CcnnStateIds {
  int f = -1, l = -1, e = -1, y = -1;
  int n = 0;
};

template <typename S>
CcnnStateIds state_to_ids(TapeT<S>& t, const CcnnStateT<S>& s) {
  return {t.leaf(s.f), t.leaf(s.l), t.leaf(s.e), t.leaf(s.y), s.n};
}

template <typename S>
CcnnStateT<S> ids_to_state(const TapeT<S>& t, const CcnnStateIds& s) {
  CcnnStateT<S> out;
  out.f = t.val(s.f);
  out.l = t.val(s.l);
  out.e = t.val(s.e);
  out.y = t.val(s.y);
  out.n = s.n;
  return out;
}

template <typename S>
struct CcnnLayerT {
  ParamT<S>* conv_m = nullptr;  // feedback synapses, no bias
  ParamT<S>* conv_w = nullptr;  // linking synapses, no bias
  CcnnHyper hp;

  static CcnnLayerT make(ParamStoreT<S>& store, const std::string& name, int channels,
                         const CcnnHyper& hp, std::mt19937& rng);

  // One iteration in the order F, L, U, E, Y. Also reports U for invariant
  // checks via `u_out` when non-null.
  CcnnStateIds step(CtxT<S>& ctx, const CcnnStateIds& state, int input, int* u_out = nullptr) const;

  // Runs t_steps iterations against the same input without reinitializing and
  // returns the time-averaged output with the advanced state.
  std::pair<int, CcnnStateIds> forward(CtxT<S>& ctx, CcnnStateIds state, int input,
                                       int t_steps) const;
};

// Elementwise mean of two lineage states; iteration counts must agree.
template <typename S>
CcnnStateIds state_merge(CtxT<S>& ctx, const CcnnStateIds& a, const CcnnStateIds& b);

// Learned 1x1 per-field projection used when a lineage crosses a shape change.
template <typename S>
struct StateAdapterT {
  ParamT<S>* wf = nullptr;
  ParamT<S>* wl = nullptr;
  ParamT<S>* we = nullptr;
  ParamT<S>* wy = nullptr;

  static StateAdapterT make(ParamStoreT<S>& store, const std::string& name, int cin, int cout,
                            std::mt19937& rng);
};

template <typename S>
CcnnStateIds state_adapt(CtxT<S>& ctx, const CcnnStateIds& state, const StateAdapterT<S>& adapter,
                         int target_h, int target_w);

// Plain-tensor wrappers over one-off tapes; these are the unit-test surface.
template <typename S>
CcnnStateT<S> ccnn_step(const CcnnStateT<S>& state, const TensorT<S>& input,
                        const CcnnLayerT<S>& layer);

template <typename S>
std::pair<TensorT<S>, CcnnStateT<S>> ccnn_forward(const CcnnStateT<S>& state,
                                                  const TensorT<S>& input,
                                                  const CcnnLayerT<S>& layer, int t_steps);

template <typename S>
CcnnStateT<S> state_merge(const CcnnStateT<S>& a, const CcnnStateT<S>& b);

}  // namespace bimii
