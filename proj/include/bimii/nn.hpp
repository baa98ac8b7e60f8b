#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bimii/tape.hpp"
#include "bimii/tensor.hpp"

namespace bimii {

// Registry of every named tensor in a model, in registration order. Order is
// fixed by construction so checkpoints and initialization are reproducible.
template <typename S>
class ParamStoreT {
 public:
  ParamT<S>& create(const std::string& name, Shape shape, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    auto p = std::make_unique<ParamT<S>>();
    p->name = name;
    p->value = TensorT<S>::zeros(std::move(shape));
    p->grad = TensorT<S>::zeros(p->value.shape);
    p->trainable = trainable;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  ParamT<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  const std::vector<std::unique_ptr<ParamT<S>>>& all() const { return params_; }

  std::vector<ParamT<S>*> trainable() const {
    std::vector<ParamT<S>*> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  void zero_grads() {
    for (const auto& p : params_) p->zero_grad();
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<ParamT<S>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-forward context: which tape records the pass and how normalization
// statistics behave.
template <typename S>
struct CtxT {
  TapeT<S>* tape = nullptr;
  bool training = false;
  bool update_stats = false;

  TapeT<S>& t() { return *tape; }
};

template <typename S>
struct Conv2dT {
  ParamT<S>* weight = nullptr;
  ParamT<S>* bias = nullptr;
  int stride = 1, pad = 0, dilation = 1, groups = 1;

  static Conv2dT make(ParamStoreT<S>& store, const std::string& name, int cin, int cout, int k,
                      int stride, int pad, int dilation, int groups, bool with_bias,
                      std::mt19937& rng) {
    Conv2dT c;
    c.weight = &store.create(name + ".weight", {cout, cin / groups, k, k});
    S fan_in = (S)((cin / groups) * k * k);
    S stddev = std::sqrt(S(2) / (fan_in * S(1.01)));  // leaky(0.1) gain
    fill_normal(c.weight->value, rng, S(0), stddev);
    if (with_bias) c.bias = &store.create(name + ".bias", {cout});
    c.stride = stride;
    c.pad = pad;
    c.dilation = dilation;
    c.groups = groups;
    return c;
  }

  int forward(CtxT<S>& ctx, int x) const {
    int w = ctx.t().param(*weight);
    int b = bias ? ctx.t().param(*bias) : -1;
    return ctx.t().conv2d(x, w, b, stride, pad, dilation, groups);
  }
};

template <typename S>
struct BatchNormT {
  ParamT<S>* gamma = nullptr;
  ParamT<S>* beta = nullptr;
  ParamT<S>* running_mean = nullptr;
  ParamT<S>* running_var = nullptr;
  S eps = (S)1e-5;
  S momentum = (S)0.1;

  static BatchNormT make(ParamStoreT<S>& store, const std::string& name, int channels) {
    BatchNormT b;
    b.gamma = &store.create(name + ".gamma", {channels});
    b.beta = &store.create(name + ".beta", {channels});
    b.running_mean = &store.create(name + ".running_mean", {channels}, false);
    b.running_var = &store.create(name + ".running_var", {channels}, false);
    b.gamma->value.fill(S(1));
    b.running_var->value.fill(S(1));
    return b;
  }

  int forward(CtxT<S>& ctx, int x) const {
    int g = ctx.t().param(*gamma);
    int be = ctx.t().param(*beta);
    if (ctx.training) {
      BatchStats<S> stats;
      int y = ctx.t().bn_train(x, g, be, eps, &stats);
      if (ctx.update_stats) {
        const auto& xs = ctx.t().val(x).shape;
        int64_t n = (int64_t)xs[0] * xs[2] * xs[3];
        S unbias = n > 1 ? (S)n / (S)(n - 1) : S(1);
        for (int64_t i = 0; i < stats.mean.numel(); ++i) {
          auto& rm = running_mean->value.data[(size_t)i];
          auto& rv = running_var->value.data[(size_t)i];
          rm = (S(1) - momentum) * rm + momentum * stats.mean.data[(size_t)i];
          rv = (S(1) - momentum) * rv + momentum * stats.var.data[(size_t)i] * unbias;
        }
      }
      return y;
    }
    return ctx.t().bn_eval(x, g, be, running_mean->value, running_var->value, eps);
  }
};

// Conv -> per-channel batch norm -> leaky rectification (slope 0.1).
template <typename S>
struct CblT {
  Conv2dT<S> conv;
  BatchNormT<S> bn;
  S slope = (S)0.1;

  static CblT make(ParamStoreT<S>& store, const std::string& name, int cin, int cout, int k,
                   int stride, int pad, int dilation, std::mt19937& rng) {
    CblT c;
    c.conv = Conv2dT<S>::make(store, name + ".conv", cin, cout, k, stride, pad, dilation, 1,
                              /*with_bias=*/false, rng);
    c.bn = BatchNormT<S>::make(store, name + ".bn", cout);
    return c;
  }

  int forward(CtxT<S>& ctx, int x) const {
    return ctx.t().leaky_relu(bn.forward(ctx, conv.forward(ctx, x)), slope);
  }
};

// Two-layer perceptron over the last axis.
template <typename S>
struct MlpT {
  ParamT<S>* w1 = nullptr;
  ParamT<S>* b1 = nullptr;
  ParamT<S>* w2 = nullptr;
  ParamT<S>* b2 = nullptr;

  static MlpT make(ParamStoreT<S>& store, const std::string& name, int d_in, int d_hidden,
                   int d_out, std::mt19937& rng) {
    MlpT m;
    m.w1 = &store.create(name + ".fc1.weight", {d_hidden, d_in});
    m.b1 = &store.create(name + ".fc1.bias", {d_hidden});
    m.w2 = &store.create(name + ".fc2.weight", {d_out, d_hidden});
    m.b2 = &store.create(name + ".fc2.bias", {d_out});
    fill_normal(m.w1->value, rng, S(0), std::sqrt(S(2) / (S)d_in));
    fill_normal(m.w2->value, rng, S(0), std::sqrt(S(2) / (S)d_hidden));
    return m;
  }

  int forward(CtxT<S>& ctx, int x) const {
    int h = ctx.t().relu(ctx.t().linear(x, ctx.t().param(*w1), ctx.t().param(*b1)));
    return ctx.t().linear(h, ctx.t().param(*w2), ctx.t().param(*b2));
  }
};

// Pooled-descriptor channel attention: GAP -> MLP -> sigmoid, as a BC11 gate.
template <typename S>
struct ChannelAttnT {
  MlpT<S> mlp;
  int channels = 0;

  static ChannelAttnT make(ParamStoreT<S>& store, const std::string& name, int channels,
                           int reduction, std::mt19937& rng) {
    ChannelAttnT a;
    a.channels = channels;
    a.mlp = MlpT<S>::make(store, name + ".mlp", channels, std::max(1, channels / reduction),
                          channels, rng);
    return a;
  }

  int forward(CtxT<S>& ctx, int x) const {
    auto& t = ctx.t();
    int b = t.val(x).dim(0);
    int pooled = t.reshape(t.global_pool(x, PoolMode::Average), {b, channels});
    int gate = t.sigmoid(mlp.forward(ctx, pooled));
    return t.reshape(gate, {b, channels, 1, 1});
  }
};

}  // namespace bimii
