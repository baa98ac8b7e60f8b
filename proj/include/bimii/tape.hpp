#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bimii/tensor.hpp"

namespace bimii {

// A named trainable (or tracked) tensor. Gradients are accumulated into
// `grad` by Tape::backward for every tape the param participated in.
template <typename S>
struct ParamT {
  std::string name;
  TensorT<S> value;
  TensorT<S> grad;
  bool trainable = true;

  void zero_grad() { grad.fill(S(0)); }
};

enum class PoolMode { Average, Max };

template <typename S>
struct BatchStats {
  TensorT<S> mean;  // per channel
  TensorT<S> var;   // per channel, biased
};

// Reverse-mode tape over whole-tensor operations. Node ids are ints; parents
// always precede children, so one reverse sweep is a topological order.
// Replaying the same recorded forward is bitwise identical: every reduction
// below has a fixed iteration order.
template <typename S>
class TapeT {
 public:
  int leaf(TensorT<S> v);
  int param(ParamT<S>& p);  // one node per param per tape

  const TensorT<S>& val(int id) const { return nodes_[(size_t)id].value; }
  const TensorT<S>& grad(int id) const { return nodes_[(size_t)id].grad; }
  size_t size() const { return nodes_.size(); }

  // True when a gradient must be produced for this node (it is a param or
  // derives from one). Backward kernels skip work into dead inputs.
  bool needs_grad(int id) const { return nodes_[(size_t)id].needs; }

  // Elementwise, identical shapes.
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);

  // b broadcast over a: same rank, each extent of b is 1 or equal to a's.
  int mul_bcast(int a, int b);
  int add_bcast(int a, int b);

  int scale(int a, S c);
  int add_const(int a, S c);
  int one_minus(int a) { return add_const(scale(a, S(-1)), S(1)); }

  int sigmoid(int a);
  int leaky_relu(int a, S slope);
  int relu(int a) { return leaky_relu(a, S(0)); }
  int exp_(int a);
  int clamp(int a, S lo, S hi);

  int conv2d(int x, int k, int bias, int stride, int pad, int dilation, int groups);
  int linear(int x, int w, int b);  // over last axis; b < 0 for none
  int global_pool(int x, PoolMode mode);
  int resize_bilinear(int x, int th, int tw);
  int concat_ch(const std::vector<int>& xs);
  int slice_ch(int x, int c0, int c1);  // channel range [c0, c1)
  int transpose_hw(int x);
  int reshape(int x, Shape sh);

  int layer_norm_last(int x, int gamma, int beta, S eps);
  int bn_train(int x, int gamma, int beta, S eps, BatchStats<S>* stats_out);
  int bn_eval(int x, int gamma, int beta, const TensorT<S>& mean, const TensorT<S>& var, S eps);

  int sum_all(int x);
  int mean_all(int x);
  int gather_scalar(int x, int64_t flat_index);

  // Mean over pixels of -log softmax probability of the target class.
  int cross_entropy_mean(int logits, const LabelMap& target);

  // Per-position weights over a two-way choice; wa + wb = 1.
  std::pair<int, int> softmax_pair(int a, int b);

  // Seeds d(result)=1, sweeps in reverse, then adds each participating
  // param's gradient into ParamT::grad. Non-scalar result is a contract error.
  void backward(int result);

  // Gradient lookup for every param in `names` order; zeros when the param
  // never joined this tape.
  std::map<std::string, TensorT<S>> gradients(const std::vector<ParamT<S>*>& params) const;

 private:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // empty until touched by backward
    std::function<void(TapeT&)> back;
    ParamT<S>* from_param = nullptr;
    bool needs = false;
  };

  int push(TensorT<S> v, std::function<void(TapeT&)> back);
  int mark(int id, std::initializer_list<int> parents);
  int mark_list(int id, const std::vector<int>& parents);
  TensorT<S>& gbuf(int id);

  std::vector<Node> nodes_;
  std::unordered_map<const ParamT<S>*, int> param_ids_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace bimii
