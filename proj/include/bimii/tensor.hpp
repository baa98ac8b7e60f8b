#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bimii {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Dense row-major N-d tensor. Feature maps use BCHW order.
template <typename S>
struct TensorT {
  Shape shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
  TensorT(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if ((int64_t)data.size() != shape_numel(shape))
      throw ShapeError("data size " + std::to_string(data.size()) + " != numel of " + shape_str(shape));
  }

  int64_t numel() const { return (int64_t)data.size(); }
  int dim(int i) const { return shape[(size_t)i]; }
  int rank() const { return (int)shape.size(); }

  S& at4(int b, int c, int h, int w) {
    return data[((int64_t)(b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  S at4(int b, int c, int h, int w) const {
    return data[((int64_t)(b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  static TensorT zeros(Shape sh) { return TensorT(std::move(sh)); }
  static TensorT full(Shape sh, S v) {
    TensorT t(std::move(sh));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static TensorT scalar(S v) { return full({1}, v); }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  void check_finite(const std::string& what) const {
    for (S v : data)
      if (!std::isfinite((double)v))
        throw NumericError("non-finite value in " + what);
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  template <typename T2>
  TensorT<T2> cast() const {
    TensorT<T2> r;
    r.shape = shape;
    r.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) r.data[i] = (T2)data[i];
    return r;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Integer label maps (class ids), kept apart from differentiable tensors.
struct LabelMap {
  Shape shape;  // HW or BHW
  std::vector<int32_t> data;

  LabelMap() = default;
  explicit LabelMap(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), 0) {}
  int64_t numel() const { return (int64_t)data.size(); }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const std::string& who) {
  if (!a.same_shape(b))
    throw ShapeError(who + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Deterministic RNG helpers; all randomness in the project flows through
// explicitly seeded mt19937 instances so runs are reproducible bit for bit.
template <typename S>
void fill_uniform(TensorT<S>& t, std::mt19937& rng, S lo, S hi) {
  std::uniform_real_distribution<double> d((double)lo, (double)hi);
  for (S& v : t.data) v = (S)d(rng);
}

template <typename S>
void fill_normal(TensorT<S>& t, std::mt19937& rng, S mean, S stddev) {
  std::normal_distribution<double> d((double)mean, (double)stddev);
  for (S& v : t.data) v = (S)d(rng);
}

}  // namespace bimii
