#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"

namespace cotrain {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense n-d array, row-major. `grad` is allocated only for tensors that
// participate as trainable leaves (requires_grad).
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S(0))
      : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<S> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  std::size_t numel() const { return data.size(); }

  void set_requires_grad(bool on = true) {
    requires_grad = on;
    if (on)
      grad.assign(data.size(), S(0));
    else
      grad.clear();
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

  // NCHW accessors; valid only for rank-4 tensors.
  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }

  S& at4(int n_, int c_, int h_, int w_) {
    return data[((static_cast<std::size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
  }
  S at4(int n_, int c_, int h_, int w_) const {
    return data[((static_cast<std::size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

template <typename S>
Tensor<S> randn(const Shape& shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
  Tensor<S> t(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.data) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
Tensor<S> rand_uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<S> t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = static_cast<S>(dist(rng));
  return t;
}

}  // namespace cotrain
