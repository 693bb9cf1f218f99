#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

// Reverse-mode tape. Ops append nodes in execution order, so reverse creation
// order is a valid topological order for the backward sweep; each node's pull
// closure runs exactly once. Values live until reset(), which lets backward
// closures re-read inputs instead of caching copies.
template <typename S>
class Tape {
 public:
  using Id = std::int32_t;
  using Pull = std::function<void(Tape&, Id)>;

  Id leaf(Tensor<S>& t) {
    Node node;
    node.value = t;  // copy; parameters are small next to activations
    node.needs_grad = t.requires_grad;
    node.sink = t.requires_grad ? &t : nullptr;
    nodes_.push_back(std::move(node));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id constant(Tensor<S> value) {
    Node node;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return static_cast<Id>(nodes_.size() - 1);
  }

  // Same value, cut off from the graph.
  Id detach(Id id) { return constant(val(id)); }

  Id make_node(Tensor<S> value, bool needs_grad, Pull pull) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs_grad;
    if (needs_grad) node.pull = std::move(pull);
    nodes_.push_back(std::move(node));
    return static_cast<Id>(nodes_.size() - 1);
  }

  const Tensor<S>& val(Id id) const { return nodes_[id].value; }
  bool needs_grad(Id id) const { return nodes_[id].needs_grad; }

  std::vector<S>& grad(Id id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.numel(), S(0));
    return node.grad;
  }

  void backward(Id loss) {
    if (nodes_.empty()) throw ContractError("backward: empty tape");
    if (val(loss).numel() != 1) throw ContractError("backward: loss must be scalar");
    grad(loss)[0] += S(1);
    for (Id i = loss; i >= 0; --i) {
      Node& node = nodes_[i];
      if (!node.needs_grad || node.grad.empty()) continue;
      if (node.pull) node.pull(*this, i);
      if (node.sink) {
        auto& g = node.sink->grad;
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += node.grad[j];
      }
    }
  }

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    std::vector<S> grad;
    bool needs_grad = false;
    Tensor<S>* sink = nullptr;
    Pull pull;
  };
  std::vector<Node> nodes_;
};

namespace ops {

template <typename S>
using Id = typename Tape<S>::Id;

inline constexpr double kLogFloor = 1e-8;

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

// cols is [Cin*kh*kw, OH*OW] for one image.
template <typename S>
void im2col(const S* img, int cin, int h, int w, int kh, int kw, int pad, int stride, int oh,
            int ow, S* cols) {
  const int ohw = oh * ow;
  for (int c = 0; c < cin; ++c) {
    for (int r = 0; r < kh; ++r) {
      for (int q = 0; q < kw; ++q) {
        S* row = cols + (static_cast<std::size_t>(c) * kh * kw + r * kw + q) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + r - pad;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, S(0));
            continue;
          }
          const S* src = img + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + q - pad;
            row[oy * ow + ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, int cin, int h, int w, int kh, int kw, int pad, int stride, int oh,
                int ow, S* img) {
  const int ohw = oh * ow;
  for (int c = 0; c < cin; ++c) {
    for (int r = 0; r < kh; ++r) {
      for (int q = 0; q < kw; ++q) {
        const S* row = cols + (static_cast<std::size_t>(c) * kh * kw + r * kw + q) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + r - pad;
          if (iy < 0 || iy >= h) continue;
          S* dst = img + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + q - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with bias. Kernel [Cout,Cin,kh,kw], odd kh/kw strictly.
// The GEMM per image is W[Cout,CK] * cols[CK,OHW]; im2col is recomputed in the
// backward pass to keep tape memory at activation size.
template <typename S>
Id<S> conv2d(Tape<S>& t, Id<S> input, Id<S> kernel, Id<S> bias, int pad, int stride = 1) {
  const Tensor<S>& x = t.val(input);
  const Tensor<S>& k = t.val(kernel);
  const Tensor<S>& b = t.val(bias);
  if (x.shape.size() != 4 || k.shape.size() != 4)
    throw ShapeError("conv2d: expects rank-4 input and kernel");
  if (k.shape[2] % 2 == 0 || k.shape[3] % 2 == 0)
    throw ContractError("conv2d: kernel dims must be odd");
  if (x.shape[1] != k.shape[1])
    throw ShapeError("conv2d: input channels " + std::to_string(x.shape[1]) +
                     " != kernel channels " + std::to_string(k.shape[1]));
  if (b.shape != Shape{k.shape[0]}) throw ShapeError("conv2d: bias must be [Cout]");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");

  const int n = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output");
  const int ck = cin * kh * kw, ohw = oh * ow;

  // All Eigen operands live in Eigen-owned (hence consistently aligned)
  // matrices: heap alignment of tensor buffers must not influence the
  // vectorized summation order, or bit-level run-to-run determinism breaks.
  Tensor<S> out(Shape{n, cout, oh, ow});
  {
    detail::RowMat<S> km = detail::ConstMatMap<S>(k.data.data(), cout, ck);
    detail::RowMat<S> cols(ck, ohw);
    detail::RowMat<S> om(cout, ohw);
    for (int i = 0; i < n; ++i) {
      detail::im2col(x.data.data() + static_cast<std::size_t>(i) * cin * h * w, cin, h, w, kh, kw,
                     pad, stride, oh, ow, cols.data());
      om.noalias() = km * cols;
      S* dst = out.data.data() + static_cast<std::size_t>(i) * cout * ohw;
      for (int c = 0; c < cout; ++c) {
        const S bias_c = b.data[c];
        const S* src = om.data() + static_cast<std::size_t>(c) * ohw;
        for (int p = 0; p < ohw; ++p) dst[static_cast<std::size_t>(c) * ohw + p] = src[p] + bias_c;
      }
    }
  }

  const bool ng = t.needs_grad(input) || t.needs_grad(kernel) || t.needs_grad(bias);
  return t.make_node(std::move(out), ng, [=](Tape<S>& tp, Id<S> self) {
    const Tensor<S>& xv = tp.val(input);
    const Tensor<S>& kv = tp.val(kernel);
    const std::vector<S>& go = tp.grad(self);
    const bool need_dx = tp.needs_grad(input);
    const bool need_dk = tp.needs_grad(kernel);
    const bool need_db = tp.needs_grad(bias);
    detail::RowMat<S> km = detail::ConstMatMap<S>(kv.data.data(), cout, ck);
    detail::RowMat<S> cols(ck, ohw);
    detail::RowMat<S> gom(cout, ohw);
    detail::RowMat<S> dkm = detail::RowMat<S>::Zero(cout, ck);
    for (int i = 0; i < n; ++i) {
      gom = detail::ConstMatMap<S>(go.data() + static_cast<std::size_t>(i) * cout * ohw, cout,
                                   ohw);
      if (need_dk) {
        detail::im2col(xv.data.data() + static_cast<std::size_t>(i) * cin * h * w, cin, h, w, kh,
                       kw, pad, stride, oh, ow, cols.data());
        dkm.noalias() += gom * cols.transpose();
      }
      if (need_db) {
        auto& db = tp.grad(bias);
        for (int c = 0; c < cout; ++c) {
          double acc = 0;
          const S* row = go.data() + (static_cast<std::size_t>(i) * cout + c) * ohw;
          for (int p = 0; p < ohw; ++p) acc += static_cast<double>(row[p]);
          db[c] += static_cast<S>(acc);
        }
      }
      if (need_dx) {
        detail::RowMat<S> dcols = km.transpose() * gom;
        detail::col2im_add(dcols.data(), cin, h, w, kh, kw, pad, stride, oh, ow,
                           tp.grad(input).data() + static_cast<std::size_t>(i) * cin * h * w);
      }
    }
    if (need_dk) {
      auto& dk = tp.grad(kernel);
      for (std::size_t j = 0; j < dk.size(); ++j) dk[j] += dkm.data()[j];
    }
  });
}

template <typename S>
Id<S> add(Tape<S>& t, Id<S> a, Id<S> b) {
  check_same_shape(t.val(a), t.val(b), "add");
  Tensor<S> out = t.val(a);
  const auto& bv = t.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make_node(std::move(out), ng, [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename S>
Id<S> sub(Tape<S>& t, Id<S> a, Id<S> b) {
  check_same_shape(t.val(a), t.val(b), "sub");
  Tensor<S> out = t.val(a);
  const auto& bv = t.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make_node(std::move(out), ng, [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename S>
Id<S> mul(Tape<S>& t, Id<S> a, Id<S> b) {
  check_same_shape(t.val(a), t.val(b), "mul");
  Tensor<S> out = t.val(a);
  const auto& bv = t.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make_node(std::move(out), ng, [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.val(a).data;
    const auto& bv2 = tp.val(b).data;
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename S>
Id<S> scale(Tape<S>& t, Id<S> a, S factor) {
  Tensor<S> out = t.val(a);
  for (auto& v : out.data) v *= factor;
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename S>
Id<S> neg(Tape<S>& t, Id<S> a) {
  return scale(t, a, S(-1));
}

template <typename S>
Id<S> relu(Tape<S>& t, Id<S> a) {
  Tensor<S> out = t.val(a);
  for (auto& v : out.data) v = v > S(0) ? v : S(0);
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.val(a).data;
    auto& ga = tp.grad(a);
    // gradient at exactly 0 is defined as 0
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += av[i] > S(0) ? g[i] : S(0);
  });
}

template <typename S>
Id<S> clamp(Tape<S>& t, Id<S> a, S lo, S hi) {
  Tensor<S> out = t.val(a);
  for (auto& v : out.data) v = std::min(std::max(v, lo), hi);
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.val(a).data;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += (av[i] >= lo && av[i] <= hi) ? g[i] : S(0);
  });
}

// log(max(x, 1e-8)); zero gradient in the floored region.
template <typename S>
Id<S> log_clamped(Tape<S>& t, Id<S> a) {
  const S floor_v = static_cast<S>(kLogFloor);
  Tensor<S> out = t.val(a);
  for (auto& v : out.data) v = std::log(std::max(v, floor_v));
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.val(a).data;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > floor_v) ga[i] += g[i] / av[i];
  });
}

template <typename S>
Id<S> exp(Tape<S>& t, Id<S> a) {
  Tensor<S> out = t.val(a);
  for (auto& v : out.data) v = std::exp(v);
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& ov = tp.val(self).data;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
  });
}

template <typename S>
Id<S> sum(Tape<S>& t, Id<S> a) {
  double acc = 0;
  for (S v : t.val(a).data) acc += static_cast<double>(v);
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(acc);
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const S g = tp.grad(self)[0];
    auto& ga = tp.grad(a);
    for (auto& v : ga) v += g;
  });
}

template <typename S>
Id<S> mean(Tape<S>& t, Id<S> a) {
  const std::size_t n = t.val(a).numel();
  double acc = 0;
  for (S v : t.val(a).data) acc += static_cast<double>(v);
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(acc / static_cast<double>(n));
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const S g = tp.grad(self)[0] / static_cast<S>(n);
    auto& ga = tp.grad(a);
    for (auto& v : ga) v += g;
  });
}

// Elementwise max of pooled 2x2 windows, stride 2; gradient goes to the first
// (scan-order) argmax of each window.
template <typename S>
Id<S> max_pool2d(Tape<S>& t, Id<S> a) {
  const Tensor<S>& x = t.val(a);
  if (x.shape.size() != 4) throw ShapeError("max_pool2d: expects rank-4 input");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool2d: H,W must be even");
  const int oh = h / 2, ow = w / 2;
  Tensor<S> out(Shape{n, c, oh, ow});
  std::vector<std::int32_t> argmax(out.numel());
  std::size_t o = 0;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const S* plane = x.data.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          S best = plane[(2 * oy) * w + 2 * ox];
          std::int32_t best_idx = (2 * oy) * w + 2 * ox;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int32_t idx = (2 * oy + dy) * w + 2 * ox + dx;
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          out.data[o] = best;
          argmax[o] = best_idx;
        }
      }
    }
  }
  return t.make_node(std::move(out), t.needs_grad(a),
                     [=, argmax = std::move(argmax)](Tape<S>& tp, Id<S> self) {
                       const auto& g = tp.grad(self);
                       auto& ga = tp.grad(a);
                       std::size_t oo = 0;
                       for (int i = 0; i < n; ++i)
                         for (int ch = 0; ch < c; ++ch) {
                           S* gplane = ga.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
                           for (int p = 0; p < oh * ow; ++p, ++oo) gplane[argmax[oo]] += g[oo];
                         }
                     });
}

// Nearest-neighbour x2 upsampling.
template <typename S>
Id<S> nearest_upsample2(Tape<S>& t, Id<S> a) {
  const Tensor<S>& x = t.val(a);
  if (x.shape.size() != 4) throw ShapeError("nearest_upsample2: expects rank-4 input");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  Tensor<S> out(Shape{n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const S* src = x.data.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
      S* dst = out.data.data() + (static_cast<std::size_t>(i) * c + ch) * 4 * h * w;
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2) {
          const S v = src[y * w + x2];
          dst[(2 * y) * 2 * w + 2 * x2] = v;
          dst[(2 * y) * 2 * w + 2 * x2 + 1] = v;
          dst[(2 * y + 1) * 2 * w + 2 * x2] = v;
          dst[(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
        }
    }
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(a);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const S* gsrc = g.data() + (static_cast<std::size_t>(i) * c + ch) * 4 * h * w;
        S* gdst = ga.data() + (static_cast<std::size_t>(i) * c + ch) * h * w;
        for (int y = 0; y < h; ++y)
          for (int x2 = 0; x2 < w; ++x2)
            gdst[y * w + x2] += gsrc[(2 * y) * 2 * w + 2 * x2] +
                                gsrc[(2 * y) * 2 * w + 2 * x2 + 1] +
                                gsrc[(2 * y + 1) * 2 * w + 2 * x2] +
                                gsrc[(2 * y + 1) * 2 * w + 2 * x2 + 1];
      }
  });
}

// Concatenate along the channel axis.
template <typename S>
Id<S> concat_channels(Tape<S>& t, Id<S> a, Id<S> b) {
  const Tensor<S>& xa = t.val(a);
  const Tensor<S>& xb = t.val(b);
  if (xa.shape.size() != 4 || xb.shape.size() != 4)
    throw ShapeError("concat_channels: expects rank-4 inputs");
  if (xa.shape[0] != xb.shape[0] || xa.shape[2] != xb.shape[2] || xa.shape[3] != xb.shape[3])
    throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(xa.shape) + " vs " +
                     shape_str(xb.shape));
  const int n = xa.shape[0], ca = xa.shape[1], cb = xb.shape[1];
  const int h = xa.shape[2], w = xa.shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<S> out(Shape{n, ca + cb, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy_n(xa.data.data() + static_cast<std::size_t>(i) * ca * plane, ca * plane,
                out.data.data() + static_cast<std::size_t>(i) * (ca + cb) * plane);
    std::copy_n(xb.data.data() + static_cast<std::size_t>(i) * cb * plane, cb * plane,
                out.data.data() + static_cast<std::size_t>(i) * (ca + cb) * plane + ca * plane);
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make_node(std::move(out), ng, [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca * plane; ++j)
          ga[static_cast<std::size_t>(i) * ca * plane + j] +=
              g[static_cast<std::size_t>(i) * (ca + cb) * plane + j];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb * plane; ++j)
          gb[static_cast<std::size_t>(i) * cb * plane + j] +=
              g[static_cast<std::size_t>(i) * (ca + cb) * plane + ca * plane + j];
    }
  });
}

// Inverted dropout with a mask fixed at forward time.
template <typename S>
Id<S> dropout(Tape<S>& t, Id<S> a, double rate, bool train, Rng& rng) {
  if (!train || rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const Tensor<S>& x = t.val(a);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> mask(x.numel());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask) m = u(rng) < rate ? S(0) : keep_scale;
  Tensor<S> out = x;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask[i];
  return t.make_node(std::move(out), t.needs_grad(a),
                     [=, mask = std::move(mask)](Tape<S>& tp, Id<S> self) {
                       const auto& g = tp.grad(self);
                       auto& ga = tp.grad(a);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
                     });
}

// Per-pixel softmax over the channel axis, stabilized by max subtraction.
template <typename S>
Id<S> softmax_channel(Tape<S>& t, Id<S> a) {
  const Tensor<S>& x = t.val(a);
  if (x.shape.size() != 4) throw ShapeError("softmax_channel: expects rank-4 logits");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (c < 2) throw ContractError("softmax_channel: needs at least 2 classes");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<S> out(x.shape);
  for (int i = 0; i < n; ++i) {
    const S* src = x.data.data() + static_cast<std::size_t>(i) * c * plane;
    S* dst = out.data.data() + static_cast<std::size_t>(i) * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      S mx = src[p];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, src[ch * plane + p]);
      double z = 0;
      for (int ch = 0; ch < c; ++ch) {
        const S e = std::exp(src[ch * plane + p] - mx);
        dst[ch * plane + p] = e;
        z += static_cast<double>(e);
      }
      const S inv = static_cast<S>(1.0 / z);
      for (int ch = 0; ch < c; ++ch) dst[ch * plane + p] *= inv;
    }
  }
  return t.make_node(std::move(out), t.needs_grad(a), [=](Tape<S>& tp, Id<S> self) {
    const auto& g = tp.grad(self);
    const auto& p = tp.val(self).data;
    auto& ga = tp.grad(a);
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * c * plane;
      for (std::size_t px = 0; px < plane; ++px) {
        double dot = 0;
        for (int ch = 0; ch < c; ++ch)
          dot += static_cast<double>(g[base + ch * plane + px]) *
                 static_cast<double>(p[base + ch * plane + px]);
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t idx = base + ch * plane + px;
          ga[idx] += p[idx] * (g[idx] - static_cast<S>(dot));
        }
      }
    }
  });
}

}  // namespace ops
}  // namespace cotrain
