#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

// Per-pixel class indices for one image.
struct SegMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;

  SegMask() = default;
  SegMask(int h_, int w_) : h(h_), w(w_), labels(static_cast<std::size_t>(h_) * w_, 0) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  bool operator==(const SegMask&) const = default;
};

// Argmax over the channel axis, lowest index wins ties.
template <typename S>
std::vector<SegMask> argmax_masks(const Tensor<S>& prob) {
  if (prob.shape.size() != 4) throw ShapeError("argmax_masks: expects [N,C,H,W]");
  const int n = prob.shape[0], c = prob.shape[1], h = prob.shape[2], w = prob.shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<SegMask> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    SegMask m(h, w);
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      for (int ch = 1; ch < c; ++ch)
        if (prob.data[(static_cast<std::size_t>(i) * c + ch) * plane + p] >
            prob.data[(static_cast<std::size_t>(i) * c + best) * plane + p])
          best = ch;
      m.labels[p] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Averages the per-pixel class probabilities across models.
template <typename S>
Tensor<S> soft_vote_prob(const std::vector<Tensor<S>>& preds) {
  if (preds.empty()) throw ContractError("soft_vote: needs at least one prediction");
  for (std::size_t i = 1; i < preds.size(); ++i)
    check_same_shape(preds[0], preds[i], "soft_vote");
  Tensor<S> mean = preds[0];
  for (std::size_t i = 1; i < preds.size(); ++i)
    for (std::size_t j = 0; j < mean.data.size(); ++j) mean.data[j] += preds[i].data[j];
  const S inv = static_cast<S>(1.0 / static_cast<double>(preds.size()));
  for (auto& v : mean.data) v *= inv;
  return mean;
}

template <typename S>
std::vector<SegMask> soft_vote(const std::vector<Tensor<S>>& preds) {
  return argmax_masks(soft_vote_prob(preds));
}

// Per-pixel majority over k masks; ties resolved uniformly at random from the
// tied set.
inline SegMask hard_vote(const std::vector<SegMask>& masks, int num_classes, Rng& rng) {
  if (masks.empty()) throw ContractError("hard_vote: needs at least one mask");
  SegMask out(masks[0].h, masks[0].w);
  std::vector<int> counts(num_classes);
  std::vector<int> tied;
  for (std::size_t p = 0; p < out.labels.size(); ++p) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const SegMask& m : masks) ++counts[m.labels[p]];
    const int best = *std::max_element(counts.begin(), counts.end());
    tied.clear();
    for (int c = 0; c < num_classes; ++c)
      if (counts[c] == best) tied.push_back(c);
    if (tied.size() == 1) {
      out.labels[p] = static_cast<std::uint8_t>(tied[0]);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, tied.size() - 1);
      out.labels[p] = static_cast<std::uint8_t>(tied[pick(rng)]);
    }
  }
  return out;
}

// Dice similarity coefficient for one class: 2|S and G| / (|S| + |G|).
// Both sets empty counts as a perfect score.
inline double dsc(const SegMask& s, const SegMask& g, int class_id) {
  if (s.h != g.h || s.w != g.w) throw ShapeError("dsc: mask size mismatch");
  std::size_t ns = 0, ng = 0, inter = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const bool in_s = s.labels[i] == class_id;
    const bool in_g = g.labels[i] == class_id;
    ns += in_s;
    ng += in_g;
    inter += in_s && in_g;
  }
  if (ns + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ns + ng);
}

namespace detail {

// Felzenszwalb-Huttenlocher exact 1-d squared distance transform over finite
// sample values (callers encode "no source" as a large finite sentinel, so the
// parabola intersections stay exact integer arithmetic in double).
inline void edt_1d(const double* f, int n, double* d, std::vector<int>& v,
                   std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance to the nearest foreground pixel. Assumes
// at least one foreground pixel exists (callers guard the empty case).
inline std::vector<double> edt_squared(const SegMask& mask, int class_id) {
  const int h = mask.h, w = mask.w;
  const double far = 2.0 * (static_cast<double>(h) * h + static_cast<double>(w) * w) + 1.0;
  std::vector<double> dist(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < dist.size(); ++i)
    dist[i] = mask.labels[i] == class_id ? 0.0 : far;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {  // columns
    for (int y = 0; y < h; ++y) f[y] = dist[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) dist[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {  // rows
    for (int x = 0; x < w; ++x) f[x] = dist[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), w, d.data(), v, z);
    for (int x = 0; x < w; ++x) dist[static_cast<std::size_t>(y) * w + x] = d[x];
  }
  return dist;
}

}  // namespace detail

// Symmetric Hausdorff distance between the class-id point sets of two masks,
// in pixel units scaled by `spacing`. Both sets empty -> 0; exactly one empty
// -> +inf sentinel (callers exclude it from averages).
inline double hd(const SegMask& s, const SegMask& g, int class_id, double spacing = 1.0) {
  if (s.h != g.h || s.w != g.w) throw ShapeError("hd: mask size mismatch");
  std::size_t ns = 0, ng = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    ns += s.labels[i] == class_id;
    ng += g.labels[i] == class_id;
  }
  if (ns == 0 && ng == 0) return 0.0;
  if (ns == 0 || ng == 0) return std::numeric_limits<double>::infinity();
  const auto dist_to_g = detail::edt_squared(g, class_id);
  const auto dist_to_s = detail::edt_squared(s, class_id);
  double worst = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (s.labels[i] == class_id) worst = std::max(worst, dist_to_g[i]);
    if (g.labels[i] == class_id) worst = std::max(worst, dist_to_s[i]);
  }
  return std::sqrt(worst) * spacing;
}

// Per-pixel L1 distance between two probability maps; values in [0,2].
template <typename S>
Tensor<S> disagreement_map(const Tensor<S>& p1, const Tensor<S>& p2) {
  check_same_shape(p1, p2, "disagreement_map");
  if (p1.shape.size() != 4) throw ShapeError("disagreement_map: expects [N,C,H,W]");
  const int n = p1.shape[0], c = p1.shape[1], h = p1.shape[2], w = p1.shape[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<S> out(Shape{n, h, w});
  for (int i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * plane + p;
        acc += std::abs(static_cast<double>(p1.data[idx]) - static_cast<double>(p2.data[idx]));
      }
      out.data[static_cast<std::size_t>(i) * plane + p] = static_cast<S>(acc);
    }
  return out;
}

// Mean DSC / HD per foreground class (class 0 is background) over a set of
// images. Infinite HD sentinels are excluded from the mean and counted.
struct EvalStats {
  std::vector<double> dsc_per_class;  // index 0 -> class 1
  double dsc_mean = 0;
  std::vector<double> hd_per_class;
  double hd_mean = 0;
  int hd_excluded = 0;
};

inline EvalStats evaluate_masks(const std::vector<SegMask>& pred,
                                const std::vector<SegMask>& truth, int num_classes,
                                double spacing = 1.0) {
  if (pred.size() != truth.size() || pred.empty())
    throw ContractError("evaluate_masks: prediction/truth size mismatch");
  EvalStats st;
  st.dsc_per_class.assign(num_classes - 1, 0.0);
  st.hd_per_class.assign(num_classes - 1, 0.0);
  std::vector<int> hd_counts(num_classes - 1, 0);
  for (int c = 1; c < num_classes; ++c) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      st.dsc_per_class[c - 1] += dsc(pred[i], truth[i], c);
      const double d = hd(pred[i], truth[i], c, spacing);
      if (std::isfinite(d)) {
        st.hd_per_class[c - 1] += d;
        ++hd_counts[c - 1];
      } else {
        ++st.hd_excluded;
      }
    }
    st.dsc_per_class[c - 1] /= static_cast<double>(pred.size());
    st.hd_per_class[c - 1] = hd_counts[c - 1] ? st.hd_per_class[c - 1] / hd_counts[c - 1] : 0.0;
  }
  for (int c = 0; c < num_classes - 1; ++c) {
    st.dsc_mean += st.dsc_per_class[c];
    st.hd_mean += st.hd_per_class[c];
  }
  st.dsc_mean /= std::max(1, num_classes - 1);
  st.hd_mean /= std::max(1, num_classes - 1);
  return st;
}

}  // namespace cotrain
