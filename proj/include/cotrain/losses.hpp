#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/tape.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

// All pixel-wise losses are averaged over batch and pixels (not channels), so
// loss weights are resolution independent.

inline std::size_t pixel_count(const Shape& s) {
  if (s.size() != 4) throw ShapeError("loss: expects [N,C,H,W], got " + shape_str(s));
  return static_cast<std::size_t>(s[0]) * s[2] * s[3];
}

// One-hot encode a [N,H,W] class-index tensor into [N,C,H,W].
template <typename S>
Tensor<S> one_hot(const std::vector<std::uint8_t>& labels, int n, int num_classes, int h, int w) {
  Tensor<S> out(Shape{n, num_classes, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      const int c = labels[static_cast<std::size_t>(i) * plane + p];
      if (c < 0 || c >= num_classes) throw ContractError("one_hot: label out of range");
      out.data[(static_cast<std::size_t>(i) * num_classes + c) * plane + p] = S(1);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Plain (tape-free) forms, used by metrics, probes and as test oracles. These
// use the exact 0*log(0) := 0 convention.
// ---------------------------------------------------------------------------

// Mean over pixels of the per-pixel Shannon entropy -sum_c p log p.
template <typename S>
double entropy_mean(const Tensor<S>& p) {
  const std::size_t npix = pixel_count(p.shape);
  const int c = p.shape[1];
  const std::size_t plane = static_cast<std::size_t>(p.shape[2]) * p.shape[3];
  double acc = 0;
  for (int i = 0; i < p.shape[0]; ++i)
    for (std::size_t px = 0; px < plane; ++px)
      for (int ch = 0; ch < c; ++ch) {
        const double v = p.data[(static_cast<std::size_t>(i) * c + ch) * plane + px];
        if (v > 0) acc -= v * std::log(v);
      }
  return acc / static_cast<double>(npix);
}

// Mean over pixels of KL(p || q), q floored at the log clamp.
template <typename S>
double kl_mean(const Tensor<S>& p, const Tensor<S>& q) {
  check_same_shape(p, q, "kl");
  const std::size_t npix = pixel_count(p.shape);
  double acc = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double pv = p.data[i];
    if (pv > 0)
      acc += pv * (std::log(pv) - std::log(std::max<double>(q.data[i], ops::kLogFloor)));
  }
  return acc / static_cast<double>(npix);
}

// Mean over pixels of the soft cross-entropy H(p, q) = -sum_c p log q.
template <typename S>
double cross_entropy_mean(const Tensor<S>& p, const Tensor<S>& q) {
  check_same_shape(p, q, "cross_entropy");
  const std::size_t npix = pixel_count(p.shape);
  double acc = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double pv = p.data[i];
    if (pv > 0) acc -= pv * std::log(std::max<double>(q.data[i], ops::kLogFloor));
  }
  return acc / static_cast<double>(npix);
}

// ---------------------------------------------------------------------------
// Tape forms, differentiable through the prediction arguments.
// ---------------------------------------------------------------------------

// Pixel-wise cross-entropy against a one-hot target (not a tape node).
template <typename S>
ops::Id<S> sup_loss(Tape<S>& t, ops::Id<S> pred, const Tensor<S>& target) {
  check_same_shape(t.val(pred), target, "sup_loss");
  const std::size_t npix = pixel_count(target.shape);
  auto y = t.constant(target);
  auto ce = ops::sum(t, ops::mul(t, y, ops::log_clamped(t, pred)));
  return ops::scale(t, ce, static_cast<S>(-1.0 / static_cast<double>(npix)));
}

// Soft cross-entropy H(p, q); gradients flow through q only — callers pass a
// detached id for the target slot.
template <typename S>
ops::Id<S> soft_cross_entropy(Tape<S>& t, ops::Id<S> target_p, ops::Id<S> pred_q) {
  check_same_shape(t.val(target_p), t.val(pred_q), "soft_cross_entropy");
  const std::size_t npix = pixel_count(t.val(target_p).shape);
  auto ce = ops::sum(t, ops::mul(t, target_p, ops::log_clamped(t, pred_q)));
  return ops::scale(t, ce, static_cast<S>(-1.0 / static_cast<double>(npix)));
}

// Mean per-pixel KL(p || q) with p held constant (detached by the caller).
template <typename S>
ops::Id<S> kl_divergence(Tape<S>& t, ops::Id<S> p, ops::Id<S> q) {
  check_same_shape(t.val(p), t.val(q), "kl_divergence");
  const std::size_t npix = pixel_count(t.val(p).shape);
  auto diff = ops::sub(t, ops::log_clamped(t, p), ops::log_clamped(t, q));
  auto acc = ops::sum(t, ops::mul(t, p, diff));
  return ops::scale(t, acc, static_cast<S>(1.0 / static_cast<double>(npix)));
}

namespace detail {
// -sum(x log x) / npix as a tape node.
template <typename S>
ops::Id<S> entropy_node(Tape<S>& t, ops::Id<S> p) {
  const std::size_t npix = pixel_count(t.val(p).shape);
  auto h = ops::sum(t, ops::mul(t, p, ops::log_clamped(t, p)));
  return ops::scale(t, h, static_cast<S>(-1.0 / static_cast<double>(npix)));
}
}  // namespace detail

// Jensen-Shannon agreement across k >= 2 probability maps:
// H(mean of f^i) - (1/k) sum_i H(f^i), averaged per pixel. Lies in [0, ln k].
template <typename S>
ops::Id<S> jsd_agreement(Tape<S>& t, const std::vector<ops::Id<S>>& preds) {
  if (preds.size() < 2) throw ContractError("jsd_agreement: needs k >= 2 predictions");
  for (std::size_t i = 1; i < preds.size(); ++i)
    check_same_shape(t.val(preds[0]), t.val(preds[i]), "jsd_agreement");
  const S inv_k = static_cast<S>(1.0 / static_cast<double>(preds.size()));
  auto mean_pred = preds[0];
  for (std::size_t i = 1; i < preds.size(); ++i) mean_pred = ops::add(t, mean_pred, preds[i]);
  mean_pred = ops::scale(t, mean_pred, inv_k);
  auto jsd = detail::entropy_node(t, mean_pred);
  auto h_sum = detail::entropy_node(t, preds[0]);
  for (std::size_t i = 1; i < preds.size(); ++i)
    h_sum = ops::add(t, h_sum, detail::entropy_node(t, preds[i]));
  return ops::sub(t, jsd, ops::scale(t, h_sum, inv_k));
}

// Diversity coupling for one ordered pair direction: the clean prediction of
// the attacked model is the (detached) target for the peer's prediction on the
// adversarial image.
template <typename S>
ops::Id<S> div_loss_direction(Tape<S>& t, ops::Id<S> clean_pred_of_attacked,
                              ops::Id<S> peer_pred_on_adv) {
  return soft_cross_entropy(t, t.detach(clean_pred_of_attacked), peer_pred_on_adv);
}

// Scalar components of one training iteration. `total` must recompose from
// the parts.
struct LossBundle {
  double l_sup = 0;
  double l_cot = 0;
  double l_div = 0;
  double lambda_cot = 0;
  double lambda_div = 0;
  double total = 0;

  double recompose() const { return l_sup + lambda_cot * l_cot + lambda_div * l_div; }
};

}  // namespace cotrain
