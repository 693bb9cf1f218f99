#pragma once

#include <cmath>
#include <iostream>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/segnet.hpp"
#include "cotrain/tape.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

struct AdvConfig {
  double eps_fgsm = 0.03;  // L-inf budget, labeled images
  double eps_vat = 10.0;   // L2 budget over the whole image tensor, unlabeled
  double xi = 1e-6;        // finite-difference scale for the power iteration
  int n_power = 1;

  void validate() const {
    if (eps_fgsm <= 0 || eps_vat <= 0 || xi <= 0 || n_power <= 0)
      throw ConfigError("adv: all parameters must be strictly positive");
  }
};

namespace detail {

template <typename S>
S sign_of(S v) {
  return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
}

// Normalizes each image of a [N,C,H,W] gradient batch to unit L2. Returns
// false for images whose gradient is exactly zero (left as zero).
template <typename S>
std::vector<bool> normalize_per_image(Tensor<S>& g) {
  const int n = g.shape[0];
  const std::size_t stride = g.numel() / static_cast<std::size_t>(n);
  std::vector<bool> ok(n, true);
  for (int i = 0; i < n; ++i) {
    double norm2 = 0;
    S* p = g.data.data() + static_cast<std::size_t>(i) * stride;
    for (std::size_t j = 0; j < stride; ++j) norm2 += static_cast<double>(p[j]) * p[j];
    if (norm2 <= 0) {
      ok[i] = false;
      continue;
    }
    const S inv = static_cast<S>(1.0 / std::sqrt(norm2));
    for (std::size_t j = 0; j < stride; ++j) p[j] *= inv;
  }
  return ok;
}

}  // namespace detail

// Gradient of the supervised cross-entropy w.r.t. the input batch, evaluated
// with frozen parameters and dropout off.
template <typename S>
Tensor<S> input_gradient(SegModel<S>& model, const Tensor<S>& images, const Tensor<S>& onehot) {
  Tape<S> t;
  Tensor<S> x = images;
  x.set_requires_grad(true);
  auto in = t.leaf(x);
  auto pred = model.forward(t, in, /*train=*/false, /*frozen=*/true);
  t.backward(sup_loss(t, pred, onehot));
  Tensor<S> g(images.shape);
  g.data = x.grad;
  return g;
}

// Fast gradient sign method: x + eps * sign(grad_x CE(f(x), y)). The output is
// not clamped to the valid pixel range.
template <typename S>
Tensor<S> fgsm(SegModel<S>& model, const Tensor<S>& images, const Tensor<S>& onehot, double eps) {
  if (onehot.shape.size() != 4 || images.shape.size() != 4 ||
      onehot.shape[0] != images.shape[0] || onehot.shape[2] != images.shape[2] ||
      onehot.shape[3] != images.shape[3])
    throw ContractError("fgsm: labels missing or misshaped for image batch");
  Tensor<S> g = input_gradient(model, images, onehot);
  Tensor<S> adv = images;
  const S e = static_cast<S>(eps);
  for (std::size_t i = 0; i < adv.data.size(); ++i)
    adv.data[i] += e * detail::sign_of(g.data[i]);
  return adv;
}

// FGSM targeted at the model's own hard prediction; label-free variant used
// where no ground truth exists.
template <typename S>
Tensor<S> fgsm_self_targeted(SegModel<S>& model, const Tensor<S>& images, double eps) {
  Tensor<S> p = model.predict(images);
  const int n = p.shape[0], c = p.shape[1];
  const std::size_t plane = static_cast<std::size_t>(p.shape[2]) * p.shape[3];
  Tensor<S> onehot(p.shape);
  for (int i = 0; i < n; ++i)
    for (std::size_t px = 0; px < plane; ++px) {
      int best = 0;
      for (int ch = 1; ch < c; ++ch)
        if (p.data[(static_cast<std::size_t>(i) * c + ch) * plane + px] >
            p.data[(static_cast<std::size_t>(i) * c + best) * plane + px])
          best = ch;
      onehot.data[(static_cast<std::size_t>(i) * c + best) * plane + px] = S(1);
    }
  return fgsm(model, images, onehot, eps);
}

// Virtual adversarial perturbation via power iteration: starting from a random
// unit direction d, iterate d <- normalize(grad_r KL(f(x) || f(x + xi*d))) and
// return x + eps*d. Images with a degenerate zero gradient are returned
// unchanged (with a warning).
template <typename S>
Tensor<S> vat_perturbation(SegModel<S>& model, const Tensor<S>& images, double eps, double xi,
                           int n_power, Rng& rng) {
  Tensor<S> base_pred = model.predict(images);  // detached by construction
  Tensor<S> d = randn<S>(images.shape, rng);
  detail::normalize_per_image(d);
  std::vector<bool> ok(images.shape[0], true);
  for (int it = 0; it < n_power; ++it) {
    Tensor<S> x_pert = images;
    const S xi_s = static_cast<S>(xi);
    for (std::size_t i = 0; i < x_pert.data.size(); ++i) x_pert.data[i] += xi_s * d.data[i];
    x_pert.set_requires_grad(true);
    Tape<S> t;
    auto in = t.leaf(x_pert);
    auto pred = model.forward(t, in, /*train=*/false, /*frozen=*/true);
    t.backward(kl_divergence(t, t.constant(base_pred), pred));
    d.data = x_pert.grad;
    ok = detail::normalize_per_image(d);
  }
  Tensor<S> adv = images;
  const S e = static_cast<S>(eps);
  const std::size_t stride = images.numel() / static_cast<std::size_t>(images.shape[0]);
  for (int i = 0; i < images.shape[0]; ++i) {
    if (!ok[i]) {
      std::cerr << "[cotrain] warning: degenerate VAT gradient for image " << i
                << "; returning it unperturbed\n";
      continue;
    }
    for (std::size_t j = 0; j < stride; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * stride + j;
      adv.data[idx] += e * d.data[idx];
    }
  }
  return adv;
}

// Adversarial examples for one model's iteration batches: FGSM on the labeled
// images (ground truth available), VAT on the unlabeled ones.
template <typename S>
struct AdvBatch {
  Tensor<S> labeled;
  Tensor<S> unlabeled;
};

template <typename S>
AdvBatch<S> generate_for_batch(SegModel<S>& model, const Tensor<S>& labeled_images,
                               const Tensor<S>& labeled_onehot, const Tensor<S>& unlabeled_images,
                               const AdvConfig& cfg, Rng& vat_rng) {
  cfg.validate();
  AdvBatch<S> out;
  if (labeled_images.numel() > 0)
    out.labeled = fgsm(model, labeled_images, labeled_onehot, cfg.eps_fgsm);
  if (unlabeled_images.numel() > 0)
    out.unlabeled =
        vat_perturbation(model, unlabeled_images, cfg.eps_vat, cfg.xi, cfg.n_power, vat_rng);
  return out;
}

}  // namespace cotrain
