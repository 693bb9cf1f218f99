#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cotrain/tape.hpp"
#include "cotrain/tensor.hpp"

namespace testutil {

using cotrain::Tape;
using cotrain::Tensor;
using Id = cotrain::Tape<double>::Id;

// Central finite-difference gradient check in double. `build` reconstructs
// the graph from leaf ids and returns a scalar loss id; any randomness inside
// (dropout masks) must be re-seeded per call so repeated forwards match.
// Returns the worst relative error across all coordinates of all inputs.
inline double op_gradcheck(std::vector<Tensor<double>*> inputs,
                           const std::function<Id(Tape<double>&, const std::vector<Id>&)>& build,
                           double h = 1e-6) {
  for (auto* in : inputs) {
    in->set_requires_grad(true);
    in->zero_grad();
  }
  auto forward = [&]() {
    Tape<double> t;
    std::vector<Id> ids;
    ids.reserve(inputs.size());
    for (auto* in : inputs) ids.push_back(t.leaf(*in));
    return t.val(build(t, ids)).data[0];
  };
  {
    Tape<double> t;
    std::vector<Id> ids;
    for (auto* in : inputs) ids.push_back(t.leaf(*in));
    t.backward(build(t, ids));
  }
  double worst = 0;
  for (auto* in : inputs) {
    for (std::size_t i = 0; i < in->data.size(); ++i) {
      const double orig = in->data[i];
      in->data[i] = orig + h;
      const double up = forward();
      in->data[i] = orig - h;
      const double down = forward();
      in->data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = in->grad[i];
      // the floor keeps FD roundoff on near-zero gradients from dominating
      // (1e-9 absolute at the floor, far below any wiring bug)
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

// Random simplex over c classes with entries bounded away from zero.
template <typename Rng>
std::vector<double> random_simplex(int c, Rng& rng, double floor = 1e-3) {
  std::vector<double> p(c);
  std::uniform_real_distribution<double> u(floor, 1.0);
  double sum = 0;
  for (auto& v : p) {
    v = u(rng);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

// Fills a [N,C,H,W] tensor with independent random per-pixel simplices.
template <typename Rng>
cotrain::Tensor<double> random_prob_map(int n, int c, int h, int w, Rng& rng,
                                        double floor = 1e-3) {
  cotrain::Tensor<double> out(cotrain::Shape{n, c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      auto simplex = random_simplex(c, rng, floor);
      for (int ch = 0; ch < c; ++ch)
        out.data[(static_cast<std::size_t>(i) * c + ch) * plane + p] = simplex[ch];
    }
  return out;
}

}  // namespace testutil

#include "cotrain/adam.hpp"
#include "cotrain/data.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/segnet.hpp"

namespace testutil {

// A small segmentation model supervised-trained for a few steps on tiny
// synthetic images; several adversarial oracles need a model whose gradients
// actually point somewhere.
template <typename S>
struct ToySetup {
  cotrain::SynthSpec spec;
  cotrain::SegModel<S> model;
  std::vector<cotrain::SynthImage<S>> samples;
};

// In-memory dataset split over tiny synthetic images.
template <typename S>
cotrain::DatasetSplit<S> make_memory_split(const cotrain::SynthSpec& spec, int n_labeled,
                                           int n_unlabeled, int n_val) {
  cotrain::DatasetSplit<S> ds;
  std::uint64_t idx = 0;
  for (int i = 0; i < n_labeled; ++i, ++idx) {
    auto s = cotrain::synth_image<S>(spec, idx);
    ds.labeled.images.push_back(std::move(s.image));
    ds.labeled.masks.push_back(std::move(s.mask));
  }
  for (int i = 0; i < n_unlabeled; ++i, ++idx)
    ds.unlabeled.images.push_back(cotrain::synth_image<S>(spec, idx).image);
  for (int i = 0; i < n_val; ++i, ++idx) {
    auto s = cotrain::synth_image<S>(spec, idx);
    ds.val.images.push_back(std::move(s.image));
    ds.val.masks.push_back(std::move(s.mask));
  }
  return ds;
}

template <typename S>
ToySetup<S> make_trained_toy_model(std::uint64_t seed, int steps, int image_size = 16,
                                   int num_images = 12) {
  cotrain::SynthSpec spec;
  spec.image_size = image_size;
  spec.num_classes = 4;
  spec.noise_sigma = 0.05;
  spec.seed = seed;
  cotrain::SegModelConfig mc;
  mc.base_width = 4;
  mc.depth = 2;
  mc.num_classes = 4;
  mc.dropout_rate = 0.0;
  ToySetup<S> setup{spec, cotrain::SegModel<S>(mc, seed), {}};
  for (int i = 0; i < num_images; ++i)
    setup.samples.push_back(cotrain::synth_image<S>(spec, static_cast<std::uint64_t>(i)));
  cotrain::AdamState<S> adam;
  for (int step = 0; step < steps; ++step) {
    const auto& sample = setup.samples[step % setup.samples.size()];
    cotrain::Tensor<S> x(cotrain::Shape{1, 1, image_size, image_size});
    x.data = sample.image.data;
    cotrain::Tensor<S> target = cotrain::one_hot<S>(sample.mask.labels, 1, 4, image_size,
                                                    image_size);
    cotrain::Tape<S> t;
    auto loss = cotrain::sup_loss(t, setup.model.forward(t, t.constant(x), true), target);
    t.backward(loss);
    adam.step(setup.model.parameters());
    setup.model.zero_grad();
  }
  return setup;
}

}  // namespace testutil
