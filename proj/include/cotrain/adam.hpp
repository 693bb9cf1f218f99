#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/tensor.hpp"

namespace cotrain {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// One first/second moment pair per parameter tensor, in registration order.
template <typename S>
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  // Applies one Adam update to every tensor in `params`. Weight decay enters
  // as an L2 term added to the gradient before the moment updates.
  void step(const std::vector<Tensor<S>*>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i]->numel(), S(0));
        v_[i].assign(params[i]->numel(), S(0));
      }
    }
    if (m_.size() != params.size()) throw ContractError("adam: parameter list changed size");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = *params[i];
      if (!p.requires_grad || p.grad.size() != p.data.size())
        throw ContractError("adam: parameter has no gradient");
      if (m_[i].size() != p.numel()) throw ContractError("adam: moment shape mismatch");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.data.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]) +
                         cfg_.weight_decay * static_cast<double>(p.data[j]);
        const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * g;
        const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * g * g;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p.data[j] = static_cast<S>(static_cast<double>(p.data[j]) -
                                   cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
};

}  // namespace cotrain
