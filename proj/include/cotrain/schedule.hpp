#pragma once

#include <cmath>

#include "cotrain/errors.hpp"

namespace cotrain {

// Gaussian ramp-up: 0 until t_ini, exp(-5*(1 - tau)^2) scaled to lambda_max
// until t_end, constant afterwards. t counts completed epochs.
struct RampConfig {
  double lambda_max = 0.0;
  int t_ini = 0;
  int t_end = 1;

  void validate() const {
    if (t_ini >= t_end) throw ConfigError("ramp: t_ini must be < t_end");
    if (lambda_max < 0) throw ConfigError("ramp: lambda_max must be >= 0");
  }
};

inline double ramp(int t, const RampConfig& cfg) {
  cfg.validate();
  if (t < cfg.t_ini) return 0.0;
  if (t >= cfg.t_end) return cfg.lambda_max;
  const double tau =
      static_cast<double>(t - cfg.t_ini) / static_cast<double>(cfg.t_end - cfg.t_ini);
  return cfg.lambda_max * std::exp(-5.0 * (1.0 - tau) * (1.0 - tau));
}

// Step decay: initial_lr * factor^floor(epoch / decay_every).
inline double lr_at(int epoch, double initial_lr, int decay_every, double factor) {
  if (decay_every < 1) throw ConfigError("lr_at: decay_every must be >= 1");
  double lr = initial_lr;
  for (int k = 0; k < epoch / decay_every; ++k) lr *= factor;
  return lr;
}

}  // namespace cotrain
