#pragma once

// Adam with decoupled weight decay. Weight decay is applied directly to the
// parameters (not mixed into the gradient), scaled by the learning rate.

#include "latte/core.hpp"

namespace latte {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(Eigen::Index n, const AdamWConfig& cfg)
      : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw Error::internal("optimizer size mismatch");
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_.array().matrix() + (1.0 - cfg_.beta2) * grad.array().square().matrix();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    if (cfg_.weight_decay != 0.0) params -= (cfg_.lr * cfg_.weight_decay) * params;
    params.array() -=
        cfg_.lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
  }

  int steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_;
  Vec m_;
  Vec v_;
  int t_ = 0;
};

}  // namespace latte
