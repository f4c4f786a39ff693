#pragma once

#include <cmath>
#include <vector>

#include "xem/nn/layers.hpp"

namespace xem::nn {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;  // GAN-friendly default; seg pre-training overrides to 0.9
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // classic L2-into-gradient semantics
};

class Adam {
 public:
  Adam(std::vector<ParamRef> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].w->v.size(), 0.0);
      v_[i].assign(params_[i].w->v.size(), 0.0);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

  void zero_grad() {
    for (auto& p : params_) p.g->zero();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i].w->v;
      auto& g = params_[i].g->v;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double grad = static_cast<double>(g[j]) + cfg_.weight_decay * w[j];
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * grad;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * grad * grad;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        w[j] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  std::vector<ParamRef> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace xem::nn
