#include "pointseg/optimizer.hpp"

#include <cmath>

namespace pointseg::train {

AdamW::AdamW(nn::ParamStore& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {
  if (cfg_.lr <= 0.0 || cfg_.weight_decay < 0.0)
    throw ConfigError("optimizer: rates must be positive");
  store_.for_each([&](nn::Parameter& p) {
    state_.emplace(p.name, Slot{Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())});
  });
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  store_.for_each([&](nn::Parameter& p) {
    if (!p.trainable) return;
    Slot& s = state_.at(p.name);
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p.value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * p.value[i]);
    }
  });
}

void AdamW::scale_grads(double s) {
  store_.for_each([&](nn::Parameter& p) {
    if (!p.trainable) return;
    for (std::int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] *= s;
  });
}

double AdamW::clip_global_norm(double max_norm) {
  double sq = 0.0;
  store_.for_each([&](nn::Parameter& p) {
    if (!p.trainable) return;
    for (std::int64_t i = 0; i < p.grad.numel(); ++i) sq += p.grad[i] * p.grad[i];
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    scale_grads(s);
  }
  return norm;
}

}  // namespace pointseg::train
