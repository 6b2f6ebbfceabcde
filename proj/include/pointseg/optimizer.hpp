#pragma once
// Decoupled-weight-decay adaptive optimizer (AdamW) over a ParamStore.
// State iterates in parameter-name order, so updates are deterministic.

#include <map>
#include <string>

#include "pointseg/nn.hpp"

namespace pointseg::train {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamW {
 public:
  AdamW(nn::ParamStore& store, AdamWConfig cfg);

  // Applies one update from the accumulated gradients of trainable
  // parameters. Gradients are not cleared.
  void step();

  // Scales all trainable gradients (gradient-accumulation averaging).
  void scale_grads(double s);
  // Global-norm gradient clipping; returns the pre-clip norm.
  double clip_global_norm(double max_norm);

  std::int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  struct Slot {
    Tensor m, v;
  };
  std::map<std::string, Slot>& state() { return state_; }
  void set_step_count(std::int64_t s) { step_ = s; }

 private:
  nn::ParamStore& store_;
  AdamWConfig cfg_;
  std::map<std::string, Slot> state_;
  std::int64_t step_ = 0;
};

}  // namespace pointseg::train
