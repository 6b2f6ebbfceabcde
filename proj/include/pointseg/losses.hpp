#pragma once
// Segmentation losses: layer-weighted soft Dice, trajectory-anchored
// temporal smoothing, and the differentiable bilinear sampler they share.

#include <cstdint>
#include <vector>

#include "pointseg/autodiff.hpp"

namespace pointseg::losses {

struct LossWeights {
  std::vector<double> mask_layer = {0.25, 0.5, 1.0};  // w_M^n
  double dice = 1.0;              // global Dice weight
  double temporal = 100.0;        // global temporal weight w_T
  bool temporal_layer_scaled = true;  // w_T^n = temporal * w_M^n; else uniform w_T
  std::int64_t pair_limit = 0;    // 0 = all T(T-1)/2 frame pairs
  bool visibility_gated = true;   // restrict pair terms to points visible at both frames
  double dice_epsilon = 1.0;
};

// Plain-value bilinear sample of a [H,W] field at sub-pixel (x,y),
// border-clamped. The graph op lives in ag::bilinear.
double bilinear_sample(const Tensor& field, double x, double y);
// Batch convenience: points [M,2] -> M values.
std::vector<double> bilinear_sample(const Tensor& field, const Tensor& points);

// Soft Dice loss: 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps). No threshold.
ag::Var dice_loss(ag::Var pred, const Tensor& gt, double eps = 1.0);

struct MaskLoss {
  ag::Var total;
  std::vector<double> per_layer;  // unweighted per-layer Dice means
};

// layer_masks: N_FL vars of [T,K,H,W] sigmoid masks; gt [T,H,W] binary
// (K=1) or [T,K,H,W]. annotated_frames: empty = all frames carry masks.
MaskLoss mask_loss(const std::vector<ag::Var>& layer_masks, const Tensor& gt,
                   const std::vector<std::int64_t>& annotated_frames,
                   const LossWeights& weights);

struct TemporalLoss {
  ag::Var total;               // undefined when no pairs contributed (value 0)
  double value = 0.0;
  std::int64_t pairs_used = 0;  // frame pairs included per layer
};

// Eq.-style pairwise smoothing: for every frame pair (t1<t2) sample each
// layer's mask at the tracked points of the two frames and penalize the
// squared difference. Normalized per included (pair, point, class)
// sample. Trajectories enter as constants (the tracker is frozen).
TemporalLoss temporal_loss(const std::vector<ag::Var>& layer_masks,
                           const Tensor& trajectories, const Tensor& visibility,
                           const LossWeights& weights, std::uint64_t pair_seed = 0);

// Joint-training variant: trajectory vars keep their graph, so gradients
// also flow into the tracker through the sampling locations.
TemporalLoss temporal_loss_joint(const std::vector<ag::Var>& layer_masks,
                                 const std::vector<ag::Var>& trajectory_vars,
                                 const Tensor& visibility, const LossWeights& weights,
                                 std::uint64_t pair_seed = 0);

}  // namespace pointseg::losses
