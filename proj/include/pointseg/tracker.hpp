#pragma once
// Point decoder: iterative refinement of point trajectories with a
// visibility head, over its own encoder's patch tokens. The refinement
// keeps the full layer stack (L^1..L^N_pd) for deep supervision and
// exposes final-layer query states as point tokens.

#include <array>
#include <memory>
#include <vector>

#include "pointseg/clip_io.hpp"
#include "pointseg/encoder.hpp"

namespace pointseg::tracker {

struct TrackerConfig {
  int refine_layers = 3;       // N_pd
  double vis_threshold = 0.5;
  std::int64_t grid = 8;       // G for dense seeding
  std::vector<std::array<double, 2>> manual_points;

  void validate() const;
};

// G x G grid centered with half-cell margins, manual points appended.
Tensor seed_points(const TrackerConfig& cfg, std::int64_t h, std::int64_t w);

struct TrackerForward {
  std::vector<ag::Var> layer_positions;  // N_pd entries, each [N,T,2]
  ag::Var visibility_logits;             // [N,T], final layer only
  ag::Var point_tokens;                  // [N,T,d], final-layer query states
};

// Value-domain result for inference and downstream (frozen) consumption.
struct TrackerOutput {
  std::vector<Tensor> layer_positions;
  Tensor visibility_logits;
  Tensor visibility_prob;
  Tensor visibility_binary;  // thresholded
  Tensor point_tokens;
};

struct TrackingLossWeights {
  double visibility = 1.0;
  std::vector<double> layer;  // w_L^n; empty = all 1.0
  bool mask_by_gt_visibility = true;
};

struct TrackingLoss {
  ag::Var total;
  double position_term = 0.0;    // weighted sum of layer L1 terms
  double visibility_term = 0.0;  // weighted CE
  std::vector<double> per_layer;
};

TrackingLoss tracking_loss(const TrackerForward& fwd, const data::TrajectorySet& gt,
                           const TrackingLossWeights& weights);

class Tracker {
 public:
  Tracker(nn::ParamStore& ps, const std::string& prefix,
          const encoder::EncoderConfig& enc_cfg, const TrackerConfig& cfg);

  // frames [T,H,W]; init_points [N,2] at t=0, replicated across frames.
  TrackerForward forward(ag::Tape& t, const Tensor& frames,
                         const Tensor& init_points) const;

  TrackerOutput track(const Tensor& frames, const Tensor& init_points) const;

  const TrackerConfig& config() const { return cfg_; }
  const encoder::Encoder& enc() const { return *encoder_; }
  std::int64_t dim() const { return enc_cfg_.dim; }

 private:
  ag::Var fine_taps(ag::Tape& t, const encoder::PatchTokens& tokens, std::int64_t frame,
                    const Tensor& pts) const;
  ag::Var sample_features(ag::Tape& t, const encoder::PatchTokens& tokens,
                          const Tensor& positions, ag::Var template_taps,
                          const nn::Linear& proj) const;

  struct RefineLayer {
    nn::Linear sample_proj;
    nn::AttnBlock cross;
    nn::AttnBlock temporal;
    nn::MlpBlock mlp;
    nn::LayerNorm delta_ln;
    nn::Linear delta_head;
  };

  TrackerConfig cfg_;
  encoder::EncoderConfig enc_cfg_;
  std::unique_ptr<encoder::Encoder> encoder_;
  nn::Linear init_proj_;
  std::vector<RefineLayer> layers_;
  nn::LayerNorm vis_ln_;
  nn::Linear vis_head_;
};

}  // namespace pointseg::tracker
