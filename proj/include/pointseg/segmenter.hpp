#pragma once
// Fusion layers and mask decoder. Each fusion layer runs, in order:
// point-to-patch cross-attention, point self-attention, point temporal
// self-attention, an MLP on the token side, then patch-to-point
// cross-attention. Learnable mask tokens ride with the point tokens
// through every token-side op except temporal attention (they carry no
// trajectory). Every layer snapshot is decoded to a soft mask for deep
// supervision; the upsampling head is shared across layers.

#include <memory>
#include <vector>

#include "pointseg/encoder.hpp"

namespace pointseg::segmenter {

struct FusionConfig {
  int layers = 3;           // N_FL
  std::int64_t classes = 1; // K
  bool use_points = true;
  bool use_mlp = true;
  bool use_point_sa = true;
  bool use_point_tsa = true;

  void validate() const;  // point-token ops require use_points
};

// Frozen tracker outputs consumed by the fusion layers.
struct PointInputs {
  Tensor positions;   // [N,T,2]
  Tensor visibility;  // [N,T] binary
  Tensor tokens;      // [N,T,d_track]
};

struct SegmenterForward {
  std::vector<ag::Var> layer_logits;  // N_FL entries, each [T,K,H,W]
  std::vector<ag::Var> layer_masks;   // sigmoid of the above
};

struct SegmenterOutput {
  std::vector<Tensor> layer_logits;
  std::vector<Tensor> layer_masks;
  const Tensor& final_mask() const { return layer_masks.back(); }
};

class Segmenter {
 public:
  Segmenter(nn::ParamStore& ps, const std::string& prefix,
            const encoder::EncoderConfig& enc_cfg, const FusionConfig& cfg,
            std::int64_t point_token_dim = 0);

  // frames [T,H,W]; points may be null only when !use_points.
  SegmenterForward forward(ag::Tape& t, const Tensor& frames,
                           const PointInputs* points) const;

  SegmenterOutput infer(const Tensor& frames, const PointInputs* points) const;

  const FusionConfig& config() const { return cfg_; }
  const encoder::EncoderConfig& encoder_config() const { return enc_cfg_; }

 private:
  struct FusionLayer {
    nn::AttnBlock point_to_patch;
    nn::AttnBlock point_sa;
    nn::AttnBlock point_tsa;
    nn::MlpBlock mlp;
    nn::AttnBlock patch_to_point;
  };
  struct Upsample {
    nn::Parameter* w = nullptr;
    nn::Parameter* b = nullptr;
  };

  ag::Var decode_masks(ag::Tape& t, const std::vector<ag::Var>& frame_tokens,
                       ag::Var mask_tokens,
                       const std::vector<encoder::ScaleShape>& scales) const;

  FusionConfig cfg_;
  encoder::EncoderConfig enc_cfg_;
  std::unique_ptr<encoder::Encoder> encoder_;
  nn::Linear point_in_;       // tracker token dim -> d
  nn::Parameter* mask_tokens_ = nullptr;  // [K,d]
  std::vector<FusionLayer> fusion_;
  // decoder: scale merge tconvs + head tconvs + mask-token MLP
  nn::LayerNorm decode_ln_, mask_ln_;
  std::vector<Upsample> merge_up_;
  std::vector<Upsample> head_up_;
  std::vector<std::int64_t> head_ch_;
  nn::Linear mask_mlp1_, mask_mlp2_;
};

}  // namespace pointseg::segmenter
