#pragma once
// Convolutional backbone + transformer encoder producing multi-scale
// patch tokens per frame. Frames are processed independently (the batch
// dimension is time); all temporal mixing happens downstream.

#include <string>
#include <vector>

#include "pointseg/nn.hpp"

namespace pointseg::encoder {

enum class AttentionMode { deformable, dense };
enum class Backbone { small_residual, residual50 };

struct EncoderConfig {
  std::int64_t dim = 48;           // token dim d
  std::vector<std::int64_t> strides = {8, 16, 32};
  int layers = 2;                  // transformer encoder layers
  int heads = 4;
  AttentionMode attention = AttentionMode::deformable;
  std::int64_t sampling_points = 4;  // P, deformable mode only
  Backbone backbone = Backbone::small_residual;
  // Width multiplier for the residual-50 backbone; 64 is paper scale.
  std::int64_t resnet_base_width = 64;

  void validate() const;
};

// Sinusoidal encodings. d must be divisible by 4 (2D) or 2 (time).
Tensor posenc_2d(std::int64_t h, std::int64_t w, std::int64_t d);
// Continuous positions [M,2] (x,y pixels) normalized by frame size.
Tensor posenc_points(const Tensor& pts, std::int64_t frame_h, std::int64_t frame_w,
                     std::int64_t d);
Tensor posenc_time(std::int64_t t_len, std::int64_t d);

struct ScaleShape {
  std::int64_t stride, h, w;
  std::int64_t count() const { return h * w; }
};

// Per-clip token bundle. tokens[t] is [N_tok, d] with scales concatenated
// coarse-to-fine in config order; posenc rows align with token rows.
// `fine` is the first downsampling stage's feature grid, kept for
// sub-pixel localization by the point decoder.
struct PatchTokens {
  std::vector<ag::Var> tokens;      // one per frame
  std::vector<ScaleShape> scales;
  Tensor posenc;                    // [N_tok, d], constant
  std::int64_t dim = 0;
  std::vector<ag::Var> fine;        // per frame [C_f, H_f, W_f]
  std::int64_t fine_channels = 0;
  std::int64_t fine_stride = 0;

  std::int64_t count() const;
  // Tokens of one scale as a spatial grid [d, H_s, W_s].
  ag::Var scale_grid(ag::Tape& t, std::int64_t frame, std::size_t scale_idx) const;
};

// Expected token count for a (H, W, cfg) triple; throws ConfigError when
// dims are not divisible by the strides.
std::vector<ScaleShape> token_layout(std::int64_t h, std::int64_t w,
                                     const EncoderConfig& cfg);

// Multi-scale deformable attention. queries [L,d]; grids: per scale
// [d,H_s,W_s] value features; ref_norm [L,2] in [0,1]^2.
struct DeformAttn {
  std::int64_t dim = 0, points = 0;
  int heads = 1;
  std::size_t n_scales = 0;
  nn::Linear value_proj, offset_head, weight_head, out_proj;
  static DeformAttn create(nn::ParamStore& ps, const std::string& name,
                           std::int64_t dim, int heads, std::size_t n_scales,
                           std::int64_t points);
  ag::Var operator()(ag::Tape& t, ag::Var queries,
                     const std::vector<ag::Var>& scale_grids,
                     const std::vector<ScaleShape>& scales,
                     const Tensor& ref_norm) const;
};

class Encoder {
 public:
  Encoder(nn::ParamStore& ps, const std::string& prefix, EncoderConfig cfg);

  // frames [T,H,W] in [0,1]; returns per-frame multi-scale tokens.
  PatchTokens forward(ag::Tape& t, const Tensor& frames) const;
  // Graph-input variant ([T,1,H,W]); used to probe input gradients.
  PatchTokens forward(ag::Tape& t, ag::Var frames) const;

  const EncoderConfig& config() const { return cfg_; }
  // Channel count of the fine localization grid (first downsampling stage).
  std::int64_t fine_channels() const;

 private:
  struct ConvLayer {
    nn::Parameter* w = nullptr;
    nn::Parameter* b = nullptr;
    std::int64_t stride = 1, pad = 1;
  };
  struct ResBlock {
    ConvLayer c1, c2;
  };
  struct Stage {
    ConvLayer down;
    std::vector<ResBlock> blocks;
    bool tap = false;  // emits tokens at this stride
  };
  struct BottleneckBlock {
    ConvLayer c1, c2, c3;   // 1x1, 3x3, 1x1
    ConvLayer proj;         // 1x1 shortcut when shape changes
    bool has_proj = false;
  };

  ag::Var conv(ag::Tape& t, ag::Var x, const ConvLayer& l) const;
  ag::Var res_block(ag::Tape& t, ag::Var x, const ResBlock& b) const;
  ag::Var bottleneck(ag::Tape& t, ag::Var x, const BottleneckBlock& b) const;
  std::vector<ag::Var> backbone_forward(ag::Tape& t, ag::Var x, ag::Var* fine) const;

  EncoderConfig cfg_;
  std::string prefix_;
  // small residual backbone
  ConvLayer stem_;
  std::vector<Stage> stages_;
  // residual-50 backbone
  ConvLayer r50_stem_;
  std::vector<std::vector<BottleneckBlock>> r50_stages_;
  // shared: 1x1 projections to d for the last `strides.size()` stages
  std::vector<ConvLayer> proj_;
  // transformer encoder
  struct TxLayer {
    nn::LayerNorm ln;
    DeformAttn deform;
    nn::Mha dense;
    nn::MlpBlock mlp;
  };
  std::vector<TxLayer> tx_;
};

}  // namespace pointseg::encoder
