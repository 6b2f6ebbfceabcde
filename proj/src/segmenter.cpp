#include "pointseg/segmenter.hpp"

#include <cmath>

namespace pointseg::segmenter {

using ag::Var;

void FusionConfig::validate() const {
  if (layers < 1) throw ConfigError("fusion: N_FL must be >= 1");
  if (classes < 1) throw ConfigError("fusion: class count K must be >= 1");
  if ((use_point_sa || use_point_tsa) && !use_points)
    throw ConfigError(
        "fusion: point self-attention toggles require use_points (toggle inconsistency)");
}

Segmenter::Segmenter(nn::ParamStore& ps, const std::string& prefix,
                     const encoder::EncoderConfig& enc_cfg, const FusionConfig& cfg,
                     std::int64_t point_token_dim)
    : cfg_(cfg), enc_cfg_(enc_cfg) {
  cfg_.validate();
  encoder_ = std::make_unique<encoder::Encoder>(ps, prefix + ".encoder", enc_cfg);
  const std::int64_t d = enc_cfg_.dim;
  if (point_token_dim == 0) point_token_dim = d;
  point_in_ = nn::Linear::create(ps, prefix + ".point_in", point_token_dim, d);
  mask_tokens_ = &ps.create(prefix + ".mask_tokens", Shape{cfg_.classes, d},
                            nn::Init::trunc_normal);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string base = prefix + ".fusion" + std::to_string(l);
    FusionLayer fl;
    fl.point_to_patch = nn::AttnBlock::create(ps, base + ".p2f", d, enc_cfg_.heads);
    if (cfg_.use_point_sa)
      fl.point_sa = nn::AttnBlock::create(ps, base + ".sa", d, enc_cfg_.heads);
    if (cfg_.use_point_tsa)
      fl.point_tsa = nn::AttnBlock::create(ps, base + ".tsa", d, enc_cfg_.heads);
    if (cfg_.use_mlp) fl.mlp = nn::MlpBlock::create(ps, base + ".mlp", d, 2 * d);
    fl.patch_to_point = nn::AttnBlock::create(ps, base + ".f2p", d, enc_cfg_.heads);
    fusion_.push_back(fl);
  }

  // Shared mask decoder. Coarse-to-fine merge across scales, then a
  // transposed-conv head from the finest stride to full resolution.
  auto up_layer = [&](const std::string& name, std::int64_t cin, std::int64_t cout) {
    Upsample u;
    u.w = &ps.create(name + ".weight", Shape{cin, cout, 2, 2}, nn::Init::fan_in_uniform);
    u.b = &ps.create(name + ".bias", Shape{cout}, nn::Init::zeros);
    return u;
  };
  for (std::size_t i = 0; i + 1 < enc_cfg_.strides.size(); ++i)
    merge_up_.push_back(up_layer(prefix + ".decode.merge" + std::to_string(i), d, d));
  std::int64_t stages = 0;
  for (std::int64_t s = enc_cfg_.strides.front(); s > 1; s /= 2) {
    if (s % 2 != 0) throw ConfigError("segmenter: strides must be powers of two");
    ++stages;
  }
  std::int64_t ch = d;
  for (std::int64_t i = 0; i < stages; ++i) {
    const std::int64_t next = std::max<std::int64_t>(8, ch / 2);
    head_up_.push_back(up_layer(prefix + ".decode.head" + std::to_string(i), ch, next));
    head_ch_.push_back(next);
    ch = next;
  }
  decode_ln_ = nn::LayerNorm::create(ps, prefix + ".decode.ln", d);
  mask_ln_ = nn::LayerNorm::create(ps, prefix + ".decode.mask_ln", d);
  mask_mlp1_ = nn::Linear::create(ps, prefix + ".decode.mask_mlp1", d, d);
  mask_mlp2_ = nn::Linear::create(ps, prefix + ".decode.mask_mlp2", d, ch);
}

Var Segmenter::decode_masks(ag::Tape& t, const std::vector<ag::Var>& frame_tokens,
                            Var mask_tokens,
                            const std::vector<encoder::ScaleShape>& scales) const {
  const std::int64_t T = static_cast<std::int64_t>(frame_tokens.size());
  const std::int64_t d = enc_cfg_.dim;
  const std::int64_t K = cfg_.classes;

  // Tokens -> per-scale grids [T,d,H_s,W_s], coarse-to-fine merge.
  // Normalized at entry so the decoder operates on unit-scale features.
  std::vector<Var> grids;
  for (std::size_t si = 0; si < scales.size(); ++si) {
    std::int64_t start = 0;
    for (std::size_t j = 0; j < si; ++j) start += scales[j].count();
    std::vector<Var> per_frame;
    for (std::int64_t f = 0; f < T; ++f) {
      Var tok = ag::slice(frame_tokens[static_cast<std::size_t>(f)], 0, start,
                          scales[si].count());
      tok = decode_ln_(t, tok);
      per_frame.push_back(ag::reshape(ag::permute(tok, {1, 0}),
                                      Shape{1, d, scales[si].h, scales[si].w}));
    }
    grids.push_back(ag::concat(per_frame, 0));  // [T,d,H_s,W_s]
  }

  Var x = grids.back();
  for (std::size_t i = merge_up_.size(); i-- > 0;) {
    const Upsample& u = merge_up_[i];
    x = ag::tconv2x(x, nn::pvar(t, *u.w), nn::pvar(t, *u.b));
    x = ag::add(x, grids[i]);
  }
  for (std::size_t i = 0; i < head_up_.size(); ++i) {
    const Upsample& u = head_up_[i];
    x = ag::tconv2x(x, nn::pvar(t, *u.w), nn::pvar(t, *u.b));
    if (i + 1 < head_up_.size()) x = ag::relu(x);
  }
  // x: [T, d', H, W]
  const std::int64_t dp = head_ch_.empty() ? d : head_ch_.back();
  const std::int64_t H = x.dim(2), W = x.dim(3);

  // mask tokens -> R^{d'} via MLP, then per-pixel inner product. The
  // fixed gain puts freshly initialized logits at a trainable scale.
  Var m = mask_mlp2_(t, ag::relu(mask_mlp1_(t, mask_ln_(t, mask_tokens))));  // [T*K, d']
  m = ag::reshape(m, Shape{T, K, dp});
  Var feat = ag::reshape(x, Shape{T, dp, H * W});
  Var logits = ag::scale(ag::matmul(m, feat), 8.0);  // [T,K,H*W]
  return ag::reshape(logits, Shape{T, K, H, W});
}

SegmenterForward Segmenter::forward(ag::Tape& t, const Tensor& frames,
                                    const PointInputs* points) const {
  const std::int64_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  const std::int64_t d = enc_cfg_.dim;
  const std::int64_t K = cfg_.classes;
  if (cfg_.use_points && points == nullptr)
    throw ConfigError("segmenter: point inputs required when use_points is on");

  const encoder::PatchTokens tokens = encoder_->forward(t, frames);
  const std::int64_t n_tok = tokens.count();

  // Patch tokens and their positional encodings, frames batched.
  Var patches;
  {
    std::vector<Var> per_frame;
    for (std::int64_t f = 0; f < T; ++f)
      per_frame.push_back(
          ag::reshape(tokens.tokens[static_cast<std::size_t>(f)], Shape{1, n_tok, d}));
    patches = ag::concat(per_frame, 0);
  }
  Tensor patch_pe(Shape{T, n_tok, d});
  for (std::int64_t f = 0; f < T; ++f)
    for (std::int64_t i = 0; i < n_tok * d; ++i)
      patch_pe[f * n_tok * d + i] = tokens.posenc[i];

  // Token side: [T, N+K, d]; mask tokens are the trailing K rows.
  std::int64_t N = 0;
  Var tokset;
  Tensor tok_pe;  // positional encodings: tracked positions for points, zeros for mask tokens
  if (cfg_.use_points) {
    N = points->tokens.dim(0);
    Var pt = point_in_(t, t.leaf(points->tokens));      // [N,T,d]
    pt = ag::permute(pt, {1, 0, 2});                    // [T,N,d]
    Var mt = nn::pvar(t, *mask_tokens_);                // [K,d]
    std::vector<Var> reps;
    for (std::int64_t f = 0; f < T; ++f) reps.push_back(ag::reshape(mt, Shape{1, K, d}));
    Var mts = ag::concat(reps, 0);  // [T,K,d]
    tokset = ag::concat({pt, mts}, 1);

    tok_pe = Tensor(Shape{T, N + K, d});
    Tensor flat = points->positions.reshaped(Shape{N * T, 2});
    Tensor pe = encoder::posenc_points(flat, H, W, d);  // rows ordered [N,T]
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t f = 0; f < T; ++f)
        for (std::int64_t j = 0; j < d; ++j)
          tok_pe.at({f, i, j}) = pe[(i * T + f) * d + j];
  } else {
    Var mt = nn::pvar(t, *mask_tokens_);
    std::vector<Var> reps;
    for (std::int64_t f = 0; f < T; ++f) reps.push_back(ag::reshape(mt, Shape{1, K, d}));
    tokset = ag::concat(reps, 0);
    tok_pe = Tensor(Shape{T, K, d});
  }

  const Tensor time_pe = encoder::posenc_time(T, d);

  SegmenterForward out;
  for (const FusionLayer& fl : fusion_) {
    // 1. point/mask tokens gather appearance from patches
    tokset = fl.point_to_patch(t, tokset, patches, t.leaf(tok_pe), t.leaf(patch_pe));
    // 2. within-frame exchange among tokens
    if (cfg_.use_point_sa && cfg_.use_points)
      tokset = fl.point_sa(t, tokset, tokset, t.leaf(tok_pe), t.leaf(tok_pe));
    // 3. temporal attention along each point's trajectory (points only)
    if (cfg_.use_point_tsa && cfg_.use_points && N > 0) {
      Var pts = ag::slice(tokset, 1, 0, N);              // [T,N,d]
      Var rest = ag::slice(tokset, 1, N, K);             // mask tokens stay frame-local
      Var by_point = ag::permute(pts, {1, 0, 2});        // [N,T,d]
      Tensor tpe(Shape{N, T, d});
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t f = 0; f < T; ++f)
          for (std::int64_t j = 0; j < d; ++j) tpe.at({i, f, j}) = time_pe[f * d + j];
      by_point = fl.point_tsa(t, by_point, by_point, t.leaf(tpe), t.leaf(tpe));
      tokset = ag::concat({ag::permute(by_point, {1, 0, 2}), rest}, 1);
    }
    // 4. MLP on the token side
    if (cfg_.use_mlp) tokset = fl.mlp(t, tokset);
    // 5. motion-aware tokens feed back into the patches
    patches = fl.patch_to_point(t, patches, tokset, t.leaf(patch_pe), t.leaf(tok_pe));

    // snapshot -> masks
    std::vector<Var> frame_tokens;
    for (std::int64_t f = 0; f < T; ++f)
      frame_tokens.push_back(ag::reshape(ag::slice(patches, 0, f, 1), Shape{n_tok, d}));
    Var mask_rows = ag::reshape(ag::slice(tokset, 1, N, K), Shape{T * K, d});
    Var logits = decode_masks(t, frame_tokens, mask_rows, tokens.scales);
    out.layer_logits.push_back(logits);
    out.layer_masks.push_back(ag::sigmoid(logits));
  }
  return out;
}

SegmenterOutput Segmenter::infer(const Tensor& frames, const PointInputs* points) const {
  nn::NoGradGuard ng;
  ag::Tape tape;
  SegmenterForward fwd = forward(tape, frames, points);
  SegmenterOutput out;
  for (const Var& v : fwd.layer_logits) out.layer_logits.push_back(v.val().clone());
  for (const Var& v : fwd.layer_masks) out.layer_masks.push_back(v.val().clone());
  return out;
}

}  // namespace pointseg::segmenter
