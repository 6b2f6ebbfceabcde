#include "pointseg/tracker.hpp"

#include <cmath>

namespace pointseg::tracker {

using ag::Var;

void TrackerConfig::validate() const {
  if (refine_layers < 1) throw ConfigError("tracker: refinement layers must be >= 1");
  if (grid < 1) throw ConfigError("tracker: grid size must be >= 1");
  if (!(vis_threshold > 0.0 && vis_threshold < 1.0))
    throw ConfigError("tracker: visibility threshold must lie in (0,1)");
}

Tensor seed_points(const TrackerConfig& cfg, std::int64_t h, std::int64_t w) {
  cfg.validate();
  const std::int64_t g = cfg.grid;
  const std::int64_t n = g * g + static_cast<std::int64_t>(cfg.manual_points.size());
  Tensor pts(Shape{n, 2});
  std::int64_t row = 0;
  for (std::int64_t gy = 0; gy < g; ++gy)
    for (std::int64_t gx = 0; gx < g; ++gx, ++row) {
      pts[row * 2 + 0] = (static_cast<double>(gx) + 0.5) * static_cast<double>(w) / static_cast<double>(g);
      pts[row * 2 + 1] = (static_cast<double>(gy) + 0.5) * static_cast<double>(h) / static_cast<double>(g);
    }
  for (const auto& mp : cfg.manual_points) {
    if (mp[0] < 0.0 || mp[0] > static_cast<double>(w - 1) || mp[1] < 0.0 ||
        mp[1] > static_cast<double>(h - 1))
      throw ConfigError("tracker: manual point (" + std::to_string(mp[0]) + "," +
                        std::to_string(mp[1]) + ") lies outside the frame");
    pts[row * 2 + 0] = mp[0];
    pts[row * 2 + 1] = mp[1];
    ++row;
  }
  return pts;
}

Tracker::Tracker(nn::ParamStore& ps, const std::string& prefix,
                 const encoder::EncoderConfig& enc_cfg, const TrackerConfig& cfg)
    : cfg_(cfg), enc_cfg_(enc_cfg) {
  cfg_.validate();
  encoder_ = std::make_unique<encoder::Encoder>(ps, prefix + ".encoder", enc_cfg);
  const std::int64_t d = enc_cfg_.dim;
  const auto S = static_cast<std::int64_t>(enc_cfg_.strides.size());
  const std::int64_t fine_ch = encoder_->fine_channels();
  const std::int64_t tap_dim = 2 * 9 * fine_ch + S * d;  // current + template + scale taps
  init_proj_ = nn::Linear::create(ps, prefix + ".init_proj", tap_dim, d);
  for (int n = 0; n < cfg_.refine_layers; ++n) {
    const std::string base = prefix + ".refine" + std::to_string(n);
    RefineLayer layer;
    layer.sample_proj = nn::Linear::create(ps, base + ".sample_proj", tap_dim, d);
    layer.cross = nn::AttnBlock::create(ps, base + ".cross", d, enc_cfg_.heads);
    layer.temporal = nn::AttnBlock::create(ps, base + ".temporal", d, enc_cfg_.heads);
    layer.mlp = nn::MlpBlock::create(ps, base + ".mlp", d, 2 * d);
    // Normalized inputs keep the zero-initialized delta head reachable at
    // small learning rates; refinement starts from the identity.
    layer.delta_ln = nn::LayerNorm::create(ps, base + ".delta_ln", d);
    layer.delta_head = nn::Linear::create(ps, base + ".delta", d, 2, nn::Init::zeros);
    layers_.push_back(layer);
  }
  vis_ln_ = nn::LayerNorm::create(ps, prefix + ".vis_ln", d);
  vis_head_ = nn::Linear::create(ps, prefix + ".vis_head", d, 1);
}

namespace {
// Cross-shaped offset pattern in native pixels; sampled on the fine grid
// it exposes the local appearance gradient around a point.
constexpr double kCross[9][2] = {{0, 0},  {-1, 0}, {1, 0},  {0, -1}, {0, 1},
                                 {-2, 0}, {2, 0},  {0, -2}, {0, 2}};
constexpr int kCrossTaps = 9;
}  // namespace

Var Tracker::fine_taps(ag::Tape& t, const encoder::PatchTokens& tokens,
                       std::int64_t frame, const Tensor& pts) const {
  const std::int64_t N = pts.dim(0);
  const double stride = static_cast<double>(tokens.fine_stride);
  std::vector<Var> taps;
  for (int o = 0; o < kCrossTaps; ++o) {
    Tensor grid_pts(Shape{N, 2});
    for (std::int64_t i = 0; i < N; ++i) {
      grid_pts[i * 2 + 0] = (pts[i * 2 + 0] + kCross[o][0] + 0.5) / stride - 0.5;
      grid_pts[i * 2 + 1] = (pts[i * 2 + 1] + kCross[o][1] + 0.5) / stride - 0.5;
    }
    taps.push_back(ag::bilinear(tokens.fine[static_cast<std::size_t>(frame)], t.leaf(grid_pts)));
  }
  return ag::concat(taps, 1);  // [N, 9*C_f]
}

// Per-point features: cross taps on the fine grid at the current
// estimate, the frame-0 template taps, and one token tap per scale, all
// projected back to d. positions: plain [N,T,2] (sampling is detached).
Var Tracker::sample_features(ag::Tape& t, const encoder::PatchTokens& tokens,
                             const Tensor& positions, ag::Var template_taps,
                             const nn::Linear& proj) const {
  const std::int64_t N = positions.dim(0), T = positions.dim(1);
  std::vector<Var> per_frame;
  for (std::int64_t f = 0; f < T; ++f) {
    Tensor pts(Shape{N, 2});
    for (std::int64_t i = 0; i < N; ++i) {
      pts[i * 2 + 0] = positions.at({i, f, 0});
      pts[i * 2 + 1] = positions.at({i, f, 1});
    }
    std::vector<Var> parts;
    parts.push_back(fine_taps(t, tokens, f, pts));
    parts.push_back(template_taps);
    for (std::size_t si = 0; si < tokens.scales.size(); ++si) {
      const auto& sc = tokens.scales[si];
      Tensor grid_pts(Shape{N, 2});
      for (std::int64_t i = 0; i < N; ++i) {
        grid_pts[i * 2 + 0] = (pts[i * 2 + 0] + 0.5) / static_cast<double>(sc.stride) - 0.5;
        grid_pts[i * 2 + 1] = (pts[i * 2 + 1] + 0.5) / static_cast<double>(sc.stride) - 0.5;
      }
      parts.push_back(ag::bilinear(tokens.scale_grid(t, f, si), t.leaf(grid_pts)));
    }
    Var row = ag::concat(parts, 1);
    per_frame.push_back(ag::reshape(row, Shape{N, 1, row.dim(1)}));
  }
  return proj(t, ag::concat(per_frame, 1));  // [N,T,d]
}

TrackerForward Tracker::forward(ag::Tape& t, const Tensor& frames,
                                const Tensor& init_points) const {
  if (init_points.ndim() != 2 || init_points.dim(1) != 2)
    throw ConfigError("tracker: init points must be [N,2]");
  const std::int64_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  const std::int64_t N = init_points.dim(0);
  const std::int64_t d = enc_cfg_.dim;

  const encoder::PatchTokens tokens = encoder_->forward(t, frames);
  const std::int64_t n_tok = tokens.count();

  // L^0: initial points replicated across frames.
  Tensor pos0(Shape{N, T, 2});
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t f = 0; f < T; ++f) {
      pos0.at({i, f, 0}) = init_points[i * 2 + 0];
      pos0.at({i, f, 1}) = init_points[i * 2 + 1];
    }

  const Tensor time_pe = encoder::posenc_time(T, d);  // [T,d]
  auto broadcast_time = [&](std::int64_t n_pts) {
    Tensor b(Shape{n_pts, T, d});
    for (std::int64_t i = 0; i < n_pts; ++i)
      for (std::int64_t f = 0; f < T; ++f)
        for (std::int64_t j = 0; j < d; ++j) b.at({i, f, j}) = time_pe[f * d + j];
    return b;
  };
  const Tensor time_pe_b = broadcast_time(N);

  // Frame-0 appearance template, fixed across refinement layers.
  Var template_taps = fine_taps(t, tokens, 0, init_points);
  Var queries = sample_features(t, tokens, pos0, template_taps, init_proj_);

  TrackerForward out;
  Var positions = t.leaf(pos0);  // graph accumulates deltas on top
  Tensor current = pos0;         // detached copy used for sampling/geometry

  Var patch_kv;  // [T, n_tok, d]
  {
    std::vector<Var> per_frame;
    for (std::int64_t f = 0; f < T; ++f)
      per_frame.push_back(ag::reshape(tokens.tokens[static_cast<std::size_t>(f)],
                                      Shape{1, n_tok, d}));
    patch_kv = ag::concat(per_frame, 0);
  }
  Tensor patch_pe_b(Shape{T, n_tok, d});
  for (std::int64_t f = 0; f < T; ++f)
    for (std::int64_t i = 0; i < n_tok * d; ++i)
      patch_pe_b[f * n_tok * d + i] = tokens.posenc[i];

  for (std::size_t n = 0; n < layers_.size(); ++n) {
    const RefineLayer& layer = layers_[n];
    if (n > 0)
      queries = ag::add(queries,
                        sample_features(t, tokens, current, template_taps, layer.sample_proj));

    // geometry of the current estimate, as positional encoding
    Tensor geo(Shape{N, T, d});
    {
      Tensor flat = current.reshaped(Shape{N * T, 2});
      Tensor pe = encoder::posenc_points(flat, H, W, d);
      geo = pe.reshaped(Shape{N, T, d});
    }

    // cross-attention to per-frame patch tokens (frames batched)
    {
      Var q_tn = ag::permute(queries, {1, 0, 2});  // [T,N,d]
      Var geo_tn = t.leaf(geo.clone().reshaped(Shape{N, T, d}));
      geo_tn = ag::permute(geo_tn, {1, 0, 2});
      Var upd = layer.cross(t, q_tn, patch_kv, geo_tn, t.leaf(patch_pe_b));
      queries = ag::permute(upd, {1, 0, 2});
    }
    // temporal self-attention along each trajectory (points batched)
    queries = layer.temporal(t, queries, queries, t.leaf(time_pe_b), t.leaf(time_pe_b));
    queries = layer.mlp(t, queries);

    // Fixed output gain so zero-initialized heads reach pixel-scale
    // corrections within a small optimizer budget.
    Var delta = ag::scale(layer.delta_head(t, layer.delta_ln(t, queries)), 8.0);
    positions = ag::add(positions, delta);  // [N,T,2]
    out.layer_positions.push_back(positions);
    current = positions.val().clone();
  }

  out.visibility_logits = ag::reshape(vis_head_(t, vis_ln_(t, queries)), Shape{N, T});
  out.point_tokens = queries;
  return out;
}

TrackerOutput Tracker::track(const Tensor& frames, const Tensor& init_points) const {
  nn::NoGradGuard ng;
  ag::Tape tape;
  TrackerForward fwd = forward(tape, frames, init_points);
  TrackerOutput out;
  for (const Var& v : fwd.layer_positions) out.layer_positions.push_back(v.val().clone());
  out.visibility_logits = fwd.visibility_logits.val().clone();
  out.point_tokens = fwd.point_tokens.val().clone();
  out.visibility_prob = Tensor(out.visibility_logits.shape());
  out.visibility_binary = Tensor(out.visibility_logits.shape());
  for (std::int64_t i = 0; i < out.visibility_logits.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-out.visibility_logits[i]));
    out.visibility_prob[i] = p;
    out.visibility_binary[i] = p >= cfg_.vis_threshold ? 1.0 : 0.0;
  }
  return out;
}

TrackingLoss tracking_loss(const TrackerForward& fwd, const data::TrajectorySet& gt,
                           const TrackingLossWeights& weights) {
  if (fwd.layer_positions.empty()) throw ConfigError("tracking_loss: no layer outputs");
  const auto n_layers = fwd.layer_positions.size();
  std::vector<double> wl = weights.layer;
  if (wl.empty()) wl.assign(n_layers, 1.0);
  if (wl.size() != n_layers)
    throw ConfigError("tracking_loss: layer weight count disagrees with N_pd");
  const Shape pshape = fwd.layer_positions[0].shape();
  if (pshape != gt.positions.shape())
    throw ConfigError("tracking_loss: prediction/ground-truth shape mismatch");
  if (!gt.positions.all_finite()) throw NumericError("tracking_loss: non-finite ground truth");

  const std::int64_t N = pshape[0], T = pshape[1];
  Tensor pos_mask;  // [N,T,2]; undefined = unmasked
  if (weights.mask_by_gt_visibility) {
    pos_mask = Tensor(Shape{N, T, 2});
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t f = 0; f < T; ++f) {
        const double v = gt.visibility.at({i, f});
        pos_mask.at({i, f, 0}) = v;
        pos_mask.at({i, f, 1}) = v;
      }
  }

  TrackingLoss out;
  ag::Var total;
  for (std::size_t n = 0; n < n_layers; ++n) {
    ag::Var term = ag::l1_masked_mean(fwd.layer_positions[n], gt.positions, pos_mask);
    out.per_layer.push_back(term.val()[0]);
    term = ag::scale(term, wl[n]);
    total = total.defined() ? ag::add(total, term) : term;
  }
  out.position_term = total.val()[0];

  ag::Var ce = ag::bce_logits_mean(fwd.visibility_logits, gt.visibility, Tensor());
  ce = ag::scale(ce, weights.visibility);
  out.visibility_term = ce.val()[0];
  out.total = ag::add(total, ce);
  return out;
}

}  // namespace pointseg::tracker
