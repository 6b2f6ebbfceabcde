#include "pointseg/encoder.hpp"

#include <cmath>
#include <numbers>

namespace pointseg::encoder {

using ag::Var;

void EncoderConfig::validate() const {
  if (dim <= 0 || dim % heads != 0)
    throw ConfigError("encoder: token dim must be positive and divisible by heads");
  if (dim % 4 != 0) throw ConfigError("encoder: token dim must be divisible by 4");
  if (strides.empty()) throw ConfigError("encoder: at least one scale required");
  if (layers < 0) throw ConfigError("encoder: layer count must be >= 0");
  if (sampling_points < 1) throw ConfigError("encoder: sampling points must be >= 1");
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void sinusoid_fill(double* row, double ux, double uy, std::int64_t d) {
  const std::int64_t nf = d / 4;
  const double gamma = std::pow(10000.0, 4.0 / static_cast<double>(d));
  double inv = 1.0;
  for (std::int64_t k = 0; k < nf; ++k) {
    row[4 * k + 0] = std::sin(kTwoPi * ux * inv);
    row[4 * k + 1] = std::cos(kTwoPi * ux * inv);
    row[4 * k + 2] = std::sin(kTwoPi * uy * inv);
    row[4 * k + 3] = std::cos(kTwoPi * uy * inv);
    inv /= gamma;
  }
}

}  // namespace

Tensor posenc_2d(std::int64_t h, std::int64_t w, std::int64_t d) {
  if (d % 4 != 0) throw ConfigError("posenc_2d: dim must be divisible by 4");
  Tensor out(Shape{h * w, d});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      sinusoid_fill(out.data() + (y * w + x) * d, static_cast<double>(x) / static_cast<double>(w),
                    static_cast<double>(y) / static_cast<double>(h), d);
  return out;
}

Tensor posenc_points(const Tensor& pts, std::int64_t frame_h, std::int64_t frame_w,
                     std::int64_t d) {
  if (d % 4 != 0) throw ConfigError("posenc_points: dim must be divisible by 4");
  const std::int64_t m = pts.numel() / 2;
  Tensor out(Shape{m, d});
  for (std::int64_t i = 0; i < m; ++i)
    sinusoid_fill(out.data() + i * d, pts[2 * i] / static_cast<double>(frame_w),
                  pts[2 * i + 1] / static_cast<double>(frame_h), d);
  return out;
}

Tensor posenc_time(std::int64_t t_len, std::int64_t d) {
  if (d % 2 != 0) throw ConfigError("posenc_time: dim must be even");
  Tensor out(Shape{t_len, d});
  const std::int64_t nf = d / 2;
  const double gamma = std::pow(10000.0, 2.0 / static_cast<double>(d));
  for (std::int64_t t = 0; t < t_len; ++t) {
    double inv = 1.0;
    for (std::int64_t k = 0; k < nf; ++k) {
      out[t * d + 2 * k + 0] = std::sin(static_cast<double>(t) * inv);
      out[t * d + 2 * k + 1] = std::cos(static_cast<double>(t) * inv);
      inv /= gamma;
    }
  }
  return out;
}

std::vector<ScaleShape> token_layout(std::int64_t h, std::int64_t w,
                                     const EncoderConfig& cfg) {
  std::vector<ScaleShape> out;
  for (std::int64_t s : cfg.strides) {
    if (h % s != 0 || w % s != 0)
      throw ConfigError("encoder: frame dims " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by stride " + std::to_string(s));
    out.push_back(ScaleShape{s, h / s, w / s});
  }
  return out;
}

std::int64_t PatchTokens::count() const {
  std::int64_t n = 0;
  for (const auto& s : scales) n += s.count();
  return n;
}

ag::Var PatchTokens::scale_grid(ag::Tape&, std::int64_t frame, std::size_t scale_idx) const {
  std::int64_t start = 0;
  for (std::size_t i = 0; i < scale_idx; ++i) start += scales[i].count();
  const ScaleShape& s = scales[scale_idx];
  Var tok = ag::slice(tokens[static_cast<std::size_t>(frame)], 0, start, s.count());
  // [N_s, d] -> [d, H_s, W_s]
  return ag::reshape(ag::permute(tok, {1, 0}), Shape{dim, s.h, s.w});
}

// ------------------------------------------------------------ deformable

DeformAttn DeformAttn::create(nn::ParamStore& ps, const std::string& name,
                              std::int64_t dim, int heads, std::size_t n_scales,
                              std::int64_t points) {
  DeformAttn d;
  d.dim = dim;
  d.heads = heads;
  d.n_scales = n_scales;
  d.points = points;
  const std::int64_t hsp = heads * static_cast<std::int64_t>(n_scales) * points;
  d.value_proj = nn::Linear::create(ps, name + ".value", dim, dim);
  // Zero-initialized offsets/weights: the layer starts as a reference-point
  // lookup with uniform scale mixing, which trains stably.
  d.offset_head = nn::Linear::create(ps, name + ".offsets", dim, hsp * 2, nn::Init::zeros);
  d.weight_head = nn::Linear::create(ps, name + ".weights", dim, hsp, nn::Init::zeros);
  d.out_proj = nn::Linear::create(ps, name + ".out", dim, dim);
  return d;
}

ag::Var DeformAttn::operator()(ag::Tape& t, ag::Var queries,
                               const std::vector<ag::Var>& scale_grids,
                               const std::vector<ScaleShape>& scales,
                               const Tensor& ref_norm) const {
  const std::int64_t nq = queries.dim(0);
  const std::int64_t dh = dim / heads;
  const std::int64_t S = static_cast<std::int64_t>(n_scales);
  const std::int64_t P = points;

  // Value features as per-head grids, per scale.
  std::vector<Var> head_grids;  // [scale*heads + h] -> [dh, H_s, W_s]
  head_grids.reserve(n_scales * static_cast<std::size_t>(heads));
  for (std::size_t si = 0; si < n_scales; ++si) {
    const ScaleShape& sc = scales[si];
    Var flat = ag::reshape(scale_grids[si], Shape{dim, sc.count()});  // [d, N_s]
    Var val = value_proj(t, ag::permute(flat, {1, 0}));               // [N_s, d]
    for (int h = 0; h < heads; ++h) {
      Var vh = ag::slice(val, 1, h * dh, dh);  // [N_s, dh]
      head_grids.push_back(ag::reshape(ag::permute(vh, {1, 0}), Shape{dh, sc.h, sc.w}));
    }
  }

  // offsets [nq, heads, S, P, 2] in pixels of each scale grid
  Var off = ag::reshape(offset_head(t, queries), Shape{nq, heads, S, P, 2});
  off = ag::permute(off, {1, 2, 0, 3, 4});  // [heads, S, nq, P, 2]
  Var wgt = ag::reshape(weight_head(t, queries), Shape{nq, heads, S * P});
  wgt = ag::softmax_last(wgt);  // weights sum to 1 per query per head

  std::vector<Var> head_outputs;
  for (int h = 0; h < heads; ++h) {
    std::vector<Var> per_scale;  // each [nq, P, dh]
    for (std::int64_t si = 0; si < S; ++si) {
      const ScaleShape& sc = scales[static_cast<std::size_t>(si)];
      // reference points in this scale's pixel coordinates
      Tensor ref_px(Shape{nq * P, 2});
      for (std::int64_t i = 0; i < nq; ++i)
        for (std::int64_t p = 0; p < P; ++p) {
          ref_px[(i * P + p) * 2 + 0] = ref_norm[i * 2 + 0] * static_cast<double>(sc.w) - 0.5;
          ref_px[(i * P + p) * 2 + 1] = ref_norm[i * 2 + 1] * static_cast<double>(sc.h) - 0.5;
        }
      Var o = ag::slice(ag::slice(off, 0, h, 1), 1, si, 1);  // [1,1,nq,P,2]
      Var loc = ag::add(ag::reshape(o, Shape{nq * P, 2}), t.leaf(ref_px));
      Var sampled = ag::bilinear(head_grids[static_cast<std::size_t>(si) * heads + h], loc);
      per_scale.push_back(ag::reshape(sampled, Shape{nq, P, dh}));
    }
    Var gathered = ag::concat(per_scale, 1);                     // [nq, S*P, dh]
    Var wh = ag::reshape(ag::slice(wgt, 1, h, 1), Shape{nq, 1, S * P});
    head_outputs.push_back(ag::reshape(ag::matmul(wh, gathered), Shape{nq, dh}));
  }
  return out_proj(t, ag::concat(head_outputs, 1));  // [nq, d]
}

// ------------------------------------------------------------ encoder

Encoder::Encoder(nn::ParamStore& ps, const std::string& prefix, EncoderConfig cfg)
    : cfg_(std::move(cfg)), prefix_(prefix) {
  cfg_.validate();
  const std::size_t n_scales = cfg_.strides.size();

  auto conv_layer = [&](const std::string& name, std::int64_t cin, std::int64_t cout,
                        std::int64_t k, std::int64_t stride, std::int64_t pad) {
    ConvLayer l;
    l.w = &ps.create(name + ".weight", Shape{cout, cin, k, k}, nn::Init::fan_in_uniform);
    l.b = &ps.create(name + ".bias", Shape{cout}, nn::Init::zeros);
    l.stride = stride;
    l.pad = pad;
    return l;
  };

  if (cfg_.backbone == Backbone::small_residual) {
    // Residual CNN with one downsampling stage per power of two, tapped at
    // the configured strides. Channel plan sized for CPU training.
    std::int64_t max_stride = 1;
    for (std::int64_t s : cfg_.strides) {
      if (s < 1 || (s & (s - 1)) != 0)
        throw ConfigError("encoder: strides must be powers of two");
      max_stride = std::max(max_stride, s);
    }
    const std::vector<std::int64_t> ch = {12, 16, 24, 32, 48, 64, 96, 96, 96};
    stem_ = conv_layer(prefix + ".stem", 1, ch[0], 3, 1, 1);
    std::int64_t prev = ch[0];
    std::vector<std::int64_t> tap_ch;
    std::size_t level = 0;
    for (std::int64_t stride = 2; stride <= max_stride; stride *= 2) {
      ++level;
      const std::int64_t c = ch[std::min(level, ch.size() - 1)];
      Stage st;
      const std::string base = prefix + ".stage" + std::to_string(level);
      st.down = conv_layer(base + ".down", prev, c, 3, 2, 1);
      st.tap = std::find(cfg_.strides.begin(), cfg_.strides.end(), stride) != cfg_.strides.end();
      if (st.tap) {
        // residual refinement only where tokens are emitted; the early
        // high-resolution stages stay plain downsampling convs
        ResBlock rb;
        rb.c1 = conv_layer(base + ".res.c1", c, c, 3, 1, 1);
        rb.c2 = conv_layer(base + ".res.c2", c, c, 3, 1, 1);
        st.blocks.push_back(rb);
      }
      stages_.push_back(st);
      if (st.tap) tap_ch.push_back(c);
      prev = c;
    }
    if (tap_ch.size() != n_scales)
      throw ConfigError("encoder: stride 1 is not a valid token scale");
    for (std::size_t i = 0; i < n_scales; ++i)
      proj_.push_back(conv_layer(prefix + ".proj" + std::to_string(i), tap_ch[i], cfg_.dim, 1, 1, 0));
  } else {
    if (cfg_.strides != std::vector<std::int64_t>{8, 16, 32})
      throw ConfigError("encoder: the residual-50 backbone requires strides {8,16,32}");
    // Bottleneck residual-50: stem /4, stages [3,4,6,3] to /32.
    const std::int64_t bw = cfg_.resnet_base_width;
    r50_stem_ = conv_layer(prefix + ".stem", 1, bw, 7, 4, 3);
    const std::vector<int> depth = {3, 4, 6, 3};
    std::int64_t prev = bw;
    for (std::size_t s = 0; s < depth.size(); ++s) {
      std::vector<BottleneckBlock> blocks;
      const std::int64_t mid = bw << s;
      const std::int64_t out = mid * 4;
      for (int b = 0; b < depth[s]; ++b) {
        const std::string base =
            prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
        BottleneckBlock blk;
        const std::int64_t stride = (b == 0 && s > 0) ? 2 : 1;
        blk.c1 = conv_layer(base + ".c1", prev, mid, 1, 1, 0);
        blk.c2 = conv_layer(base + ".c2", mid, mid, 3, stride, 1);
        blk.c3 = conv_layer(base + ".c3", mid, out, 1, 1, 0);
        if (prev != out || stride != 1) {
          blk.proj = conv_layer(base + ".proj", prev, out, 1, stride, 0);
          blk.has_proj = true;
        }
        blocks.push_back(blk);
        prev = out;
      }
      r50_stages_.push_back(std::move(blocks));
    }
    const std::vector<std::int64_t> feat_ch = {bw * 8, bw * 16, bw * 32};
    for (std::size_t i = 0; i < n_scales; ++i)
      proj_.push_back(conv_layer(prefix + ".proj" + std::to_string(i), feat_ch[i], cfg_.dim, 1, 1, 0));
  }

  for (int l = 0; l < cfg_.layers; ++l) {
    TxLayer layer;
    const std::string base = prefix + ".tx" + std::to_string(l);
    layer.ln = nn::LayerNorm::create(ps, base + ".ln", cfg_.dim);
    if (cfg_.attention == AttentionMode::deformable)
      layer.deform = DeformAttn::create(ps, base + ".deform", cfg_.dim, cfg_.heads,
                                        n_scales, cfg_.sampling_points);
    else
      layer.dense = nn::Mha::create(ps, base + ".dense", cfg_.dim, cfg_.heads);
    layer.mlp = nn::MlpBlock::create(ps, base + ".mlp", cfg_.dim, 2 * cfg_.dim);
    tx_.push_back(layer);
  }
}

std::int64_t Encoder::fine_channels() const {
  if (cfg_.backbone == Backbone::small_residual) return stages_.front().down.w->value.dim(0);
  return r50_stem_.w->value.dim(0);
}

Var Encoder::conv(ag::Tape& t, Var x, const ConvLayer& l) const {
  return ag::conv2d(x, nn::pvar(t, *l.w), nn::pvar(t, *l.b), l.stride, l.pad);
}

Var Encoder::res_block(ag::Tape& t, Var x, const ResBlock& b) const {
  Var y = conv(t, ag::relu(x), b.c1);
  y = conv(t, ag::relu(y), b.c2);
  return ag::add(x, y);
}

Var Encoder::bottleneck(ag::Tape& t, Var x, const BottleneckBlock& b) const {
  Var y = ag::relu(conv(t, x, b.c1));
  y = ag::relu(conv(t, y, b.c2));
  y = conv(t, y, b.c3);
  Var skip = b.has_proj ? conv(t, x, b.proj) : x;
  return ag::relu(ag::add(skip, y));
}

std::vector<Var> Encoder::backbone_forward(ag::Tape& t, Var x, Var* fine) const {
  std::vector<Var> feats;
  if (cfg_.backbone == Backbone::small_residual) {
    Var y = ag::relu(conv(t, x, stem_));
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      y = ag::relu(conv(t, y, stages_[i].down));
      for (const auto& rb : stages_[i].blocks) y = res_block(t, y, rb);
      if (i == 0 && fine) *fine = y;
      if (stages_[i].tap) feats.push_back(y);
    }
  } else {
    Var y = ag::relu(conv(t, x, r50_stem_));
    if (fine) *fine = y;
    for (std::size_t s = 0; s < r50_stages_.size(); ++s) {
      for (const auto& blk : r50_stages_[s]) y = bottleneck(t, y, blk);
      if (s >= 1) feats.push_back(y);  // /8, /16, /32
    }
  }
  return feats;
}

PatchTokens Encoder::forward(ag::Tape& t, const Tensor& frames) const {
  if (frames.ndim() != 3) throw ConfigError("encoder: frames must be [T,H,W]");
  const std::int64_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  return forward(t, t.leaf(frames.reshaped(Shape{T, 1, H, W})));
}

PatchTokens Encoder::forward(ag::Tape& t, Var x) const {
  if (x.shape().size() != 4 || x.dim(1) != 1)
    throw ConfigError("encoder: graph input must be [T,1,H,W]");
  const std::int64_t T = x.dim(0), H = x.dim(2), W = x.dim(3);
  PatchTokens out;
  out.scales = token_layout(H, W, cfg_);
  out.dim = cfg_.dim;

  Var fine;
  std::vector<Var> feats = backbone_forward(t, x, &fine);
  if (fine.defined()) {
    out.fine_channels = fine.dim(1);
    out.fine_stride = H / fine.dim(2);
    for (std::int64_t f = 0; f < T; ++f)
      out.fine.push_back(ag::reshape(ag::slice(fine, 0, f, 1),
                                     Shape{out.fine_channels, fine.dim(2), fine.dim(3)}));
  }

  // Project each scale to d and flatten to tokens [T, N_s, d].
  std::vector<Var> scale_tokens;
  for (std::size_t i = 0; i < out.scales.size(); ++i) {
    Var f = conv(t, feats[i], proj_[i]);  // [T, d, H_s, W_s]
    const ScaleShape& sc = out.scales[i];
    f = ag::reshape(f, Shape{T, cfg_.dim, sc.count()});
    scale_tokens.push_back(ag::permute(f, {0, 2, 1}));  // [T, N_s, d]
  }
  Var tokens = ag::concat(scale_tokens, 1);  // [T, N_tok, d]
  const std::int64_t n_tok = out.count();

  // Constant positional encodings and normalized reference points.
  Tensor pe(Shape{n_tok, cfg_.dim});
  Tensor ref(Shape{n_tok, 2});
  {
    std::int64_t row = 0;
    for (const auto& sc : out.scales) {
      Tensor pe_s = posenc_2d(sc.h, sc.w, cfg_.dim);
      for (std::int64_t i = 0; i < sc.count(); ++i) {
        for (std::int64_t j = 0; j < cfg_.dim; ++j) pe[(row + i) * cfg_.dim + j] = pe_s[i * cfg_.dim + j];
        const std::int64_t y = i / sc.w, xg = i % sc.w;
        ref[(row + i) * 2 + 0] = (static_cast<double>(xg) + 0.5) / static_cast<double>(sc.w);
        ref[(row + i) * 2 + 1] = (static_cast<double>(y) + 0.5) / static_cast<double>(sc.h);
      }
      row += sc.count();
    }
  }
  out.posenc = pe;

  // Transformer layers, per frame (no temporal mixing).
  std::vector<Var> frame_tokens;
  for (std::int64_t f = 0; f < T; ++f)
    frame_tokens.push_back(ag::reshape(ag::slice(tokens, 0, f, 1), Shape{n_tok, cfg_.dim}));

  for (const auto& layer : tx_) {
    if (cfg_.attention == AttentionMode::deformable) {
      for (std::int64_t f = 0; f < T; ++f) {
        Var xn = layer.ln(t, frame_tokens[static_cast<std::size_t>(f)]);
        Var q = ag::add(xn, t.leaf(pe));
        // Rebuild per-scale grids from the normalized tokens.
        std::vector<Var> grids;
        std::int64_t start = 0;
        for (const auto& sc : out.scales) {
          Var tokv = ag::slice(xn, 0, start, sc.count());
          grids.push_back(ag::reshape(ag::permute(tokv, {1, 0}), Shape{cfg_.dim, sc.h, sc.w}));
          start += sc.count();
        }
        Var upd = layer.deform(t, q, grids, out.scales, ref);
        frame_tokens[static_cast<std::size_t>(f)] =
            ag::add(frame_tokens[static_cast<std::size_t>(f)], upd);
        frame_tokens[static_cast<std::size_t>(f)] =
            layer.mlp(t, frame_tokens[static_cast<std::size_t>(f)]);
      }
    } else {
      // Dense self-attention, frames batched.
      std::vector<Var> batched;
      for (auto& ft : frame_tokens) batched.push_back(ag::reshape(ft, Shape{1, n_tok, cfg_.dim}));
      Var xb = ag::concat(batched, 0);  // [T, N_tok, d]
      Var xn;
      {
        Var ln = layer.ln(t, xb);
        Tensor pe_b(Shape{T, n_tok, cfg_.dim});
        for (std::int64_t f = 0; f < T; ++f)
          for (std::int64_t i = 0; i < n_tok * cfg_.dim; ++i)
            pe_b[f * n_tok * cfg_.dim + i] = pe[i];
        Var q = ag::add(ln, t.leaf(pe_b));
        xn = ag::add(xb, layer.dense(t, q, q, ln));
      }
      for (std::int64_t f = 0; f < T; ++f) {
        Var ft = ag::reshape(ag::slice(xn, 0, f, 1), Shape{n_tok, cfg_.dim});
        frame_tokens[static_cast<std::size_t>(f)] = layer.mlp(t, ft);
      }
    }
  }

  out.tokens = std::move(frame_tokens);
  return out;
}

}  // namespace pointseg::encoder
