#include "pointseg/losses.hpp"

#include <cmath>

#include "pointseg/errors.hpp"
#include "pointseg/kernels.hpp"
#include "pointseg/rng.hpp"

namespace pointseg::losses {

using ag::Var;

double bilinear_sample(const Tensor& field, double x, double y) {
  if (field.ndim() != 2) throw ConfigError("bilinear_sample: field must be [H,W]");
  if (!std::isfinite(x) || !std::isfinite(y))
    throw NumericError("bilinear_sample: non-finite coordinates");
  double out;
  const double pt[2] = {x, y};
  kern::bilinear_gather(1, field.dim(0), field.dim(1), field.data(), 1, pt, &out);
  return out;
}

std::vector<double> bilinear_sample(const Tensor& field, const Tensor& points) {
  if (field.ndim() != 2) throw ConfigError("bilinear_sample: field must be [H,W]");
  if (points.ndim() != 2 || points.dim(1) != 2)
    throw ConfigError("bilinear_sample: points must be [M,2]");
  if (!points.all_finite()) throw NumericError("bilinear_sample: non-finite coordinates");
  std::vector<double> out(static_cast<std::size_t>(points.dim(0)));
  kern::bilinear_gather(1, field.dim(0), field.dim(1), field.data(), points.dim(0),
                        points.data(), out.data());
  return out;
}

Var dice_loss(Var pred, const Tensor& gt, double eps) {
  if (!pred.val().same_shape(gt)) throw ConfigError("dice_loss: shape mismatch");
  double gt_sum = 0.0;
  for (std::int64_t i = 0; i < gt.numel(); ++i) gt_sum += gt[i];
  Var inter = ag::sum_all(ag::mul_const(pred, gt));
  Var num = ag::add_scalar(ag::scale(inter, 2.0), eps);
  Var den = ag::add_scalar(ag::sum_all(pred), gt_sum + eps);
  return ag::add_scalar(ag::neg(ag::sdiv(num, den)), 1.0);
}

MaskLoss mask_loss(const std::vector<Var>& layer_masks, const Tensor& gt,
                   const std::vector<std::int64_t>& annotated_frames,
                   const LossWeights& weights) {
  if (layer_masks.empty()) throw ConfigError("mask_loss: no layers");
  if (weights.mask_layer.size() != layer_masks.size())
    throw ConfigError("mask_loss: weight count " + std::to_string(weights.mask_layer.size()) +
                      " does not match layer count " + std::to_string(layer_masks.size()));
  const Shape ms = layer_masks[0].shape();  // [T,K,H,W]
  const std::int64_t T = ms[0], K = ms[1], H = ms[2], W = ms[3];
  Tensor gtk = gt;
  if (gt.ndim() == 3) gtk = gt.reshaped(Shape{T, 1, H, W});
  if (gtk.shape() != ms)
    throw ConfigError("mask_loss: ground-truth dims disagree with predictions");

  std::vector<std::int64_t> frames = annotated_frames;
  if (frames.empty())
    for (std::int64_t t = 0; t < T; ++t) frames.push_back(t);
  for (std::int64_t t : frames)
    if (t < 0 || t >= T) throw ConfigError("mask_loss: annotated frame out of range");

  MaskLoss out;
  Var total;
  for (std::size_t n = 0; n < layer_masks.size(); ++n) {
    Var layer_sum;
    for (std::int64_t t : frames)
      for (std::int64_t k = 0; k < K; ++k) {
        Var plane = ag::reshape(
            ag::slice(ag::slice(layer_masks[n], 0, t, 1), 1, k, 1), Shape{H, W});
        Tensor gplane(Shape{H, W});
        for (std::int64_t i = 0; i < H * W; ++i)
          gplane[i] = gtk[(t * K + k) * H * W + i];
        Var d = dice_loss(plane, gplane, weights.dice_epsilon);
        layer_sum = layer_sum.defined() ? ag::add(layer_sum, d) : d;
      }
    const double denom = static_cast<double>(frames.size()) * static_cast<double>(K);
    Var layer_mean = ag::scale(layer_sum, 1.0 / denom);
    out.per_layer.push_back(layer_mean.val()[0]);
    Var weighted = ag::scale(layer_mean, weights.mask_layer[n]);
    total = total.defined() ? ag::add(total, weighted) : weighted;
  }
  out.total = ag::scale(total, weights.dice);
  return out;
}

namespace {

std::vector<std::pair<std::int64_t, std::int64_t>> frame_pairs(std::int64_t T,
                                                               std::int64_t limit,
                                                               std::uint64_t seed) {
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (std::int64_t t1 = 0; t1 < T; ++t1)
    for (std::int64_t t2 = t1 + 1; t2 < T; ++t2) pairs.emplace_back(t1, t2);
  if (limit > 0 && static_cast<std::int64_t>(pairs.size()) > limit) {
    const auto perm = rng::permutation(rng::Stream(seed, "temporal.pairs"), pairs.size());
    std::vector<std::pair<std::int64_t, std::int64_t>> keep;
    for (std::int64_t i = 0; i < limit; ++i) keep.push_back(pairs[perm[static_cast<std::size_t>(i)]]);
    pairs = std::move(keep);
  }
  return pairs;
}

Var mask_plane(const std::vector<Var>& layer_masks, std::size_t n, std::int64_t t) {
  const Shape& ms = layer_masks[n].shape();
  return ag::reshape(ag::slice(layer_masks[n], 0, t, 1), Shape{ms[1], ms[2], ms[3]});
}

}  // namespace

TemporalLoss temporal_loss(const std::vector<Var>& layer_masks, const Tensor& trajectories,
                           const Tensor& visibility, const LossWeights& weights,
                           std::uint64_t pair_seed) {
  TemporalLoss out;
  if (layer_masks.empty()) throw ConfigError("temporal_loss: no layers");
  const Shape& ms = layer_masks[0].shape();
  const std::int64_t T = ms[0];
  if (trajectories.ndim() != 3 || trajectories.dim(1) != T)
    throw ConfigError("temporal_loss: trajectories must cover all frames");
  if (T < 2) return out;  // defined as zero for single-frame clips
  const std::int64_t N = trajectories.dim(0);

  const auto pairs = frame_pairs(T, weights.pair_limit, pair_seed);
  Var total;
  for (std::size_t n = 0; n < layer_masks.size(); ++n) {
    const double w = weights.temporal_layer_scaled
                         ? weights.temporal * weights.mask_layer[n]
                         : weights.temporal;
    Var acc;
    std::int64_t samples = 0;
    std::int64_t pairs_used = 0;
    for (const auto& [t1, t2] : pairs) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = 0; i < N; ++i) {
        if (!weights.visibility_gated ||
            (visibility.at({i, t1}) == 1.0 && visibility.at({i, t2}) == 1.0))
          idx.push_back(i);
      }
      if (idx.empty()) continue;
      ++pairs_used;
      const auto m = static_cast<std::int64_t>(idx.size());
      Tensor p1(Shape{m, 2}), p2(Shape{m, 2});
      for (std::int64_t j = 0; j < m; ++j) {
        p1[j * 2 + 0] = trajectories.at({idx[static_cast<std::size_t>(j)], t1, 0});
        p1[j * 2 + 1] = trajectories.at({idx[static_cast<std::size_t>(j)], t1, 1});
        p2[j * 2 + 0] = trajectories.at({idx[static_cast<std::size_t>(j)], t2, 0});
        p2[j * 2 + 1] = trajectories.at({idx[static_cast<std::size_t>(j)], t2, 1});
      }
      ag::Tape* tape = layer_masks[n].tape;
      Var s1 = ag::bilinear(mask_plane(layer_masks, n, t1), tape->leaf(p1));
      Var s2 = ag::bilinear(mask_plane(layer_masks, n, t2), tape->leaf(p2));
      Var diff = ag::sub(s1, s2);
      Var sq = ag::sum_all(ag::mul(diff, diff));
      acc = acc.defined() ? ag::add(acc, sq) : sq;
      samples += s1.val().numel();
    }
    if (n == 0) out.pairs_used = pairs_used;
    if (!acc.defined() || samples == 0) continue;
    Var term = ag::scale(acc, w / static_cast<double>(samples));
    total = total.defined() ? ag::add(total, term) : term;
  }
  if (total.defined()) {
    out.total = total;
    out.value = total.val()[0];
  }
  return out;
}

TemporalLoss temporal_loss_joint(const std::vector<Var>& layer_masks,
                                 const std::vector<Var>& trajectory_vars,
                                 const Tensor& visibility, const LossWeights& weights,
                                 std::uint64_t pair_seed) {
  TemporalLoss out;
  if (layer_masks.empty()) throw ConfigError("temporal_loss: no layers");
  const Shape& ms = layer_masks[0].shape();
  const std::int64_t T = ms[0];
  if (T < 2) return out;
  Var traj = trajectory_vars.back();  // final-layer positions drive the anchors
  const std::int64_t N = traj.dim(0);
  const std::int64_t K = ms[1];

  const auto pairs = frame_pairs(T, weights.pair_limit, pair_seed);
  Var total;
  for (std::size_t n = 0; n < layer_masks.size(); ++n) {
    const double w = weights.temporal_layer_scaled
                         ? weights.temporal * weights.mask_layer[n]
                         : weights.temporal;
    Var acc;
    double samples = 0.0;
    std::int64_t pairs_used = 0;
    for (const auto& [t1, t2] : pairs) {
      Tensor gate(Shape{N, K});
      double included = 0.0;
      for (std::int64_t i = 0; i < N; ++i) {
        const bool vis = !weights.visibility_gated ||
                         (visibility.at({i, t1}) == 1.0 && visibility.at({i, t2}) == 1.0);
        for (std::int64_t k = 0; k < K; ++k) gate.at({i, k}) = vis ? 1.0 : 0.0;
        if (vis) included += 1.0;
      }
      if (included == 0.0) continue;
      ++pairs_used;
      Var p1 = ag::reshape(ag::slice(traj, 1, t1, 1), Shape{N, 2});
      Var p2 = ag::reshape(ag::slice(traj, 1, t2, 1), Shape{N, 2});
      Var s1 = ag::bilinear(mask_plane(layer_masks, n, t1), p1);
      Var s2 = ag::bilinear(mask_plane(layer_masks, n, t2), p2);
      Var diff = ag::sub(s1, s2);
      Var sq = ag::mul_const(ag::mul(diff, diff), gate);
      acc = acc.defined() ? ag::add(acc, ag::sum_all(sq)) : ag::sum_all(sq);
      samples += included * static_cast<double>(K);
    }
    if (n == 0) out.pairs_used = pairs_used;
    if (!acc.defined() || samples == 0.0) continue;
    Var term = ag::scale(acc, w / samples);
    total = total.defined() ? ag::add(total, term) : term;
  }
  if (total.defined()) {
    out.total = total;
    out.value = total.val()[0];
  }
  return out;
}

}  // namespace pointseg::losses
