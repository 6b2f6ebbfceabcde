#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pointseg/losses.hpp"
#include "pointseg/phantom.hpp"

using namespace pointseg;
using gradcheck::random_tensor;

namespace {

// Closed-form bilinear interpolation written independently of the kernel.
double bilinear_oracle(const Tensor& f, double x, double y) {
  const std::int64_t h = f.dim(0), w = f.dim(1);
  const double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::int64_t>(std::floor(cx));
  const auto y0 = static_cast<std::int64_t>(std::floor(cy));
  const std::int64_t x1 = std::min(x0 + 1, w - 1);
  const std::int64_t y1 = std::min(y0 + 1, h - 1);
  const double fx = cx - static_cast<double>(x0);
  const double fy = cy - static_cast<double>(y0);
  return f[y0 * w + x0] * (1 - fx) * (1 - fy) + f[y0 * w + x1] * fx * (1 - fy) +
         f[y1 * w + x0] * (1 - fx) * fy + f[y1 * w + x1] * fx * fy;
}

Tensor binary_mask(Shape s, std::uint64_t seed, double density = 0.4) {
  Tensor t(std::move(s));
  rng::Stream r(seed, "mask");
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = r.uniform(static_cast<std::uint64_t>(i)) < density ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("bilinear sampling examples") {
  SUBCASE("integer coordinates return the exact pixel") {
    const Tensor f = random_tensor({3, 4}, 1);
    for (std::int64_t y = 0; y < 3; ++y)
      for (std::int64_t x = 0; x < 4; ++x)
        CHECK(losses::bilinear_sample(f, static_cast<double>(x), static_cast<double>(y)) ==
              f[y * 4 + x]);
  }
  SUBCASE("midpoint of a 2x2 field") {
    const Tensor f(Shape{2, 2}, std::vector<double>{0.0, 1.0, 2.0, 3.0});
    CHECK(losses::bilinear_sample(f, 0.5, 0.5) == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("100 random points match the closed-form oracle") {
    const Tensor f = random_tensor({7, 9}, 2);
    rng::Stream s(3, "pts");
    for (int i = 0; i < 100; ++i) {
      const double x = s.uniform(static_cast<std::uint64_t>(2 * i), -1.5, 9.5);
      const double y = s.uniform(static_cast<std::uint64_t>(2 * i + 1), -1.5, 7.5);
      CHECK(losses::bilinear_sample(f, x, y) ==
            doctest::Approx(bilinear_oracle(f, x, y)).epsilon(1e-6));
    }
  }
  SUBCASE("NaN coordinates raise a numeric error") {
    const Tensor f = random_tensor({3, 3}, 4);
    CHECK_THROWS_AS(losses::bilinear_sample(f, std::nan(""), 1.0), NumericError);
  }
}

TEST_CASE("dice loss examples") {
  SUBCASE("perfect binary prediction is bounded by the epsilon term") {
    const Tensor gt = binary_mask({6, 6}, 5);
    double area = 0.0;
    for (std::int64_t i = 0; i < gt.numel(); ++i) area += gt[i];
    ag::Tape tape;
    const ag::Var loss = losses::dice_loss(tape.leaf(gt, true), gt, 1.0);
    CHECK(loss.val()[0] >= 0.0);
    CHECK(loss.val()[0] <= 1.0 / (2.0 * area + 1.0) + 1e-12);
  }
  SUBCASE("empty-empty is rescued to zero exactly") {
    Tensor zero(Shape{4, 4});
    ag::Tape tape;
    CHECK(losses::dice_loss(tape.leaf(zero, true), zero, 1.0).val()[0] == 0.0);
  }
  SUBCASE("4x4 worked example: overlap 2 of 4, prediction 3 foreground") {
    Tensor gt(Shape{4, 4}), pred(Shape{4, 4});
    gt[0] = gt[1] = gt[2] = gt[3] = 1.0;
    pred[0] = pred[1] = 1.0;   // two true positives
    pred[8] = 1.0;             // one false positive
    ag::Tape tape;
    const ag::Var loss = losses::dice_loss(tape.leaf(pred, true), gt, 1.0);
    CHECK(loss.val()[0] == doctest::Approx(0.375).epsilon(1e-12));
  }
}

TEST_CASE("mask loss weighting arithmetic") {
  // Engineered so per-layer Dice is exactly 0.2: with gt all ones on a
  // 4x4 grid, a constant prediction of 21/32 gives 1 - 22/27.5 = 0.2.
  const std::int64_t hw = 4;
  Tensor gt(Shape{1, hw, hw}, 1.0);
  Tensor pred(Shape{1, 1, hw, hw}, 21.0 / 32.0);
  ag::Tape tape;
  std::vector<ag::Var> layers = {tape.leaf(pred, true), tape.leaf(pred.clone(), true),
                                 tape.leaf(pred.clone(), true)};
  losses::LossWeights w;  // defaults: 0.25/0.5/1.0, dice weight 1.0
  const auto ml = losses::mask_loss(layers, gt, {}, w);
  for (double pl : ml.per_layer) CHECK(pl == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(ml.total.val()[0] == doctest::Approx(0.35).epsilon(1e-12));
}

TEST_CASE("mask loss equals a brute-force triple loop on random instances") {
  rng::Stream s(6, "ml");
  for (int trial = 0; trial < 30; ++trial) {
    const auto c = static_cast<std::uint64_t>(trial);
    const std::int64_t T = 1 + static_cast<std::int64_t>(s.below(c * 8, 3));
    const std::int64_t K = 1 + static_cast<std::int64_t>(s.below(c * 8 + 1, 2));
    const std::int64_t hw = 4;
    const int layers = 1 + static_cast<int>(s.below(c * 8 + 2, 3));
    Tensor gt(Shape{T, K, hw, hw});
    for (std::int64_t i = 0; i < gt.numel(); ++i)
      gt[i] = s.uniform(c * 1000 + 100 + static_cast<std::uint64_t>(i)) < 0.4 ? 1.0 : 0.0;
    ag::Tape tape;
    std::vector<ag::Var> lv;
    std::vector<Tensor> lt;
    for (int l = 0; l < layers; ++l) {
      Tensor m = random_tensor({T, K, hw, hw}, 500 + c * 17 + static_cast<std::uint64_t>(l), 0.01, 0.99);
      lt.push_back(m);
      lv.push_back(tape.leaf(m, true));
    }
    losses::LossWeights w;
    w.mask_layer.assign(static_cast<std::size_t>(layers), 0.0);
    for (int l = 0; l < layers; ++l)
      w.mask_layer[static_cast<std::size_t>(l)] = s.uniform(c * 8 + 3 + static_cast<std::uint64_t>(l), 0.1, 1.5);
    w.dice = s.uniform(c * 8 + 7, 0.5, 2.0);
    const auto ml = losses::mask_loss(lv, gt, {}, w);

    double expect = 0.0;
    for (int l = 0; l < layers; ++l) {
      double layer_acc = 0.0;
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t k = 0; k < K; ++k) {
          double inter = 0.0, ps = 0.0, gs = 0.0;
          for (std::int64_t i = 0; i < hw * hw; ++i) {
            const double p = lt[static_cast<std::size_t>(l)][(t * K + k) * hw * hw + i];
            const double g = gt[(t * K + k) * hw * hw + i];
            inter += p * g;
            ps += p;
            gs += g;
          }
          layer_acc += 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
        }
      expect += w.mask_layer[static_cast<std::size_t>(l)] * layer_acc / static_cast<double>(T * K);
    }
    expect *= w.dice;
    CHECK(ml.total.val()[0] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("mask loss rejects weight-count mismatch") {
  ag::Tape tape;
  std::vector<ag::Var> layers = {tape.leaf(Tensor(Shape{1, 1, 4, 4}, 0.5), true)};
  losses::LossWeights w;  // three weights, one layer
  CHECK_THROWS_AS(losses::mask_loss(layers, Tensor(Shape{1, 4, 4}), {}, w), ConfigError);
}

TEST_CASE("temporal loss examples") {
  SUBCASE("constant masks and static points score zero exactly") {
    ag::Tape tape;
    std::vector<ag::Var> layers = {tape.leaf(Tensor(Shape{3, 1, 4, 4}, 0.7), true)};
    Tensor traj(Shape{2, 3, 2}, 1.5);
    Tensor vis(Shape{2, 3}, 1.0);
    losses::LossWeights w;
    w.mask_layer = {1.0};
    const auto tl = losses::temporal_loss(layers, traj, vis, w);
    CHECK(tl.value == 0.0);
  }
  SUBCASE("T=2, one point, sampled 0.9 and 0.4, collapsed weights") {
    ag::Tape tape;
    Tensor masks(Shape{2, 1, 4, 4});
    for (std::int64_t i = 0; i < 16; ++i) {
      masks[i] = 0.9;
      masks[16 + i] = 0.4;
    }
    std::vector<ag::Var> layers = {tape.leaf(masks, true)};
    Tensor traj(Shape{1, 2, 2}, 1.5);
    Tensor vis(Shape{1, 2}, 1.0);
    losses::LossWeights w;
    w.mask_layer = {1.0};
    w.temporal = 1.0;
    w.temporal_layer_scaled = false;
    const auto tl = losses::temporal_loss(layers, traj, vis, w);
    CHECK(tl.value == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(tl.pairs_used == 1);
  }
  SUBCASE("single-frame clips score zero") {
    ag::Tape tape;
    std::vector<ag::Var> layers = {tape.leaf(Tensor(Shape{1, 1, 4, 4}, 0.5), true)};
    losses::LossWeights w;
    w.mask_layer = {1.0};
    const auto tl =
        losses::temporal_loss(layers, Tensor(Shape{2, 1, 2}, 1.0), Tensor(Shape{2, 1}, 1.0), w);
    CHECK(tl.value == 0.0);
    CHECK_FALSE(tl.total.defined());
  }
}

TEST_CASE("temporal loss equals a brute-force implementation on random instances") {
  rng::Stream s(7, "tl");
  for (int trial = 0; trial < 30; ++trial) {
    const auto c = static_cast<std::uint64_t>(trial);
    const std::int64_t T = 2 + static_cast<std::int64_t>(s.below(c * 8, 3));
    const std::int64_t N = 1 + static_cast<std::int64_t>(s.below(c * 8 + 1, 4));
    const std::int64_t hw = 5;
    const int layers = 1 + static_cast<int>(s.below(c * 8 + 2, 2));
    ag::Tape tape;
    std::vector<ag::Var> lv;
    std::vector<Tensor> lt;
    for (int l = 0; l < layers; ++l) {
      Tensor m = random_tensor({T, 1, hw, hw}, 800 + c * 31 + static_cast<std::uint64_t>(l), 0.0, 1.0);
      lt.push_back(m);
      lv.push_back(tape.leaf(m, true));
    }
    Tensor traj = random_tensor({N, T, 2}, 900 + c, 0.0, 4.0);
    Tensor vis(Shape{N, T});
    for (std::int64_t i = 0; i < vis.numel(); ++i)
      vis[i] = s.uniform(c * 1000 + 300 + static_cast<std::uint64_t>(i)) < 0.8 ? 1.0 : 0.0;
    losses::LossWeights w;
    w.mask_layer.assign(static_cast<std::size_t>(layers), 0.5);
    w.temporal = 10.0;
    const auto tl = losses::temporal_loss(lv, traj, vis, w);

    double expect = 0.0;
    for (int l = 0; l < layers; ++l) {
      double acc = 0.0;
      std::int64_t samples = 0;
      for (std::int64_t t1 = 0; t1 < T; ++t1)
        for (std::int64_t t2 = t1 + 1; t2 < T; ++t2)
          for (std::int64_t i = 0; i < N; ++i) {
            if (vis.at({i, t1}) != 1.0 || vis.at({i, t2}) != 1.0) continue;
            Tensor f1(Shape{hw, hw}), f2(Shape{hw, hw});
            for (std::int64_t p = 0; p < hw * hw; ++p) {
              f1[p] = lt[static_cast<std::size_t>(l)][t1 * hw * hw + p];
              f2[p] = lt[static_cast<std::size_t>(l)][t2 * hw * hw + p];
            }
            const double v1 = bilinear_oracle(f1, traj.at({i, t1, 0}), traj.at({i, t1, 1}));
            const double v2 = bilinear_oracle(f2, traj.at({i, t2, 0}), traj.at({i, t2, 1}));
            acc += (v1 - v2) * (v1 - v2);
            ++samples;
          }
      if (samples > 0) expect += 10.0 * 0.5 * acc / static_cast<double>(samples);
    }
    CHECK(tl.value == doctest::Approx(expect).epsilon(1e-8));
  }
}

TEST_CASE("temporal loss pair accounting and monotone response") {
  const std::int64_t T = 5;
  ag::Tape tape;
  Tensor masks = random_tensor({T, 1, 6, 6}, 8, 0.2, 0.8);
  std::vector<ag::Var> layers = {tape.leaf(masks, true)};
  Tensor traj = random_tensor({3, T, 2}, 9, 1.0, 4.0);
  Tensor vis(Shape{3, T}, 1.0);
  losses::LossWeights w;
  w.mask_layer = {1.0};
  const auto tl = losses::temporal_loss(layers, traj, vis, w);
  CHECK(tl.pairs_used == T * (T - 1) / 2);

  // increase disagreement at tracked points: frame 0 brighter everywhere
  Tensor worse = masks.clone();
  for (std::int64_t i = 0; i < 36; ++i) worse[i] = std::min(1.0, worse[i] + 0.15);
  ag::Tape tape2;
  std::vector<ag::Var> layers2 = {tape2.leaf(worse, true)};
  const auto tl2 = losses::temporal_loss(layers2, traj, vis, w);
  CHECK(tl2.value > tl.value);

  // pair subsampling cap
  losses::LossWeights wube = w;
  wube.pair_limit = 3;
  const auto tl3 = losses::temporal_loss(layers, traj, vis, wube, 42);
  CHECK(tl3.pairs_used == 3);
}

TEST_CASE("temporal loss is invariant to points occluded in either frame") {
  ag::Tape tape;
  Tensor masks = random_tensor({3, 1, 6, 6}, 10, 0.0, 1.0);
  std::vector<ag::Var> layers = {tape.leaf(masks, true)};
  Tensor traj = random_tensor({4, 3, 2}, 11, 1.0, 4.0);
  Tensor vis(Shape{4, 3}, 1.0);
  vis.at({2, 1}) = 0.0;
  losses::LossWeights w;
  w.mask_layer = {1.0};
  const double base = losses::temporal_loss(layers, traj, vis, w).value;
  Tensor moved = traj.clone();
  moved.at({2, 1, 0}) = 0.0;  // occluded sample position must not matter
  moved.at({2, 1, 1}) = 0.0;
  const double after = losses::temporal_loss(layers, moved, vis, w).value;
  CHECK(after == base);
}

TEST_CASE("phantom ground truth is an analytic zero of the temporal loss") {
  phantom::PhantomSpec spec;
  spec.seed = 12;
  spec.amplitude = 0.1;
  const auto gt = phantom::generate_clip(spec, 48);
  // keep interior points only, as stated: blur_sigma + 1 inside the band
  const double margin = spec.blur_sigma + 1.0;
  std::vector<std::int64_t> keep;
  for (std::int64_t i = 0; i < gt.tracks.n(); ++i) {
    const double rho = std::hypot(gt.tracks.positions.at({i, 0, 0}) - spec.cx,
                                  gt.tracks.positions.at({i, 0, 1}) - spec.cy);
    if (rho >= spec.r_in0 + margin && rho <= spec.r_out0 - margin) keep.push_back(i);
  }
  REQUIRE(keep.size() >= 4);
  Tensor traj(Shape{static_cast<std::int64_t>(keep.size()), spec.frames, 2});
  Tensor vis(Shape{static_cast<std::int64_t>(keep.size()), spec.frames});
  for (std::size_t j = 0; j < keep.size(); ++j)
    for (std::int64_t t = 0; t < spec.frames; ++t) {
      traj.at({static_cast<std::int64_t>(j), t, 0}) = gt.tracks.positions.at({keep[j], t, 0});
      traj.at({static_cast<std::int64_t>(j), t, 1}) = gt.tracks.positions.at({keep[j], t, 1});
      vis.at({static_cast<std::int64_t>(j), t}) = gt.tracks.visibility.at({keep[j], t});
    }
  ag::Tape tape;
  std::vector<ag::Var> layers = {
      tape.leaf(gt.masks.reshaped(Shape{spec.frames, 1, spec.height, spec.width}), true)};
  losses::LossWeights w;
  w.mask_layer = {1.0};
  w.temporal = 1.0;
  w.temporal_layer_scaled = false;
  const auto tl = losses::temporal_loss(layers, traj, vis, w);
  CHECK(tl.value <= 1e-3);
}

TEST_CASE("loss gradients match central differences (64-bit)") {
  SUBCASE("dice") {
    Tensor gt = binary_mask({5, 5}, 12);
    Tensor pred = random_tensor({5, 5}, 13, 0.05, 0.95);
    ag::Tape tape;
    ag::Var p = tape.leaf(pred, true);
    tape.backward(losses::dice_loss(p, gt, 1.0));
    auto forward = [&](const std::vector<Tensor>& xs) {
      ag::Tape t2;
      return losses::dice_loss(t2.leaf(xs[0], false), gt, 1.0).val()[0];
    };
    ag::ensure_grad(p.node);
    const auto res = gradcheck::check(forward, {pred}, {p.node->grad});
    CHECK(res.max_rel_err < 1e-3);
  }
  SUBCASE("temporal, including point gradients through the sampler") {
    Tensor masks = random_tensor({3, 1, 5, 5}, 14, 0.1, 0.9);
    Tensor traj = random_tensor({2, 3, 2}, 15, 0.3, 3.4);
    Tensor vis(Shape{2, 3}, 1.0);
    losses::LossWeights w;
    w.mask_layer = {1.0};
    ag::Tape tape;
    ag::Var m = tape.leaf(masks, true);
    const auto tl = losses::temporal_loss({m}, traj, vis, w);
    tape.backward(tl.total);
    auto forward = [&](const std::vector<Tensor>& xs) {
      ag::Tape t2;
      return losses::temporal_loss({t2.leaf(xs[0], false)}, traj, vis, w).value;
    };
    ag::ensure_grad(m.node);
    const auto res = gradcheck::check(forward, {masks}, {m.node->grad});
    CHECK(res.max_rel_err < 1e-3);
  }
  SUBCASE("mask loss") {
    Tensor gt = binary_mask({2, 1, 4, 4}, 16);
    Tensor m0 = random_tensor({2, 1, 4, 4}, 17, 0.05, 0.95);
    Tensor m1 = random_tensor({2, 1, 4, 4}, 18, 0.05, 0.95);
    losses::LossWeights w;
    w.mask_layer = {0.5, 1.0};
    ag::Tape tape;
    ag::Var v0 = tape.leaf(m0, true), v1 = tape.leaf(m1, true);
    tape.backward(losses::mask_loss({v0, v1}, gt, {}, w).total);
    auto forward = [&](const std::vector<Tensor>& xs) {
      ag::Tape t2;
      return losses::mask_loss({t2.leaf(xs[0], false), t2.leaf(xs[1], false)}, gt, {}, w)
          .total.val()[0];
    };
    ag::ensure_grad(v0.node);
    ag::ensure_grad(v1.node);
    const auto res = gradcheck::check(forward, {m0, m1}, {v0.node->grad, v1.node->grad});
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("sparse annotation restricts the dice to annotated frames") {
  Tensor gt = binary_mask({3, 1, 4, 4}, 19);
  ag::Tape tape;
  Tensor m = random_tensor({3, 1, 4, 4}, 20, 0.1, 0.9);
  std::vector<ag::Var> layers = {tape.leaf(m, true)};
  losses::LossWeights w;
  w.mask_layer = {1.0};
  const auto full = losses::mask_loss(layers, gt, {}, w);
  const auto sparse = losses::mask_loss(layers, gt, {1}, w);
  // frame-1-only loss must ignore other frames entirely
  Tensor m2 = m.clone();
  for (std::int64_t i = 0; i < 16; ++i) m2[i] = 0.99;  // perturb frame 0
  ag::Tape tape2;
  const auto sparse2 = losses::mask_loss({tape2.leaf(m2, true)}, gt, {1}, w);
  CHECK(sparse.total.val()[0] == sparse2.total.val()[0]);
  CHECK(full.total.val()[0] != sparse.total.val()[0]);
  CHECK_THROWS_AS(losses::mask_loss(layers, gt, {7}, w), ConfigError);
}
