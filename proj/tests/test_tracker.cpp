#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pointseg/tracker.hpp"

using namespace pointseg;
using gradcheck::random_tensor;

namespace {

encoder::EncoderConfig tiny_enc() {
  encoder::EncoderConfig c;
  c.dim = 16;
  c.heads = 2;
  c.layers = 1;
  c.strides = {4, 8};
  c.sampling_points = 2;
  return c;
}

tracker::TrackerConfig tiny_cfg() {
  tracker::TrackerConfig c;
  c.refine_layers = 2;
  c.grid = 3;
  return c;
}

data::TrajectorySet random_tracks(std::int64_t n, std::int64_t t, std::uint64_t seed) {
  data::TrajectorySet ts;
  ts.positions = random_tensor({n, t, 2}, seed, 2.0, 13.0);
  ts.visibility = Tensor(Shape{n, t});
  rng::Stream s(seed, "vis");
  for (std::int64_t i = 0; i < ts.visibility.numel(); ++i)
    ts.visibility[i] = s.below(static_cast<std::uint64_t>(i), 4) ? 1.0 : 0.0;
  return ts;
}

}  // namespace

TEST_CASE("seed_points grid arithmetic") {
  tracker::TrackerConfig c;
  SUBCASE("2x2 grid on a 64-frame") {
    c.grid = 2;
    const Tensor p = tracker::seed_points(c, 64, 64);
    REQUIRE(p.shape() == Shape{4, 2});
    CHECK(p.at({0, 0}) == 16.0);
    CHECK(p.at({0, 1}) == 16.0);
    CHECK(p.at({1, 0}) == 48.0);
    CHECK(p.at({1, 1}) == 16.0);
    CHECK(p.at({2, 0}) == 16.0);
    CHECK(p.at({2, 1}) == 48.0);
    CHECK(p.at({3, 0}) == 48.0);
    CHECK(p.at({3, 1}) == 48.0);
  }
  SUBCASE("single point lands at the center") {
    c.grid = 1;
    const Tensor p = tracker::seed_points(c, 64, 64);
    REQUIRE(p.shape() == Shape{1, 2});
    CHECK(p.at({0, 0}) == 32.0);
    CHECK(p.at({0, 1}) == 32.0);
  }
  SUBCASE("default grid gives 64 points") {
    c.grid = 8;
    CHECK(tracker::seed_points(c, 64, 64).dim(0) == 64);
  }
  SUBCASE("manual points append and are validated") {
    c.grid = 2;
    c.manual_points = {{10.0, 20.0}};
    CHECK(tracker::seed_points(c, 64, 64).dim(0) == 5);
    c.manual_points = {{80.0, 20.0}};
    CHECK_THROWS_WITH_AS(tracker::seed_points(c, 64, 64), doctest::Contains("outside"),
                         ConfigError);
  }
}

TEST_CASE("zero-initialized delta heads give the identity tracker") {
  nn::ParamStore ps(21);
  tracker::Tracker trk(ps, "trk", tiny_enc(), tiny_cfg());
  const Tensor frames = random_tensor({3, 16, 16}, 1, 0.0, 1.0);
  const Tensor seeds = tracker::seed_points(tiny_cfg(), 16, 16);
  const auto out = trk.track(frames, seeds);
  REQUIRE(out.layer_positions.size() == 2);
  for (const Tensor& lp : out.layer_positions)
    for (std::int64_t i = 0; i < seeds.dim(0); ++i)
      for (std::int64_t t = 0; t < 3; ++t) {
        CHECK(lp.at({i, t, 0}) == seeds.at({i, 0}));
        CHECK(lp.at({i, t, 1}) == seeds.at({i, 1}));
      }
}

TEST_CASE("visibility probabilities live strictly inside (0,1)") {
  nn::ParamStore ps(22);
  tracker::Tracker trk(ps, "trk", tiny_enc(), tiny_cfg());
  const auto out = trk.track(random_tensor({2, 16, 16}, 2, 0.0, 1.0),
                             tracker::seed_points(tiny_cfg(), 16, 16));
  for (std::int64_t i = 0; i < out.visibility_prob.numel(); ++i) {
    CHECK(out.visibility_prob[i] > 0.0);
    CHECK(out.visibility_prob[i] < 1.0);
  }
}

TEST_CASE("nonzero delta heads move layer outputs apart") {
  nn::ParamStore ps(23);
  tracker::Tracker trk(ps, "trk", tiny_enc(), tiny_cfg());
  rng::Stream s(3, "delta");
  ps.for_each([&](nn::Parameter& p) {
    if (p.name.find(".delta.") == std::string::npos) return;
    for (std::int64_t i = 0; i < p.value.numel(); ++i)
      p.value[i] = s.uniform(static_cast<std::uint64_t>(i) + rng::stream_id(p.name), -0.05, 0.05);
  });
  const auto out = trk.track(random_tensor({2, 16, 16}, 4, 0.0, 1.0),
                             tracker::seed_points(tiny_cfg(), 16, 16));
  double diff = 0.0;
  for (std::int64_t i = 0; i < out.layer_positions[0].numel(); ++i)
    diff += std::fabs(out.layer_positions[1][i] - out.layer_positions[0][i]);
  CHECK(diff > 0.0);
}

TEST_CASE("tracking loss: perfect prediction scores zero") {
  const auto gt = random_tracks(3, 4, 5);
  ag::Tape tape;
  tracker::TrackerForward fwd;
  fwd.layer_positions = {tape.leaf(gt.positions.clone(), true),
                         tape.leaf(gt.positions.clone(), true)};
  // confident correct logits (+-20)
  Tensor logits(Shape{3, 4});
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    logits[i] = gt.visibility[i] == 1.0 ? 20.0 : -20.0;
  fwd.visibility_logits = tape.leaf(logits, true);
  const auto loss = tracking_loss(fwd, gt, {});
  CHECK(loss.position_term == 0.0);
  CHECK(loss.visibility_term < 1e-8);
}

TEST_CASE("tracking loss: single point, single frame, off by (3,4)") {
  data::TrajectorySet gt;
  gt.positions = Tensor(Shape{1, 1, 2}, std::vector<double>{10.0, 10.0});
  gt.visibility = Tensor(Shape{1, 1}, 1.0);
  ag::Tape tape;
  tracker::TrackerForward fwd;
  fwd.layer_positions = {tape.leaf(Tensor(Shape{1, 1, 2}, std::vector<double>{13.0, 14.0}), true)};
  fwd.visibility_logits = tape.leaf(Tensor(Shape{1, 1}, std::vector<double>{20.0}), true);
  tracker::TrackingLossWeights w;
  w.visibility = 0.0;
  const auto loss = tracking_loss(fwd, gt, w);
  CHECK(loss.position_term == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("tracking loss equals an independently coded brute-force loop") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(trial % 4);
    const std::int64_t t = 2 + static_cast<std::int64_t>(trial % 3);
    const int layers = 1 + static_cast<int>(trial % 3);
    const auto gt = random_tracks(n, t, 100 + trial);
    ag::Tape tape;
    tracker::TrackerForward fwd;
    for (int l = 0; l < layers; ++l)
      fwd.layer_positions.push_back(tape.leaf(random_tensor({n, t, 2}, 200 + trial * 7 + static_cast<std::uint64_t>(l), 0.0, 15.0), true));
    fwd.visibility_logits = tape.leaf(random_tensor({n, t}, 300 + trial, -3.0, 3.0), true);

    tracker::TrackingLossWeights w;
    w.visibility = 0.7;
    w.layer.assign(static_cast<std::size_t>(layers), 0.0);
    rng::Stream ws(400 + trial, "w");
    for (int l = 0; l < layers; ++l) w.layer[static_cast<std::size_t>(l)] = ws.uniform(static_cast<std::uint64_t>(l), 0.1, 2.0);

    const auto loss = tracking_loss(fwd, gt, w);

    // brute force, written independently of the library reductions
    double expect = 0.0;
    for (int l = 0; l < layers; ++l) {
      double sum = 0.0;
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t f = 0; f < t; ++f) {
          if (gt.visibility.at({i, f}) != 1.0) continue;
          for (std::int64_t c = 0; c < 2; ++c) {
            sum += std::fabs(fwd.layer_positions[static_cast<std::size_t>(l)].val().at({i, f, c}) -
                             gt.positions.at({i, f, c}));
            ++count;
          }
        }
      expect += w.layer[static_cast<std::size_t>(l)] * (count ? sum / static_cast<double>(count) : 0.0);
    }
    double ce = 0.0;
    for (std::int64_t i = 0; i < n * t; ++i) {
      const double z = fwd.visibility_logits.val()[i];
      const double y = gt.visibility[i];
      ce += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
    }
    expect += 0.7 * ce / static_cast<double>(n * t);
    CHECK(loss.total.val()[0] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("tracking loss gradients match central differences") {
  const auto gt = random_tracks(3, 3, 6);
  auto build = [&](ag::Tape& tape, const Tensor& p0, const Tensor& p1, const Tensor& lg) {
    tracker::TrackerForward fwd;
    fwd.layer_positions = {tape.leaf(p0, true), tape.leaf(p1, true)};
    fwd.visibility_logits = tape.leaf(lg, true);
    return fwd;
  };
  Tensor p0 = random_tensor({3, 3, 2}, 7, 0.0, 15.0);
  Tensor p1 = random_tensor({3, 3, 2}, 8, 0.0, 15.0);
  Tensor lg = random_tensor({3, 3}, 9, -2.0, 2.0);

  ag::Tape tape;
  auto fwd = build(tape, p0, p1, lg);
  const auto loss = tracking_loss(fwd, gt, {});
  tape.backward(loss.total);
  std::vector<Tensor> analytic;
  for (auto& v : fwd.layer_positions) {
    ag::ensure_grad(v.node);
    analytic.push_back(v.node->grad);
  }
  ag::ensure_grad(fwd.visibility_logits.node);
  analytic.push_back(fwd.visibility_logits.node->grad);

  auto forward = [&](const std::vector<Tensor>& xs) {
    ag::Tape t2;
    auto f2 = build(t2, xs[0], xs[1], xs[2]);
    return tracking_loss(f2, gt, {}).total.val()[0];
  };
  const auto res = gradcheck::check(forward, {p0, p1, lg}, analytic, 1e-6);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("position loss ignores predictions at gt-invisible pairs") {
  auto gt = random_tracks(4, 3, 10);
  gt.visibility.at({1, 2}) = 0.0;  // ensure at least one invisible pair
  Tensor pred = random_tensor({4, 3, 2}, 11, 0.0, 15.0);

  auto eval = [&](const Tensor& p) {
    ag::Tape tape;
    tracker::TrackerForward fwd;
    fwd.layer_positions = {tape.leaf(p, true)};
    fwd.visibility_logits = tape.leaf(Tensor(Shape{4, 3}), true);
    return tracking_loss(fwd, gt, {}).position_term;
  };
  const double base = eval(pred);
  Tensor moved = pred.clone();
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t t = 0; t < 3; ++t)
      if (gt.visibility.at({i, t}) == 0.0) {
        moved.at({i, t, 0}) += 100.0;
        moved.at({i, t, 1}) -= 50.0;
      }
  CHECK(eval(moved) == base);
}

TEST_CASE("tracking loss rejects malformed inputs") {
  const auto gt = random_tracks(2, 2, 12);
  ag::Tape tape;
  tracker::TrackerForward fwd;
  fwd.layer_positions = {tape.leaf(random_tensor({3, 2, 2}, 13), true)};
  fwd.visibility_logits = tape.leaf(Tensor(Shape{3, 2}), true);
  CHECK_THROWS_AS(tracking_loss(fwd, gt, {}), ConfigError);
}
