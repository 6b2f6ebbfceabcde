#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "pointseg/losses.hpp"
#include "pointseg/segmenter.hpp"

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

segmenter::FusionConfig tiny_fusion() {
  segmenter::FusionConfig c;
  c.layers = 2;
  return c;
}

segmenter::PointInputs random_points(std::int64_t n, std::int64_t t, std::int64_t d,
                                     std::uint64_t seed) {
  segmenter::PointInputs pi;
  pi.positions = random_tensor({n, t, 2}, seed, 2.0, 13.0);
  pi.visibility = Tensor(Shape{n, t}, 1.0);
  pi.tokens = random_tensor({n, t, d}, seed + 1);
  return pi;
}

void zero_param(nn::ParamStore& ps, const std::string& substr) {
  ps.for_each([&](nn::Parameter& p) {
    if (p.name.find(substr) != std::string::npos) p.value.fill(0.0);
  });
}

}  // namespace

TEST_CASE("attention block invariants") {
  nn::ParamStore ps(31);
  auto blk = nn::AttnBlock::create(ps, "blk", 8, 2);

  SUBCASE("a single key carries softmax weight 1") {
    // output - x must equal Wo(Wv(LN(kv))): attention over one key is that key
    Tensor x = random_tensor({1, 3, 8}, 1);
    Tensor kv = random_tensor({1, 1, 8}, 2);
    nn::NoGradGuard ng;
    ag::Tape tape;
    ag::Var out = blk(tape, tape.leaf(x), tape.leaf(kv), {}, {});
    ag::Var vproj = blk.attn.wo(tape, blk.attn.wv(tape, blk.ln_kv(tape, tape.leaf(kv))));
    for (std::int64_t q = 0; q < 3; ++q)
      for (std::int64_t j = 0; j < 8; ++j)
        CHECK(out.val().at({0, q, j}) ==
              doctest::Approx(x.at({0, q, j}) + vproj.val().at({0, 0, j})).epsilon(1e-9));
  }

  SUBCASE("permuting keys together with their positional encodings changes nothing") {
    Tensor x = random_tensor({1, 2, 8}, 3);
    Tensor kv = random_tensor({1, 5, 8}, 4);
    Tensor pos = random_tensor({1, 5, 8}, 5);
    Tensor kv_perm(kv.shape()), pos_perm(pos.shape());
    const std::vector<std::int64_t> perm = {3, 0, 4, 1, 2};
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t j = 0; j < 8; ++j) {
        kv_perm.at({0, i, j}) = kv.at({0, perm[static_cast<std::size_t>(i)], j});
        pos_perm.at({0, i, j}) = pos.at({0, perm[static_cast<std::size_t>(i)], j});
      }
    nn::NoGradGuard ng;
    ag::Tape tape;
    ag::Var a = blk(tape, tape.leaf(x), tape.leaf(kv), {}, tape.leaf(pos));
    ag::Var b = blk(tape, tape.leaf(x), tape.leaf(kv_perm), {}, tape.leaf(pos_perm));
    for (std::int64_t i = 0; i < a.val().numel(); ++i)
      CHECK(a.val()[i] == doctest::Approx(b.val()[i]).epsilon(1e-10));
  }

  SUBCASE("zero value projection reduces to the identity") {
    zero_param(ps, "blk.attn.wv");
    zero_param(ps, "blk.attn.wo");
    Tensor x = random_tensor({1, 4, 8}, 6);
    Tensor kv = random_tensor({1, 5, 8}, 7);
    nn::NoGradGuard ng;
    ag::Tape tape;
    ag::Var out = blk(tape, tape.leaf(x), tape.leaf(kv), {}, {});
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(out.val()[i] == x[i]);
  }
}

TEST_CASE("temporal attention specifics") {
  nn::ParamStore ps(32);
  auto blk = nn::AttnBlock::create(ps, "tsa", 8, 2);

  SUBCASE("T=1 with zero value weights is the identity, not an error") {
    zero_param(ps, "tsa.attn.wv");
    zero_param(ps, "tsa.attn.wo");
    Tensor x = random_tensor({4, 1, 8}, 8);  // 4 points, single frame
    nn::NoGradGuard ng;
    ag::Tape tape;
    ag::Var out = blk(tape, tape.leaf(x), tape.leaf(x), {}, {});
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(out.val()[i] == x[i]);
  }

  SUBCASE("shuffling frames together with temporal encodings shuffles outputs") {
    Tensor x = random_tensor({1, 4, 8}, 9);
    Tensor pe = random_tensor({1, 4, 8}, 10);
    const std::vector<std::int64_t> perm = {2, 0, 3, 1};
    Tensor xs(x.shape()), ps_(pe.shape());
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 8; ++j) {
        xs.at({0, i, j}) = x.at({0, perm[static_cast<std::size_t>(i)], j});
        ps_.at({0, i, j}) = pe.at({0, perm[static_cast<std::size_t>(i)], j});
      }
    nn::NoGradGuard ng;
    ag::Tape tape;
    ag::Var a = blk(tape, tape.leaf(x), tape.leaf(x), tape.leaf(pe), tape.leaf(pe));
    ag::Var b = blk(tape, tape.leaf(xs), tape.leaf(xs), tape.leaf(ps_), tape.leaf(ps_));
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 8; ++j)
        CHECK(b.val().at({0, i, j}) ==
              doctest::Approx(a.val().at({0, perm[static_cast<std::size_t>(i)], j})).epsilon(1e-10));
  }
}

TEST_CASE("fusion forward emits one snapshot per layer") {
  nn::ParamStore ps(33);
  segmenter::FusionConfig fc = tiny_fusion();
  fc.layers = 3;
  segmenter::Segmenter seg(ps, "seg", tiny_enc(), fc, 16);
  const auto pi = random_points(5, 2, 16, 11);
  const auto out = seg.infer(random_tensor({2, 16, 16}, 12, 0.0, 1.0), &pi);
  CHECK(out.layer_masks.size() == 3);
  CHECK(out.layer_logits.size() == 3);
  CHECK(out.layer_masks[0].shape() == Shape{2, 1, 16, 16});
}

TEST_CASE("all five ablation toggle patterns construct and run forward/backward") {
  struct Row {
    bool points, mlp, sa, tsa;
  };
  const std::vector<Row> rows = {{false, false, false, false},
                                 {true, false, false, false},
                                 {true, true, false, false},
                                 {true, true, true, false},
                                 {true, true, true, true}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    nn::ParamStore ps(40 + r);
    segmenter::FusionConfig fc = tiny_fusion();
    fc.use_points = rows[r].points;
    fc.use_mlp = rows[r].mlp;
    fc.use_point_sa = rows[r].sa;
    fc.use_point_tsa = rows[r].tsa;
    segmenter::Segmenter seg(ps, "seg", tiny_enc(), fc, 16);
    const auto pi = random_points(4, 2, 16, 50 + r);
    const Tensor frames = random_tensor({2, 16, 16}, 60 + r, 0.0, 1.0);
    ag::Tape tape;
    const auto fwd = seg.forward(tape, frames, rows[r].points ? &pi : nullptr);
    CHECK(fwd.layer_masks.size() == 2);
    const Tensor gt = [&]() {
      Tensor g(Shape{2, 16, 16});
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = (i % 3) == 0 ? 1.0 : 0.0;
      return g;
    }();
    losses::LossWeights lw;
    lw.mask_layer = {0.5, 1.0};
    const auto ml = losses::mask_loss(fwd.layer_masks, gt, {}, lw);
    tape.backward(ml.total);  // backward must succeed for every pattern
    CHECK(std::isfinite(ml.total.val()[0]));
  }
}

TEST_CASE("point-toggle inconsistency is a configuration error") {
  segmenter::FusionConfig fc = tiny_fusion();
  fc.use_points = false;
  fc.use_point_sa = true;
  CHECK_THROWS_WITH_AS(fc.validate(), doctest::Contains("toggle"), ConfigError);
}

TEST_CASE("masks stay strictly inside (0,1)") {
  nn::ParamStore ps(34);
  segmenter::Segmenter seg(ps, "seg", tiny_enc(), tiny_fusion(), 16);
  const auto pi = random_points(4, 2, 16, 13);
  const auto out = seg.infer(random_tensor({2, 16, 16}, 14, 0.0, 1.0), &pi);
  for (const Tensor& m : out.layer_masks)
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      CHECK(m[i] > 0.0);
      CHECK(m[i] < 1.0);
    }
}

TEST_CASE("toggling temporal attention changes outputs on a moving probe") {
  const auto pi = random_points(4, 3, 16, 15);
  const Tensor frames = random_tensor({3, 16, 16}, 16, 0.0, 1.0);
  auto run = [&](bool tsa) {
    nn::ParamStore ps(35);  // same seed: identical shared weights
    segmenter::FusionConfig fc = tiny_fusion();
    fc.use_point_tsa = tsa;
    segmenter::Segmenter seg(ps, "seg", tiny_enc(), fc, 16);
    // give the tsa value path nonzero weights when present
    rng::Stream s(17, "tsa");
    ps.for_each([&](nn::Parameter& p) {
      if (p.name.find(".tsa.") == std::string::npos) return;
      for (std::int64_t i = 0; i < p.value.numel(); ++i)
        p.value[i] = s.uniform(static_cast<std::uint64_t>(i) + rng::stream_id(p.name), -0.2, 0.2);
    });
    return seg.infer(frames, &pi);
  };
  const auto with = run(true);
  const auto without = run(false);
  double diff = 0.0;
  for (std::int64_t i = 0; i < with.final_mask().numel(); ++i)
    diff = std::max(diff, std::fabs(with.final_mask()[i] - without.final_mask()[i]));
  CHECK(diff > 0.0);
}

TEST_CASE("mask decode trivial properties") {
  nn::ParamStore ps(36);
  segmenter::Segmenter seg(ps, "seg", tiny_enc(), tiny_fusion(), 16);
  const auto pi = random_points(4, 2, 16, 18);
  const Tensor frames = random_tensor({2, 16, 16}, 19, 0.0, 1.0);

  SUBCASE("output resolution equals the clip resolution") {
    const auto out = seg.infer(frames, &pi);
    CHECK(out.final_mask().dim(2) == 16);
    CHECK(out.final_mask().dim(3) == 16);
  }

  SUBCASE("zero mask-token MLP output pins the mask at 0.5") {
    zero_param(ps, "decode.mask_mlp2");
    const auto out = seg.infer(frames, &pi);
    for (std::int64_t i = 0; i < out.final_mask().numel(); ++i) {
      CHECK(out.layer_logits.back()[i] == 0.0);
      CHECK(out.final_mask()[i] == 0.5);
    }
  }

  SUBCASE("doubling the final mask-token projection doubles all logits") {
    const auto base = seg.infer(frames, &pi);
    nn::Parameter* w = ps.find("seg.decode.mask_mlp2.weight");
    nn::Parameter* b = ps.find("seg.decode.mask_mlp2.bias");
    REQUIRE(w != nullptr);
    for (std::int64_t i = 0; i < w->value.numel(); ++i) w->value[i] *= 2.0;
    for (std::int64_t i = 0; i < b->value.numel(); ++i) b->value[i] *= 2.0;
    const auto doubled = seg.infer(frames, &pi);
    for (std::int64_t i = 0; i < base.layer_logits.back().numel(); ++i)
      CHECK(doubled.layer_logits.back()[i] ==
            doctest::Approx(2.0 * base.layer_logits.back()[i]).epsilon(1e-9));
  }
}

TEST_CASE("deep supervision: the layer-1 mask loss alone reaches layer-1 parameters") {
  nn::ParamStore ps(37);
  segmenter::Segmenter seg(ps, "seg", tiny_enc(), tiny_fusion(), 16);
  const auto pi = random_points(4, 2, 16, 20);
  const Tensor frames = random_tensor({2, 16, 16}, 21, 0.0, 1.0);
  Tensor gt(Shape{2, 16, 16});
  for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = (i % 5) == 0 ? 1.0 : 0.0;

  ag::Tape tape;
  const auto fwd = seg.forward(tape, frames, &pi);
  losses::LossWeights lw;
  lw.mask_layer = {1.0, 0.0};  // only w_M^1
  const auto ml = losses::mask_loss(fwd.layer_masks, gt, {}, lw);
  tape.backward(ml.total);

  double fusion0 = 0.0;
  ps.for_each([&](nn::Parameter& p) {
    if (p.name.find("fusion0") == std::string::npos) return;
    for (std::int64_t i = 0; i < p.grad.numel(); ++i) fusion0 += std::fabs(p.grad[i]);
  });
  CHECK(fusion0 > 0.0);
}

TEST_CASE("tiny end-to-end gradient check (d=16, 8x8, T=2)") {
  encoder::EncoderConfig ec;
  ec.dim = 16;
  ec.heads = 2;
  ec.layers = 1;
  ec.strides = {4, 8};
  ec.sampling_points = 2;
  nn::ParamStore ps(38);
  segmenter::FusionConfig fc;
  fc.layers = 2;
  segmenter::Segmenter seg(ps, "seg", ec, fc, 16);
  const auto pi = random_points(4, 2, 16, 22);
  const Tensor frames = random_tensor({2, 8, 8}, 23, 0.0, 1.0);
  Tensor gt(Shape{2, 8, 8});
  for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = (i % 4) == 0 ? 1.0 : 0.0;
  losses::LossWeights lw;
  lw.mask_layer = {0.5, 1.0};

  auto loss_value = [&]() {
    nn::NoGradGuard ng;
    ag::Tape tape;
    const auto fwd = seg.forward(tape, frames, &pi);
    const auto ml = losses::mask_loss(fwd.layer_masks, gt, {}, lw);
    const auto tl = losses::temporal_loss(fwd.layer_masks, pi.positions, pi.visibility, lw, 0);
    return ml.total.val()[0] + (tl.total.defined() ? tl.value : 0.0);
  };

  // analytic gradients for every parameter
  {
    ag::Tape tape;
    const auto fwd = seg.forward(tape, frames, &pi);
    const auto ml = losses::mask_loss(fwd.layer_masks, gt, {}, lw);
    const auto tl = losses::temporal_loss(fwd.layer_masks, pi.positions, pi.visibility, lw, 0);
    ag::Var total = tl.total.defined() ? ag::add(ml.total, tl.total) : ml.total;
    ps.zero_grad();
    tape.backward(total);
  }

  // probe a spread of parameters with central differences
  rng::Stream pick(24, "e2e");
  double max_rel = 0.0;
  int probed = 0;
  std::vector<nn::Parameter*> params;
  ps.for_each([&](nn::Parameter& p) { params.push_back(&p); });
  for (int k = 0; k < 24; ++k) {
    nn::Parameter* p = params[pick.below(static_cast<std::uint64_t>(2 * k), params.size())];
    if (p->value.numel() == 0) continue;
    const auto idx = static_cast<std::int64_t>(
        pick.below(static_cast<std::uint64_t>(2 * k + 1), static_cast<std::uint64_t>(p->value.numel())));
    const double orig = p->value[idx];
    const double h = 1e-5;
    p->value[idx] = orig + h;
    const double fp = loss_value();
    p->value[idx] = orig - h;
    const double fm = loss_value();
    p->value[idx] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    max_rel = std::max(max_rel, gradcheck::rel_err(p->grad[idx], numeric));
    ++probed;
  }
  CHECK(probed >= 20);
  CHECK(max_rel < 1e-3);
}
