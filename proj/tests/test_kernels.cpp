#include <doctest.h>

#include <cmath>

#include "pointseg/kernels.hpp"
#include "pointseg/parallel.hpp"
#include "pointseg/rng.hpp"
#include "pointseg/tensor.hpp"

using namespace pointseg;
using kern::i64;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  rng::Stream s(seed, "kernel-test");
  for (i64 i = 0; i < t.numel(); ++i) t[i] = s.uniform(static_cast<std::uint64_t>(i), lo, hi);
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (i64 i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// Textbook triple loop, kept independent of the production gemm.
void gemm_oracle(bool ta, bool tb, i64 m, i64 n, i64 k, const double* a, const double* b,
                 double* c) {
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      double acc = 0.0;
      for (i64 p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
}

struct ThreadGuard {
  int prev;
  explicit ThreadGuard(int n) : prev(par::threads()) { par::set_threads(n); }
  ~ThreadGuard() { par::set_threads(prev); }
};

}  // namespace

TEST_CASE("gemm matches the oracle for all transpose combinations") {
  const i64 m = 7, n = 5, k = 9;
  for (const bool ta : {false, true})
    for (const bool tb : {false, true}) {
      Tensor a = ta ? rand_tensor({k, m}, 1) : rand_tensor({m, k}, 1);
      Tensor b = tb ? rand_tensor({n, k}, 2) : rand_tensor({k, n}, 2);
      Tensor got({m, n}), want({m, n});
      kern::gemm_serial(ta, tb, m, n, k, a.data(), b.data(), got.data(), false);
      gemm_oracle(ta, tb, m, n, k, a.data(), b.data(), want.data());
      for (i64 i = 0; i < m * n; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("parallel kernels are bit-identical to their serial references") {
  ThreadGuard tg(4);

  SUBCASE("gemm") {
    const i64 m = 33, n = 17, k = 21;
    Tensor a = rand_tensor({m, k}, 3), b = rand_tensor({k, n}, 4);
    Tensor s({m, n}), p({m, n});
    kern::gemm_serial(false, false, m, n, k, a.data(), b.data(), s.data(), false);
    kern::gemm_parallel(false, false, m, n, k, a.data(), b.data(), p.data(), false);
    CHECK(bit_equal(s, p));
  }

  SUBCASE("conv2d forward/backward") {
    for (const i64 stride : {1, 2}) {
      kern::Conv2dShape cs{3, 4, 12, 10, 5, 3, 3, stride, 1};
      Tensor x = rand_tensor({cs.n, cs.cin, cs.h, cs.w}, 5);
      Tensor w = rand_tensor({cs.cout, cs.cin, cs.kh, cs.kw}, 6);
      Tensor bias = rand_tensor({cs.cout}, 7);
      Tensor ys({cs.n, cs.cout, cs.oh(), cs.ow()}), yp(ys.shape());
      kern::conv2d_forward_serial(cs, x.data(), w.data(), bias.data(), ys.data());
      kern::conv2d_forward_parallel(cs, x.data(), w.data(), bias.data(), yp.data());
      CHECK(bit_equal(ys, yp));

      Tensor dy = rand_tensor(ys.shape(), 8);
      Tensor dxs(x.shape()), dxp(x.shape());
      kern::conv2d_backward_input_serial(cs, dy.data(), w.data(), dxs.data());
      kern::conv2d_backward_input_parallel(cs, dy.data(), w.data(), dxp.data());
      CHECK(bit_equal(dxs, dxp));

      Tensor dws(w.shape()), dwp(w.shape());
      kern::conv2d_backward_weight_serial(cs, x.data(), dy.data(), dws.data());
      kern::conv2d_backward_weight_parallel(cs, x.data(), dy.data(), dwp.data());
      CHECK(bit_equal(dws, dwp));
    }
  }

  SUBCASE("tconv2x forward/backward") {
    const i64 n = 2, cin = 5, cout = 3, h = 6, w = 7;
    Tensor x = rand_tensor({n, cin, h, w}, 9);
    Tensor wt = rand_tensor({cin, cout, 2, 2}, 10);
    Tensor bias = rand_tensor({cout}, 11);
    Tensor ys({n, cout, 2 * h, 2 * w}), yp(ys.shape());
    kern::tconv2x_forward_serial(n, cin, cout, h, w, x.data(), wt.data(), bias.data(), ys.data());
    kern::tconv2x_forward_parallel(n, cin, cout, h, w, x.data(), wt.data(), bias.data(), yp.data());
    CHECK(bit_equal(ys, yp));

    Tensor dy = rand_tensor(ys.shape(), 12);
    Tensor dxs(x.shape()), dxp(x.shape());
    kern::tconv2x_backward_input_serial(n, cin, cout, h, w, dy.data(), wt.data(), dxs.data());
    kern::tconv2x_backward_input_parallel(n, cin, cout, h, w, dy.data(), wt.data(), dxp.data());
    CHECK(bit_equal(dxs, dxp));
  }

  SUBCASE("bilinear gather") {
    const i64 c = 6, h = 9, w = 11, m = 200;
    Tensor f = rand_tensor({c, h, w}, 13);
    Tensor pts = rand_tensor({m, 2}, 14, -2.0, 12.0);
    Tensor s({m, c}), p({m, c});
    kern::bilinear_gather_serial(c, h, w, f.data(), m, pts.data(), s.data());
    kern::bilinear_gather_parallel(c, h, w, f.data(), m, pts.data(), p.data());
    CHECK(bit_equal(s, p));
  }
}

TEST_CASE("conv2d forward matches a padding-aware direct computation") {
  kern::Conv2dShape cs{1, 2, 5, 6, 3, 3, 3, 2, 1};
  Tensor x = rand_tensor({cs.n, cs.cin, cs.h, cs.w}, 20);
  Tensor w = rand_tensor({cs.cout, cs.cin, cs.kh, cs.kw}, 21);
  Tensor bias = rand_tensor({cs.cout}, 22);
  Tensor y({cs.n, cs.cout, cs.oh(), cs.ow()});
  kern::conv2d_forward(cs, x.data(), w.data(), bias.data(), y.data());
  for (i64 f = 0; f < cs.cout; ++f)
    for (i64 oy = 0; oy < cs.oh(); ++oy)
      for (i64 ox = 0; ox < cs.ow(); ++ox) {
        double acc = bias[f];
        for (i64 c = 0; c < cs.cin; ++c)
          for (i64 ky = 0; ky < 3; ++ky)
            for (i64 kx = 0; kx < 3; ++kx) {
              const i64 iy = oy * cs.stride - cs.pad + ky;
              const i64 ix = ox * cs.stride - cs.pad + kx;
              if (iy < 0 || iy >= cs.h || ix < 0 || ix >= cs.w) continue;
              acc += x.at({0, c, iy, ix}) * w.at({f, c, ky, kx});
            }
        CHECK(y.at({0, f, oy, ox}) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("bilinear gather: integer coordinates return exact pixel values") {
  Tensor f = rand_tensor({1, 4, 5}, 23);
  for (i64 y = 0; y < 4; ++y)
    for (i64 x = 0; x < 5; ++x) {
      double out;
      const double pt[2] = {static_cast<double>(x), static_cast<double>(y)};
      kern::bilinear_gather(1, 4, 5, f.data(), 1, pt, &out);
      CHECK(out == f[y * 5 + x]);
    }
}

TEST_CASE("bilinear gather clamps out-of-range coordinates to the border") {
  Tensor f = rand_tensor({1, 3, 3}, 24);
  double out;
  const double far_corner[2] = {99.0, 99.0};
  kern::bilinear_gather(1, 3, 3, f.data(), 1, far_corner, &out);
  CHECK(out == f[8]);
  const double negative[2] = {-5.0, -5.0};
  kern::bilinear_gather(1, 3, 3, f.data(), 1, negative, &out);
  CHECK(out == f[0]);
}
