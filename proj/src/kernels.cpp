#include "pointseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <omp.h>

#include "pointseg/parallel.hpp"

namespace pointseg::kern {

namespace {

// Shared per-output helpers. Both kernel variants route every output
// element through these, which pins the accumulation order and keeps
// serial and parallel results bit-identical.

inline double dot_strided(const double* a, i64 stride_a, const double* b,
                          i64 stride_b, i64 k) {
  double acc = 0.0;
  for (i64 i = 0; i < k; ++i) acc += a[i * stride_a] * b[i * stride_b];
  return acc;
}

struct GemmView {
  const double* p;
  i64 rs, cs;  // row / column strides
  const double* row(i64 r) const { return p + r * rs; }
};

inline double gemm_cell(const GemmView& a, const GemmView& b, i64 i, i64 j, i64 k) {
  return dot_strided(a.p + i * a.rs, a.cs, b.p + j * b.cs, b.rs, k);
}

inline void conv_out_range_fwd(i64 k, i64 pad, i64 stride, i64 ilen, i64 olen, i64* lo,
                               i64* hi) {
  i64 l = 0;
  while (l < olen && l * stride - pad + k < 0) ++l;
  i64 h = olen - 1;
  while (h >= 0 && h * stride - pad + k >= ilen) --h;
  *lo = l;
  *hi = h;
}

// One output row; out[ox] accumulates in fixed (c,ky,kx) order.
inline void conv_row(const Conv2dShape& s, const double* x, const double* w,
                     const double* bias, i64 n, i64 f, i64 oy, double* out_row) {
  const i64 ow = s.ow();
  const double b = bias ? bias[f] : 0.0;
  for (i64 ox = 0; ox < ow; ++ox) out_row[ox] = b;
  for (i64 c = 0; c < s.cin; ++c) {
    const double* xc = x + (n * s.cin + c) * s.h * s.w;
    const double* wc = w + (f * s.cin + c) * s.kh * s.kw;
    for (i64 ky = 0; ky < s.kh; ++ky) {
      const i64 iy = oy * s.stride - s.pad + ky;
      if (iy < 0 || iy >= s.h) continue;
      const double* xrow = xc + iy * s.w;
      for (i64 kx = 0; kx < s.kw; ++kx) {
        const double wval = wc[ky * s.kw + kx];
        i64 lo, hi;
        conv_out_range_fwd(kx, s.pad, s.stride, s.w, ow, &lo, &hi);
        const double* xoff = xrow - s.pad + kx;
        for (i64 ox = lo; ox <= hi; ++ox) out_row[ox] += xoff[ox * s.stride] * wval;
      }
    }
  }
}

struct ConvTaps {
  // valid (kernel index, output index) pairs for one spatial coordinate
  i64 k[8], o[8];
  i64 n = 0;
};

inline ConvTaps conv_dx_taps(i64 i, i64 pad, i64 stride, i64 ksize, i64 olen) {
  ConvTaps t;
  for (i64 kk = 0; kk < ksize; ++kk) {
    const i64 num = i + pad - kk;
    if (num < 0 || num % stride) continue;
    const i64 oo = num / stride;
    if (oo >= olen) continue;
    t.k[t.n] = kk;
    t.o[t.n] = oo;
    ++t.n;
  }
  return t;
}

inline double conv_dx_cell(const Conv2dShape& s, const double* dy, const double* w,
                           i64 n, i64 c, i64 iy, const ConvTaps& ty, const ConvTaps& tx) {
  const i64 oh = s.oh(), ow = s.ow();
  (void)iy;
  double acc = 0.0;
  for (i64 f = 0; f < s.cout; ++f) {
    const double* dyf = dy + (n * s.cout + f) * oh * ow;
    const double* wc = w + (f * s.cin + c) * s.kh * s.kw;
    for (i64 a = 0; a < ty.n; ++a) {
      const double* dyrow = dyf + ty.o[a] * ow;
      const double* wrow = wc + ty.k[a] * s.kw;
      for (i64 b = 0; b < tx.n; ++b) acc += dyrow[tx.o[b]] * wrow[tx.k[b]];
    }
  }
  return acc;
}

inline void conv_out_range(i64 k, i64 pad, i64 stride, i64 ilen, i64 olen, i64* lo,
                           i64* hi) {
  // output indices whose input tap k stays in [0, ilen)
  i64 l = 0;
  while (l < olen && l * stride - pad + k < 0) ++l;
  i64 h = olen - 1;
  while (h >= 0 && h * stride - pad + k >= ilen) --h;
  *lo = l;
  *hi = h;
}

inline double conv_dw_cell(const Conv2dShape& s, const double* x, const double* dy,
                           i64 f, i64 c, i64 ky, i64 kx) {
  const i64 oh = s.oh(), ow = s.ow();
  i64 oy_lo, oy_hi, ox_lo, ox_hi;
  conv_out_range(ky, s.pad, s.stride, s.h, oh, &oy_lo, &oy_hi);
  conv_out_range(kx, s.pad, s.stride, s.w, ow, &ox_lo, &ox_hi);
  double acc = 0.0;
  for (i64 n = 0; n < s.n; ++n) {
    const double* xc = x + (n * s.cin + c) * s.h * s.w;
    const double* dyf = dy + (n * s.cout + f) * oh * ow;
    for (i64 oy = oy_lo; oy <= oy_hi; ++oy) {
      const i64 iy = oy * s.stride - s.pad + ky;
      const double* xrow = xc + iy * s.w - s.pad + kx;
      const double* dyrow = dyf + oy * ow;
      for (i64 ox = ox_lo; ox <= ox_hi; ++ox)
        acc += xrow[ox * s.stride] * dyrow[ox];
    }
  }
  return acc;
}

inline double tconv_cell(i64 cin, i64 cout, i64 h, i64 w, const double* x,
                         const double* wt, const double* bias, i64 n, i64 f,
                         i64 oy, i64 ox) {
  const i64 iy = oy / 2, ix = ox / 2, ky = oy & 1, kx = ox & 1;
  double acc = bias ? bias[f] : 0.0;
  for (i64 c = 0; c < cin; ++c)
    acc += x[((n * cin + c) * h + iy) * w + ix] *
           wt[((c * cout + f) * 2 + ky) * 2 + kx];
  return acc;
}

inline double tconv_dx_cell(i64 cin, i64 cout, i64 h, i64 w, const double* dy,
                            const double* wt, i64 n, i64 c, i64 iy, i64 ix) {
  const i64 oh = 2 * h, ow = 2 * w;
  double acc = 0.0;
  for (i64 f = 0; f < cout; ++f) {
    const double* dyf = dy + (n * cout + f) * oh * ow;
    const double* wc = wt + (c * cout + f) * 4;
    for (i64 ky = 0; ky < 2; ++ky)
      for (i64 kx = 0; kx < 2; ++kx)
        acc += dyf[(2 * iy + ky) * ow + 2 * ix + kx] * wc[ky * 2 + kx];
  }
  return acc;
}

struct BilinearTaps {
  i64 x0, x1, y0, y1;
  double fx, fy;
  bool inside_x, inside_y;  // false where the clamp was active
};

inline BilinearTaps bilinear_taps(double px, double py, i64 h, i64 w) {
  BilinearTaps t;
  t.inside_x = px > 0.0 && px < static_cast<double>(w - 1);
  t.inside_y = py > 0.0 && py < static_cast<double>(h - 1);
  const double cx = std::min(std::max(px, 0.0), static_cast<double>(w - 1));
  const double cy = std::min(std::max(py, 0.0), static_cast<double>(h - 1));
  t.x0 = static_cast<i64>(std::floor(cx));
  t.y0 = static_cast<i64>(std::floor(cy));
  if (t.x0 > w - 2) t.x0 = std::max<i64>(w - 2, 0);
  if (t.y0 > h - 2) t.y0 = std::max<i64>(h - 2, 0);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = cx - static_cast<double>(t.x0);
  t.fy = cy - static_cast<double>(t.y0);
  return t;
}

inline double bilinear_cell(const double* plane, i64 w, const BilinearTaps& t) {
  const double v00 = plane[t.y0 * w + t.x0];
  const double v01 = plane[t.y0 * w + t.x1];
  const double v10 = plane[t.y1 * w + t.x0];
  const double v11 = plane[t.y1 * w + t.x1];
  const double top = v00 + (v01 - v00) * t.fx;
  const double bot = v10 + (v11 - v10) * t.fx;
  return top + (bot - top) * t.fy;
}

}  // namespace

// ---------------------------------------------------------------- gemm

static GemmView view_a(bool trans, const double* p, i64 m, i64 k) {
  return trans ? GemmView{p, 1, m} : GemmView{p, k, 1};
}
static GemmView view_b(bool trans, const double* p, i64 k, i64 n) {
  return trans ? GemmView{p, 1, k} : GemmView{p, n, 1};
}

void gemm_serial(bool ta, bool tb, i64 m, i64 n, i64 k, const double* a,
                 const double* b, double* c, bool accumulate) {
  const GemmView av = view_a(ta, a, m, k), bv = view_b(tb, b, k, n);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      const double v = gemm_cell(av, bv, i, j, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
}

void gemm_parallel(bool ta, bool tb, i64 m, i64 n, i64 k, const double* a,
                   const double* b, double* c, bool accumulate) {
  const GemmView av = view_a(ta, a, m, k), bv = view_b(tb, b, k, n);
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      const double v = gemm_cell(av, bv, i, j, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
}

void gemm(bool ta, bool tb, i64 m, i64 n, i64 k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (par::threads() > 1 && m > 1)
    gemm_parallel(ta, tb, m, n, k, a, b, c, accumulate);
  else
    gemm_serial(ta, tb, m, n, k, a, b, c, accumulate);
}

// ---------------------------------------------------------------- conv2d

void conv2d_forward_serial(const Conv2dShape& s, const double* x, const double* w,
                           const double* bias, double* y) {
  const i64 oh = s.oh(), ow = s.ow();
  for (i64 n = 0; n < s.n; ++n)
    for (i64 f = 0; f < s.cout; ++f)
      for (i64 oy = 0; oy < oh; ++oy)
        conv_row(s, x, w, bias, n, f, oy, y + ((n * s.cout + f) * oh + oy) * ow);
}

void conv2d_forward_parallel(const Conv2dShape& s, const double* x, const double* w,
                             const double* bias, double* y) {
  const i64 oh = s.oh(), ow = s.ow();
  const i64 rows = s.n * s.cout * oh;
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const i64 oy = r % oh, f = (r / oh) % s.cout, n = r / (oh * s.cout);
    conv_row(s, x, w, bias, n, f, oy, y + r * ow);
  }
}

void conv2d_forward(const Conv2dShape& s, const double* x, const double* w,
                    const double* bias, double* y) {
  if (par::threads() > 1)
    conv2d_forward_parallel(s, x, w, bias, y);
  else
    conv2d_forward_serial(s, x, w, bias, y);
}

void conv2d_backward_input_serial(const Conv2dShape& s, const double* dy,
                                  const double* w, double* dx) {
  std::vector<ConvTaps> txs(static_cast<std::size_t>(s.w));
  for (i64 ix = 0; ix < s.w; ++ix)
    txs[static_cast<std::size_t>(ix)] = conv_dx_taps(ix, s.pad, s.stride, s.kw, s.ow());
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < s.cin; ++c)
      for (i64 iy = 0; iy < s.h; ++iy) {
        const ConvTaps ty = conv_dx_taps(iy, s.pad, s.stride, s.kh, s.oh());
        for (i64 ix = 0; ix < s.w; ++ix)
          dx[((n * s.cin + c) * s.h + iy) * s.w + ix] +=
              conv_dx_cell(s, dy, w, n, c, iy, ty, txs[static_cast<std::size_t>(ix)]);
      }
}

void conv2d_backward_input_parallel(const Conv2dShape& s, const double* dy,
                                    const double* w, double* dx) {
  std::vector<ConvTaps> txs(static_cast<std::size_t>(s.w));
  for (i64 ix = 0; ix < s.w; ++ix)
    txs[static_cast<std::size_t>(ix)] = conv_dx_taps(ix, s.pad, s.stride, s.kw, s.ow());
  const i64 rows = s.n * s.cin * s.h;
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const i64 iy = r % s.h, c = (r / s.h) % s.cin, n = r / (s.h * s.cin);
    const ConvTaps ty = conv_dx_taps(iy, s.pad, s.stride, s.kh, s.oh());
    for (i64 ix = 0; ix < s.w; ++ix)
      dx[r * s.w + ix] += conv_dx_cell(s, dy, w, n, c, iy, ty, txs[static_cast<std::size_t>(ix)]);
  }
}

void conv2d_backward_input(const Conv2dShape& s, const double* dy, const double* w,
                           double* dx) {
  if (par::threads() > 1)
    conv2d_backward_input_parallel(s, dy, w, dx);
  else
    conv2d_backward_input_serial(s, dy, w, dx);
}

void conv2d_backward_weight_serial(const Conv2dShape& s, const double* x,
                                   const double* dy, double* dw) {
  for (i64 f = 0; f < s.cout; ++f)
    for (i64 c = 0; c < s.cin; ++c)
      for (i64 ky = 0; ky < s.kh; ++ky)
        for (i64 kx = 0; kx < s.kw; ++kx)
          dw[((f * s.cin + c) * s.kh + ky) * s.kw + kx] += conv_dw_cell(s, x, dy, f, c, ky, kx);
}

void conv2d_backward_weight_parallel(const Conv2dShape& s, const double* x,
                                     const double* dy, double* dw) {
  const i64 cells = s.cout * s.cin * s.kh * s.kw;
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 i = 0; i < cells; ++i) {
    const i64 kx = i % s.kw, ky = (i / s.kw) % s.kh;
    const i64 c = (i / (s.kw * s.kh)) % s.cin, f = i / (s.kw * s.kh * s.cin);
    dw[i] += conv_dw_cell(s, x, dy, f, c, ky, kx);
  }
}

void conv2d_backward_weight(const Conv2dShape& s, const double* x, const double* dy,
                            double* dw) {
  if (par::threads() > 1)
    conv2d_backward_weight_parallel(s, x, dy, dw);
  else
    conv2d_backward_weight_serial(s, x, dy, dw);
}

void conv2d_backward_bias(const Conv2dShape& s, const double* dy, double* db) {
  const i64 oh = s.oh(), ow = s.ow();
  for (i64 f = 0; f < s.cout; ++f) {
    double acc = 0.0;
    for (i64 n = 0; n < s.n; ++n) {
      const double* p = dy + (n * s.cout + f) * oh * ow;
      for (i64 i = 0; i < oh * ow; ++i) acc += p[i];
    }
    db[f] += acc;
  }
}

// ---------------------------------------------------------------- tconv 2x

void tconv2x_forward_serial(i64 n, i64 cin, i64 cout, i64 h, i64 w, const double* x,
                            const double* wt, const double* bias, double* y) {
  const i64 oh = 2 * h, ow = 2 * w;
  for (i64 b = 0; b < n; ++b)
    for (i64 f = 0; f < cout; ++f)
      for (i64 oy = 0; oy < oh; ++oy)
        for (i64 ox = 0; ox < ow; ++ox)
          y[((b * cout + f) * oh + oy) * ow + ox] =
              tconv_cell(cin, cout, h, w, x, wt, bias, b, f, oy, ox);
}

void tconv2x_forward_parallel(i64 n, i64 cin, i64 cout, i64 h, i64 w, const double* x,
                              const double* wt, const double* bias, double* y) {
  const i64 oh = 2 * h, ow = 2 * w;
  const i64 rows = n * cout * oh;
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const i64 oy = r % oh, f = (r / oh) % cout, b = r / (oh * cout);
    for (i64 ox = 0; ox < ow; ++ox)
      y[r * ow + ox] = tconv_cell(cin, cout, h, w, x, wt, bias, b, f, oy, ox);
  }
}

void tconv2x_forward(i64 n, i64 cin, i64 cout, i64 h, i64 w, const double* x,
                     const double* wt, const double* bias, double* y) {
  if (par::threads() > 1)
    tconv2x_forward_parallel(n, cin, cout, h, w, x, wt, bias, y);
  else
    tconv2x_forward_serial(n, cin, cout, h, w, x, wt, bias, y);
}

void tconv2x_backward_input_serial(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                                   const double* dy, const double* wt, double* dx) {
  for (i64 b = 0; b < n; ++b)
    for (i64 c = 0; c < cin; ++c)
      for (i64 iy = 0; iy < h; ++iy)
        for (i64 ix = 0; ix < w; ++ix)
          dx[((b * cin + c) * h + iy) * w + ix] +=
              tconv_dx_cell(cin, cout, h, w, dy, wt, b, c, iy, ix);
}

void tconv2x_backward_input_parallel(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                                     const double* dy, const double* wt, double* dx) {
  const i64 rows = n * cin * h;
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const i64 iy = r % h, c = (r / h) % cin, b = r / (h * cin);
    for (i64 ix = 0; ix < w; ++ix)
      dx[r * w + ix] += tconv_dx_cell(cin, cout, h, w, dy, wt, b, c, iy, ix);
  }
}

void tconv2x_backward_input(i64 n, i64 cin, i64 cout, i64 h, i64 w, const double* dy,
                            const double* wt, double* dx) {
  if (par::threads() > 1)
    tconv2x_backward_input_parallel(n, cin, cout, h, w, dy, wt, dx);
  else
    tconv2x_backward_input_serial(n, cin, cout, h, w, dy, wt, dx);
}

void tconv2x_backward_weight(i64 n, i64 cin, i64 cout, i64 h, i64 w, const double* x,
                             const double* dy, double* dw, double* db) {
  const i64 oh = 2 * h, ow = 2 * w;
  for (i64 c = 0; c < cin; ++c)
    for (i64 f = 0; f < cout; ++f)
      for (i64 ky = 0; ky < 2; ++ky)
        for (i64 kx = 0; kx < 2; ++kx) {
          double acc = 0.0;
          for (i64 b = 0; b < n; ++b) {
            const double* xp = x + (b * cin + c) * h * w;
            const double* dyp = dy + (b * cout + f) * oh * ow;
            for (i64 iy = 0; iy < h; ++iy)
              for (i64 ix = 0; ix < w; ++ix)
                acc += xp[iy * w + ix] * dyp[(2 * iy + ky) * ow + 2 * ix + kx];
          }
          dw[((c * cout + f) * 2 + ky) * 2 + kx] += acc;
        }
  if (db) {
    for (i64 f = 0; f < cout; ++f) {
      double acc = 0.0;
      for (i64 b = 0; b < n; ++b) {
        const double* dyp = dy + (b * cout + f) * oh * ow;
        for (i64 i = 0; i < oh * ow; ++i) acc += dyp[i];
      }
      db[f] += acc;
    }
  }
}

// ---------------------------------------------------------------- bilinear

void bilinear_gather_serial(i64 c, i64 h, i64 w, const double* field, i64 m,
                            const double* pts, double* out) {
  for (i64 i = 0; i < m; ++i) {
    const BilinearTaps t = bilinear_taps(pts[2 * i], pts[2 * i + 1], h, w);
    for (i64 ch = 0; ch < c; ++ch)
      out[i * c + ch] = bilinear_cell(field + ch * h * w, w, t);
  }
}

void bilinear_gather_parallel(i64 c, i64 h, i64 w, const double* field, i64 m,
                              const double* pts, double* out) {
#pragma omp parallel for num_threads(par::threads()) schedule(static)
  for (i64 i = 0; i < m; ++i) {
    const BilinearTaps t = bilinear_taps(pts[2 * i], pts[2 * i + 1], h, w);
    for (i64 ch = 0; ch < c; ++ch)
      out[i * c + ch] = bilinear_cell(field + ch * h * w, w, t);
  }
}

void bilinear_gather(i64 c, i64 h, i64 w, const double* field, i64 m,
                     const double* pts, double* out) {
  if (par::threads() > 1 && m > 64)
    bilinear_gather_parallel(c, h, w, field, m, pts, out);
  else
    bilinear_gather_serial(c, h, w, field, m, pts, out);
}

void bilinear_scatter_grad(i64 c, i64 h, i64 w, const double* field, i64 m,
                           const double* pts, const double* dout, double* dfield,
                           double* dpts) {
  for (i64 i = 0; i < m; ++i) {
    const BilinearTaps t = bilinear_taps(pts[2 * i], pts[2 * i + 1], h, w);
    for (i64 ch = 0; ch < c; ++ch) {
      const double g = dout[i * c + ch];
      if (dfield) {
        double* plane = dfield + ch * h * w;
        plane[t.y0 * w + t.x0] += g * (1.0 - t.fx) * (1.0 - t.fy);
        plane[t.y0 * w + t.x1] += g * t.fx * (1.0 - t.fy);
        plane[t.y1 * w + t.x0] += g * (1.0 - t.fx) * t.fy;
        plane[t.y1 * w + t.x1] += g * t.fx * t.fy;
      }
      if (dpts) {
        const double* plane = field + ch * h * w;
        const double v00 = plane[t.y0 * w + t.x0];
        const double v01 = plane[t.y0 * w + t.x1];
        const double v10 = plane[t.y1 * w + t.x0];
        const double v11 = plane[t.y1 * w + t.x1];
        // Clamped coordinates contribute zero derivative.
        if (t.inside_x) {
          const double dvdx = (v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy;
          dpts[2 * i] += g * dvdx;
        }
        if (t.inside_y) {
          const double dvdy = (v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx;
          dpts[2 * i + 1] += g * dvdy;
        }
      }
    }
  }
}

}  // namespace pointseg::kern
