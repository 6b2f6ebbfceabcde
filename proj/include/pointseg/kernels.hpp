#pragma once
// Compute kernels behind the autodiff ops.
//
// Every kernel comes in two variants: a plain serial reference
// (`*_serial`) and an OpenMP version parallelized over independent output
// elements. Both call the same per-output accumulation helpers, and the
// build disables FP contraction, so the two variants are bit-identical
// for any thread count. The unqualified name dispatches on par::threads().
//
// Scatter-style backward passes (bilinear field gradients) stay serial:
// their write sets overlap and the arrays involved are small.

#include <cstdint>

namespace pointseg::kern {

using i64 = std::int64_t;

// C[m,n] = op(A) * op(B) with optional transposes; accumulates over k in
// fixed ascending order. `accumulate` adds into C instead of overwriting.
void gemm_serial(bool trans_a, bool trans_b, i64 m, i64 n, i64 k,
                 const double* a, const double* b, double* c, bool accumulate);
void gemm_parallel(bool trans_a, bool trans_b, i64 m, i64 n, i64 k,
                   const double* a, const double* b, double* c, bool accumulate);
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k,
          const double* a, const double* b, double* c, bool accumulate = false);

// NCHW direct convolution, zero padding.
struct Conv2dShape {
  i64 n, cin, h, w;       // input
  i64 cout, kh, kw;       // filter
  i64 stride, pad;
  i64 oh() const { return (h + 2 * pad - kh) / stride + 1; }
  i64 ow() const { return (w + 2 * pad - kw) / stride + 1; }
};

void conv2d_forward_serial(const Conv2dShape& s, const double* x, const double* w,
                           const double* bias, double* y);
void conv2d_forward_parallel(const Conv2dShape& s, const double* x, const double* w,
                             const double* bias, double* y);
void conv2d_forward(const Conv2dShape& s, const double* x, const double* w,
                    const double* bias, double* y);

void conv2d_backward_input_serial(const Conv2dShape& s, const double* dy,
                                  const double* w, double* dx);
void conv2d_backward_input_parallel(const Conv2dShape& s, const double* dy,
                                    const double* w, double* dx);
void conv2d_backward_input(const Conv2dShape& s, const double* dy,
                           const double* w, double* dx);

void conv2d_backward_weight_serial(const Conv2dShape& s, const double* x,
                                   const double* dy, double* dw);
void conv2d_backward_weight_parallel(const Conv2dShape& s, const double* x,
                                     const double* dy, double* dw);
void conv2d_backward_weight(const Conv2dShape& s, const double* x,
                            const double* dy, double* dw);

void conv2d_backward_bias(const Conv2dShape& s, const double* dy, double* db);

// 2x nearest-exact transposed convolution (kernel 2, stride 2): each
// output pixel reads exactly one input pixel, so forward and backward-
// input are gather loops. x:[n,cin,h,w] w:[cin,cout,2,2] y:[n,cout,2h,2w]
void tconv2x_forward_serial(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                            const double* x, const double* wt, const double* bias,
                            double* y);
void tconv2x_forward_parallel(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                              const double* x, const double* wt, const double* bias,
                              double* y);
void tconv2x_forward(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                     const double* x, const double* wt, const double* bias,
                     double* y);

void tconv2x_backward_input_serial(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                                   const double* dy, const double* wt, double* dx);
void tconv2x_backward_input_parallel(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                                     const double* dy, const double* wt, double* dx);
void tconv2x_backward_input(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                            const double* dy, const double* wt, double* dx);

void tconv2x_backward_weight(i64 n, i64 cin, i64 cout, i64 h, i64 w,
                             const double* x, const double* dy, double* dw, double* db);

// Bilinear gather: field [c,h,w], points [m,2] in pixel coordinates
// (x, y; integer coordinates sit on pixel centers), border-clamped.
// out [m,c].
void bilinear_gather_serial(i64 c, i64 h, i64 w, const double* field,
                            i64 m, const double* pts, double* out);
void bilinear_gather_parallel(i64 c, i64 h, i64 w, const double* field,
                              i64 m, const double* pts, double* out);
void bilinear_gather(i64 c, i64 h, i64 w, const double* field,
                     i64 m, const double* pts, double* out);

// Accumulates d(out)/d(field) and d(out)/d(points). Serial by design:
// point footprints overlap in the field gradient.
void bilinear_scatter_grad(i64 c, i64 h, i64 w, const double* field,
                           i64 m, const double* pts, const double* dout,
                           double* dfield, double* dpts);

}  // namespace pointseg::kern
