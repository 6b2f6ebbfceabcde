#include "pointseg/autodiff.hpp"

#include <cmath>
#include <cstring>

#include "pointseg/kernels.hpp"

namespace pointseg::ag {

using kern::i64;

Node* Tape::make(Tensor value, bool requires_grad) {
  nodes_.push_back(std::make_unique<Node>());
  Node* n = nodes_.back().get();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return Var{this, make(std::move(value), requires_grad)};
}

Var Tape::param(const Tensor& value, Tensor& grad_sink) {
  Node* n = make(value, true);
  n->grad = grad_sink;  // shared storage: backward accumulates in place
  return Var{this, n};
}

void ensure_grad(Node* n) {
  if (!n->grad.defined()) n->grad = Tensor::zeros(n->value.shape());
}

void accumulate(Node* parent, const Tensor& g) {
  if (!parent->requires_grad) return;
  ensure_grad(parent);
  double* dst = parent->grad.data();
  const double* src = g.data();
  const i64 n = g.numel();
  for (i64 i = 0; i < n; ++i) dst[i] += src[i];
}

void Tape::backward(const Var& root) {
  if (root.node->value.numel() != 1)
    throw ConfigError("backward: root must be scalar, got " + shape_str(root.shape()));
  ensure_grad(root.node);
  root.node->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = it->get();
    if (n->backward && n->grad.defined()) n->backward();
  }
}

namespace {

void check_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ConfigError("op: operands from different tapes");
}

Var unary(Var a, Tensor out, std::function<void(Node*, Node*)> bw) {
  Node* n = a.tape->make(std::move(out), a.node->requires_grad);
  if (n->requires_grad) {
    Node* pa = a.node;
    n->backward = [n, pa, bw = std::move(bw)]() { bw(n, pa); };
  }
  return Var{a.tape, n};
}

}  // namespace

// ------------------------------------------------------------ elementwise

Var add(Var a, Var b) {
  check_same_tape(a, b);
  if (!a.val().same_shape(b.val()))
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  Node* n = a.tape->make(std::move(out), a.node->requires_grad || b.node->requires_grad);
  if (n->requires_grad) {
    Node *na = a.node, *nb = b.node;
    n->backward = [n, na, nb]() {
      accumulate(na, n->grad);
      accumulate(nb, n->grad);
    };
  }
  return Var{a.tape, n};
}

Var sub(Var a, Var b) { return add(a, neg(b)); }

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  if (!a.val().same_shape(b.val()))
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  Node* n = a.tape->make(std::move(out), a.node->requires_grad || b.node->requires_grad);
  if (n->requires_grad) {
    Node *na = a.node, *nb = b.node;
    n->backward = [n, na, nb]() {
      const i64 m = n->grad.numel();
      if (na->requires_grad) {
        ensure_grad(na);
        for (i64 i = 0; i < m; ++i) na->grad[i] += n->grad[i] * nb->value[i];
      }
      if (nb->requires_grad) {
        ensure_grad(nb);
        for (i64 i = 0; i < m; ++i) nb->grad[i] += n->grad[i] * na->value[i];
      }
    };
  }
  return Var{a.tape, n};
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  return unary(a, std::move(out), [s](Node* n, Node* pa) {
    ensure_grad(pa);
    for (i64 i = 0; i < n->grad.numel(); ++i) pa->grad[i] += n->grad[i] * s;
  });
}

Var add_scalar(Var a, double c) {
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] + c;
  return unary(a, std::move(out),
               [](Node* n, Node* pa) { accumulate(pa, n->grad); });
}

Var relu(Var a) {
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  return unary(a, std::move(out), [](Node* n, Node* pa) {
    ensure_grad(pa);
    for (i64 i = 0; i < n->grad.numel(); ++i)
      if (pa->value[i] > 0.0) pa->grad[i] += n->grad[i];
  });
}

Var sigmoid(Var a) {
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
  return unary(a, std::move(out), [](Node* n, Node* pa) {
    ensure_grad(pa);
    for (i64 i = 0; i < n->grad.numel(); ++i) {
      const double y = n->value[i];
      pa->grad[i] += n->grad[i] * y * (1.0 - y);
    }
  });
}

Var mul_const(Var a, const Tensor& c) {
  if (!a.val().same_shape(c))
    throw ConfigError("mul_const: shape mismatch");
  Tensor out(a.shape());
  const double* pa = a.val().data();
  const double* pc = c.data();
  double* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = pa[i] * pc[i];
  return unary(a, std::move(out), [c](Node* n, Node* pa) {
    ensure_grad(pa);
    for (i64 i = 0; i < n->grad.numel(); ++i) pa->grad[i] += n->grad[i] * c[i];
  });
}

Var sdiv(Var a, Var b) {
  check_same_tape(a, b);
  if (a.val().numel() != 1 || b.val().numel() != 1)
    throw ConfigError("sdiv: scalar operands required");
  const double av = a.val()[0], bv = b.val()[0];
  Tensor out = Tensor::scalar(av / bv);
  Node* n = a.tape->make(std::move(out), a.node->requires_grad || b.node->requires_grad);
  if (n->requires_grad) {
    Node *na = a.node, *nb = b.node;
    n->backward = [n, na, nb]() {
      const double g = n->grad[0];
      const double bv2 = nb->value[0];
      if (na->requires_grad) {
        ensure_grad(na);
        na->grad[0] += g / bv2;
      }
      if (nb->requires_grad) {
        ensure_grad(nb);
        nb->grad[0] += -g * na->value[0] / (bv2 * bv2);
      }
    };
  }
  return Var{a.tape, n};
}

// ------------------------------------------------------------ shape

Var reshape(Var a, Shape s) {
  Tensor out = a.val().reshaped(s);  // shares storage
  Node* n = a.tape->make(out, a.node->requires_grad);
  if (n->requires_grad) {
    Node* pa = a.node;
    n->backward = [n, pa]() { accumulate(pa, n->grad.reshaped(pa->value.shape())); };
  }
  return Var{a.tape, n};
}

namespace {

std::vector<i64> strides_of(const Shape& s) {
  std::vector<i64> st(s.size());
  i64 acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

void permute_copy(const Tensor& src, Tensor& dst, const std::vector<int>& dims) {
  const Shape& ss = src.shape();
  const auto sst = strides_of(ss);
  const Shape& ds = dst.shape();
  const int nd = static_cast<int>(ss.size());
  std::vector<i64> idx(static_cast<std::size_t>(nd), 0);
  const double* sp = src.data();
  double* dp = dst.data();
  const i64 n = src.numel();
  for (i64 flat = 0; flat < n; ++flat) {
    // idx enumerates the destination layout
    i64 soff = 0;
    for (int d = 0; d < nd; ++d)
      soff += idx[static_cast<std::size_t>(d)] * sst[static_cast<std::size_t>(dims[static_cast<std::size_t>(d)])];
    dp[flat] = sp[soff];
    for (int d = nd - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < ds[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

}  // namespace

Var permute(Var a, const std::vector<int>& dims) {
  const Shape& ss = a.shape();
  if (dims.size() != ss.size()) throw ConfigError("permute: rank mismatch");
  Shape os(ss.size());
  for (std::size_t i = 0; i < dims.size(); ++i) os[i] = ss[static_cast<std::size_t>(dims[i])];
  Tensor out(os);
  permute_copy(a.val(), out, dims);
  return unary(a, std::move(out), [dims](Node* n, Node* pa) {
    std::vector<int> inv(dims.size());
    for (std::size_t i = 0; i < dims.size(); ++i) inv[static_cast<std::size_t>(dims[i])] = static_cast<int>(i);
    Tensor g(pa->value.shape());
    permute_copy(n->grad, g, inv);
    accumulate(pa, g);
  });
}

namespace {

// axis split: treat tensor as [outer, axis, inner]
struct AxisView {
  i64 outer, axis, inner;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ConfigError("concat: empty input");
  Shape os = xs[0].shape();
  i64 total = 0;
  for (const Var& x : xs) total += x.shape()[static_cast<std::size_t>(axis)];
  os[static_cast<std::size_t>(axis)] = total;
  Tensor out(os);
  const AxisView ov = axis_view(os, axis);
  bool rg = false;
  i64 off = 0;
  for (const Var& x : xs) {
    rg = rg || x.node->requires_grad;
    const AxisView xv = axis_view(x.shape(), axis);
    const double* sp = x.val().data();
    double* dp = out.data();
    for (i64 o = 0; o < xv.outer; ++o)
      std::memcpy(dp + (o * ov.axis + off) * ov.inner,
                  sp + o * xv.axis * xv.inner,
                  static_cast<std::size_t>(xv.axis * xv.inner) * sizeof(double));
    off += xv.axis;
  }
  Node* n = xs[0].tape->make(std::move(out), rg);
  if (rg) {
    std::vector<Node*> parents;
    for (const Var& x : xs) parents.push_back(x.node);
    n->backward = [n, parents, axis]() {
      const AxisView ov2 = axis_view(n->value.shape(), axis);
      i64 off2 = 0;
      for (Node* p : parents) {
        const AxisView pv = axis_view(p->value.shape(), axis);
        if (p->requires_grad) {
          ensure_grad(p);
          const double* gp = n->grad.data();
          double* pg = p->grad.data();
          for (i64 o = 0; o < pv.outer; ++o) {
            const double* src = gp + (o * ov2.axis + off2) * ov2.inner;
            double* dst = pg + o * pv.axis * pv.inner;
            for (i64 i = 0; i < pv.axis * pv.inner; ++i) dst[i] += src[i];
          }
        }
        off2 += pv.axis;
      }
    };
  }
  return Var{xs[0].tape, n};
}

Var slice(Var a, int axis, i64 start, i64 len) {
  const Shape& ss = a.shape();
  if (start < 0 || start + len > ss[static_cast<std::size_t>(axis)])
    throw ConfigError("slice: out of range");
  Shape os = ss;
  os[static_cast<std::size_t>(axis)] = len;
  Tensor out(os);
  const AxisView sv = axis_view(ss, axis);
  const double* sp = a.val().data();
  double* dp = out.data();
  for (i64 o = 0; o < sv.outer; ++o)
    std::memcpy(dp + o * len * sv.inner, sp + (o * sv.axis + start) * sv.inner,
                static_cast<std::size_t>(len * sv.inner) * sizeof(double));
  return unary(a, std::move(out), [axis, start, len](Node* n, Node* pa) {
    ensure_grad(pa);
    const AxisView sv2 = axis_view(pa->value.shape(), axis);
    const double* gp = n->grad.data();
    double* pg = pa->grad.data();
    for (i64 o = 0; o < sv2.outer; ++o) {
      double* dst = pg + (o * sv2.axis + start) * sv2.inner;
      const double* src = gp + o * len * sv2.inner;
      for (i64 i = 0; i < len * sv2.inner; ++i) dst[i] += src[i];
    }
  });
}

// ------------------------------------------------------------ matmul

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] != sb[0]) throw ConfigError("matmul: inner dims disagree");
    const i64 m = sa[0], k = sa[1], nn = sb[1];
    Tensor out(Shape{m, nn});
    kern::gemm(false, false, m, nn, k, a.val().data(), b.val().data(), out.data());
    Node* n = a.tape->make(std::move(out), a.node->requires_grad || b.node->requires_grad);
    if (n->requires_grad) {
      Node *na = a.node, *nb = b.node;
      n->backward = [n, na, nb, m, k, nn]() {
        if (na->requires_grad) {
          ensure_grad(na);
          kern::gemm(false, true, m, k, nn, n->grad.data(), nb->value.data(),
                     na->grad.data(), true);
        }
        if (nb->requires_grad) {
          ensure_grad(nb);
          kern::gemm(true, false, k, nn, m, na->value.data(), n->grad.data(),
                     nb->grad.data(), true);
        }
      };
    }
    return Var{a.tape, n};
  }
  if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) throw ConfigError("matmul: batched shape mismatch");
    const i64 bs = sa[0], m = sa[1], k = sa[2], nn = sb[2];
    Tensor out(Shape{bs, m, nn});
    for (i64 i = 0; i < bs; ++i)
      kern::gemm(false, false, m, nn, k, a.val().data() + i * m * k,
                 b.val().data() + i * k * nn, out.data() + i * m * nn);
    Node* n = a.tape->make(std::move(out), a.node->requires_grad || b.node->requires_grad);
    if (n->requires_grad) {
      Node *na = a.node, *nb = b.node;
      n->backward = [n, na, nb, bs, m, k, nn]() {
        for (i64 i = 0; i < bs; ++i) {
          if (na->requires_grad) {
            ensure_grad(na);
            kern::gemm(false, true, m, k, nn, n->grad.data() + i * m * nn,
                       nb->value.data() + i * k * nn, na->grad.data() + i * m * k, true);
          }
          if (nb->requires_grad) {
            ensure_grad(nb);
            kern::gemm(true, false, k, nn, m, na->value.data() + i * m * k,
                       n->grad.data() + i * m * nn, nb->grad.data() + i * k * nn, true);
          }
        }
      };
    }
    return Var{a.tape, n};
  }
  throw ConfigError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
}

Var add_bias(Var x, Var b) {
  check_same_tape(x, b);
  const i64 nfeat = x.shape().back();
  if (b.val().numel() != nfeat) throw ConfigError("add_bias: feature dim mismatch");
  Tensor out(x.shape());
  const double* px = x.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  const i64 rows = out.numel() / nfeat;
  for (i64 r = 0; r < rows; ++r)
    for (i64 j = 0; j < nfeat; ++j) po[r * nfeat + j] = px[r * nfeat + j] + pb[j];
  Node* n = x.tape->make(std::move(out), x.node->requires_grad || b.node->requires_grad);
  if (n->requires_grad) {
    Node *nx = x.node, *nb = b.node;
    n->backward = [n, nx, nb, rows, nfeat]() {
      if (nx->requires_grad) accumulate(nx, n->grad);
      if (nb->requires_grad) {
        ensure_grad(nb);
        for (i64 j = 0; j < nfeat; ++j) {
          double acc = 0.0;
          for (i64 r = 0; r < rows; ++r) acc += n->grad[r * nfeat + j];
          nb->grad[j] += acc;
        }
      }
    };
  }
  return Var{x.tape, n};
}

// ------------------------------------------------------------ softmax / layernorm

Var softmax_last(Var a) {
  const i64 cols = a.shape().back();
  const i64 rows = a.val().numel() / cols;
  Tensor out(a.shape());
  const double* pa = a.val().data();
  double* po = out.data();
  for (i64 r = 0; r < rows; ++r) {
    const double* x = pa + r * cols;
    double* y = po + r * cols;
    double mx = x[0];
    for (i64 j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (i64 j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (i64 j = 0; j < cols; ++j) y[j] /= sum;
  }
  return unary(a, std::move(out), [rows, cols](Node* n, Node* pa) {
    ensure_grad(pa);
    for (i64 r = 0; r < rows; ++r) {
      const double* y = n->value.data() + r * cols;
      const double* dy = n->grad.data() + r * cols;
      double dot = 0.0;
      for (i64 j = 0; j < cols; ++j) dot += dy[j] * y[j];
      double* dx = pa->grad.data() + r * cols;
      for (i64 j = 0; j < cols; ++j) dx[j] += (dy[j] - dot) * y[j];
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const i64 cols = x.shape().back();
  const i64 rows = x.val().numel() / cols;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  Tensor inv_sigma(Shape{rows});
  const double* px = x.val().data();
  const double* pg = gamma.val().data();
  const double* pb = beta.val().data();
  double* po = out.data();
  double* ph = xhat.data();
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = px + r * cols;
    double mean = 0.0;
    for (i64 j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (i64 j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (i64 j = 0; j < cols; ++j) {
      ph[r * cols + j] = (xr[j] - mean) * is;
      po[r * cols + j] = ph[r * cols + j] * pg[j] + pb[j];
    }
  }
  Node* n = x.tape->make(std::move(out),
                         x.node->requires_grad || gamma.node->requires_grad ||
                             beta.node->requires_grad);
  if (n->requires_grad) {
    Node *nx = x.node, *ng = gamma.node, *nb = beta.node;
    n->backward = [n, nx, ng, nb, xhat, inv_sigma, rows, cols]() {
      const double* dy = n->grad.data();
      const double* h = xhat.data();
      if (ng->requires_grad) {
        ensure_grad(ng);
        for (i64 j = 0; j < cols; ++j) {
          double acc = 0.0;
          for (i64 r = 0; r < rows; ++r) acc += dy[r * cols + j] * h[r * cols + j];
          ng->grad[j] += acc;
        }
      }
      if (nb->requires_grad) {
        ensure_grad(nb);
        for (i64 j = 0; j < cols; ++j) {
          double acc = 0.0;
          for (i64 r = 0; r < rows; ++r) acc += dy[r * cols + j];
          nb->grad[j] += acc;
        }
      }
      if (nx->requires_grad) {
        ensure_grad(nx);
        const double* g = ng->value.data();
        for (i64 r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (i64 j = 0; j < cols; ++j) {
            const double t = dy[r * cols + j] * g[j];
            m1 += t;
            m2 += t * h[r * cols + j];
          }
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          for (i64 j = 0; j < cols; ++j) {
            const double t = dy[r * cols + j] * g[j];
            nx->grad[r * cols + j] += (t - m1 - h[r * cols + j] * m2) * inv_sigma[r];
          }
        }
      }
    };
  }
  return Var{x.tape, n};
}

// ------------------------------------------------------------ reductions

Var sum_all(Var a) {
  double acc = 0.0;
  const double* pa = a.val().data();
  for (i64 i = 0; i < a.val().numel(); ++i) acc += pa[i];
  return unary(a, Tensor::scalar(acc), [](Node* n, Node* pa) {
    ensure_grad(pa);
    const double g = n->grad[0];
    for (i64 i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
  });
}

Var mean_all(Var a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel()));
}

Var bce_logits_mean(Var logits, const Tensor& targets, const Tensor& mask) {
  if (!logits.val().same_shape(targets)) throw ConfigError("bce: shape mismatch");
  const double* z = logits.val().data();
  const double* y = targets.data();
  const double* m = mask.defined() ? mask.data() : nullptr;
  const i64 n = logits.val().numel();
  double count = 0.0, acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const double w = m ? m[i] : 1.0;
    if (w == 0.0) continue;
    if (!std::isfinite(z[i])) throw NumericError("bce: non-finite logit");
    acc += w * (std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::fabs(z[i]))));
    count += w;
  }
  const double denom = count > 0.0 ? count : 1.0;
  return unary(logits, Tensor::scalar(acc / denom),
               [targets, mask, denom](Node* nd, Node* pa) {
                 ensure_grad(pa);
                 const double g = nd->grad[0] / denom;
                 const double* mm = mask.defined() ? mask.data() : nullptr;
                 for (i64 i = 0; i < pa->grad.numel(); ++i) {
                   const double w = mm ? mm[i] : 1.0;
                   if (w == 0.0) continue;
                   const double s = 1.0 / (1.0 + std::exp(-pa->value[i]));
                   pa->grad[i] += g * w * (s - targets[i]);
                 }
               });
}

Var l1_masked_mean(Var pred, const Tensor& target, const Tensor& mask) {
  if (!pred.val().same_shape(target)) throw ConfigError("l1: shape mismatch");
  const double* p = pred.val().data();
  const double* t = target.data();
  const double* m = mask.defined() ? mask.data() : nullptr;
  const i64 n = pred.val().numel();
  double acc = 0.0, count = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const double w = m ? m[i] : 1.0;
    if (w == 0.0) continue;
    if (!std::isfinite(p[i])) throw NumericError("l1: non-finite prediction");
    acc += w * std::fabs(p[i] - t[i]);
    count += w;
  }
  const double denom = count > 0.0 ? count : 1.0;
  return unary(pred, Tensor::scalar(acc / denom),
               [target, mask, denom](Node* nd, Node* pa) {
                 ensure_grad(pa);
                 const double g = nd->grad[0] / denom;
                 const double* mm = mask.defined() ? mask.data() : nullptr;
                 for (i64 i = 0; i < pa->grad.numel(); ++i) {
                   const double w = mm ? mm[i] : 1.0;
                   if (w == 0.0) continue;
                   const double d = pa->value[i] - target[i];
                   pa->grad[i] += g * w * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                 }
               });
}

// ------------------------------------------------------------ spatial

Var conv2d(Var x, Var w, Var b, i64 stride, i64 pad) {
  check_same_tape(x, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
    throw ConfigError("conv2d: bad shapes " + shape_str(sx) + " " + shape_str(sw));
  kern::Conv2dShape cs{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad};
  Tensor out(Shape{cs.n, cs.cout, cs.oh(), cs.ow()});
  kern::conv2d_forward(cs, x.val().data(), w.val().data(),
                       b.defined() ? b.val().data() : nullptr, out.data());
  const bool rg = x.node->requires_grad || w.node->requires_grad ||
                  (b.defined() && b.node->requires_grad);
  Node* n = x.tape->make(std::move(out), rg);
  if (rg) {
    Node *nx = x.node, *nw = w.node, *nb = b.defined() ? b.node : nullptr;
    n->backward = [n, nx, nw, nb, cs]() {
      if (nx->requires_grad) {
        ensure_grad(nx);
        kern::conv2d_backward_input(cs, n->grad.data(), nw->value.data(), nx->grad.data());
      }
      if (nw->requires_grad) {
        ensure_grad(nw);
        kern::conv2d_backward_weight(cs, nx->value.data(), n->grad.data(), nw->grad.data());
      }
      if (nb && nb->requires_grad) {
        ensure_grad(nb);
        kern::conv2d_backward_bias(cs, n->grad.data(), nb->grad.data());
      }
    };
  }
  return Var{x.tape, n};
}

Var tconv2x(Var x, Var w, Var b) {
  check_same_tape(x, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[0] || sw[2] != 2 || sw[3] != 2)
    throw ConfigError("tconv2x: bad shapes " + shape_str(sx) + " " + shape_str(sw));
  const i64 n_ = sx[0], cin = sx[1], h = sx[2], ww = sx[3], cout = sw[1];
  Tensor out(Shape{n_, cout, 2 * h, 2 * ww});
  kern::tconv2x_forward(n_, cin, cout, h, ww, x.val().data(), w.val().data(),
                        b.defined() ? b.val().data() : nullptr, out.data());
  const bool rg = x.node->requires_grad || w.node->requires_grad ||
                  (b.defined() && b.node->requires_grad);
  Node* n = x.tape->make(std::move(out), rg);
  if (rg) {
    Node *nx = x.node, *nw = w.node, *nb = b.defined() ? b.node : nullptr;
    n->backward = [n, nx, nw, nb, n_, cin, cout, h, ww]() {
      if (nx->requires_grad) {
        ensure_grad(nx);
        kern::tconv2x_backward_input(n_, cin, cout, h, ww, n->grad.data(),
                                     nw->value.data(), nx->grad.data());
      }
      if (nw->requires_grad || (nb && nb->requires_grad)) {
        if (nw->requires_grad) ensure_grad(nw);
        if (nb && nb->requires_grad) ensure_grad(nb);
        kern::tconv2x_backward_weight(
            n_, cin, cout, h, ww, nx->value.data(), n->grad.data(),
            nw->requires_grad ? nw->grad.data() : nullptr,
            (nb && nb->requires_grad) ? nb->grad.data() : nullptr);
      }
    };
  }
  return Var{x.tape, n};
}

Var bilinear(Var field, Var points) {
  check_same_tape(field, points);
  const Shape& sf = field.shape();
  const Shape& sp = points.shape();
  if (sf.size() != 3 || sp.size() != 2 || sp[1] != 2)
    throw ConfigError("bilinear: field must be [C,H,W], points [M,2]");
  if (!points.val().all_finite()) throw NumericError("bilinear: non-finite coordinates");
  const i64 c = sf[0], h = sf[1], w = sf[2], m = sp[0];
  Tensor out(Shape{m, c});
  kern::bilinear_gather(c, h, w, field.val().data(), m, points.val().data(), out.data());
  const bool rg = field.node->requires_grad || points.node->requires_grad;
  Node* n = field.tape->make(std::move(out), rg);
  if (rg) {
    Node *nf = field.node, *np = points.node;
    n->backward = [n, nf, np, c, h, w, m]() {
      if (nf->requires_grad) ensure_grad(nf);
      if (np->requires_grad) ensure_grad(np);
      kern::bilinear_scatter_grad(c, h, w, nf->value.data(), m, np->value.data(),
                                  n->grad.data(),
                                  nf->requires_grad ? nf->grad.data() : nullptr,
                                  np->requires_grad ? np->grad.data() : nullptr);
    };
  }
  return Var{field.tape, n};
}

Var detach(Var a) { return a.tape->leaf(a.val(), false); }

}  // namespace pointseg::ag
