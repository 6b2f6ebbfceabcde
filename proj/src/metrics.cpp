#include "pointseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pointseg/errors.hpp"

namespace pointseg::metrics {

namespace {

void check_binary(const Tensor& t, const char* what) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (t[i] != 0.0 && t[i] != 1.0)
      throw ConfigError(std::string(what) + ": mask is not binary");
}

}  // namespace

double dice_score(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ConfigError("dice_score: shape mismatch");
  check_binary(a, "dice_score");
  check_binary(b, "dice_score");
  std::int64_t na = 0, nb = 0, inter = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    na += a[i] == 1.0;
    nb += b[i] == 1.0;
    inter += (a[i] == 1.0 && b[i] == 1.0);
  }
  if (na + nb == 0) return 1.0;  // empty-empty convention
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace {

// Boundary pixels: foreground 4-adjacent to background or the border.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const Tensor& m) {
  const std::int64_t h = m.dim(0), w = m.dim(1);
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      if (m[y * w + x] != 1.0) continue;
      const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
                        m[(y - 1) * w + x] == 0.0 || m[(y + 1) * w + x] == 0.0 ||
                        m[y * w + x - 1] == 0.0 || m[y * w + x + 1] == 0.0;
      if (edge) out.emplace_back(x, y);
    }
  return out;
}

// Felzenszwalb-Huttenlocher 1-D squared distance transform.
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::int64_t n = static_cast<std::int64_t>(f.size());
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  std::int64_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::int64_t q = 1; q < n; ++q) {
    double s;
    while (true) {
      const std::int64_t p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + static_cast<double>(q * q)) -
           (f[static_cast<std::size_t>(p)] + static_cast<double>(p * p))) /
          (2.0 * static_cast<double>(q - p));
      if (s <= z[static_cast<std::size_t>(k)])
        --k;
      else
        break;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
    const std::int64_t p = v[static_cast<std::size_t>(k)];
    d[static_cast<std::size_t>(q)] =
        static_cast<double>((q - p) * (q - p)) + f[static_cast<std::size_t>(p)];
  }
}

// Exact squared Euclidean distance to the nearest seed pixel.
Tensor edt_squared(const std::vector<std::pair<std::int64_t, std::int64_t>>& seeds,
                   std::int64_t h, std::int64_t w) {
  const double inf = 1e18;
  Tensor g(Shape{h, w}, inf);
  for (const auto& [x, y] : seeds) g[y * w + x] = 0.0;
  std::vector<double> col(static_cast<std::size_t>(h)), out_col(static_cast<std::size_t>(h));
  for (std::int64_t x = 0; x < w; ++x) {
    for (std::int64_t y = 0; y < h; ++y) col[static_cast<std::size_t>(y)] = g[y * w + x];
    edt_1d(col, out_col);
    for (std::int64_t y = 0; y < h; ++y) g[y * w + x] = out_col[static_cast<std::size_t>(y)];
  }
  std::vector<double> row(static_cast<std::size_t>(w)), out_row(static_cast<std::size_t>(w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) row[static_cast<std::size_t>(x)] = g[y * w + x];
    edt_1d(row, out_row);
    for (std::int64_t x = 0; x < w; ++x) g[y * w + x] = out_row[static_cast<std::size_t>(x)];
  }
  return g;
}

// Nearest-rank percentile of ascending-sorted data.
double percentile_nearest_rank(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  auto idx = static_cast<std::int64_t>(std::ceil(pct * n)) - 1;
  idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(v.size()) - 1);
  return v[static_cast<std::size_t>(idx)];
}

}  // namespace

Hd95 hd95(const Tensor& pred, const Tensor& gt, double pixel_spacing) {
  if (pred.ndim() != 2 || gt.ndim() != 2 || pred.shape() != gt.shape())
    throw ConfigError("hd95: masks must be equal-shape [H,W]");
  check_binary(pred, "hd95");
  check_binary(gt, "hd95");
  const auto ba = boundary_pixels(pred);
  const auto bb = boundary_pixels(gt);
  if (ba.empty() || bb.empty()) return Hd95{};  // reported as missing

  const std::int64_t h = pred.dim(0), w = pred.dim(1);
  const Tensor da = edt_squared(bb, h, w);  // distance field to gt boundary
  const Tensor db = edt_squared(ba, h, w);

  std::vector<double> d_ab, d_ba;
  d_ab.reserve(ba.size());
  d_ba.reserve(bb.size());
  for (const auto& [x, y] : ba) d_ab.push_back(std::sqrt(da[y * w + x]));
  for (const auto& [x, y] : bb) d_ba.push_back(std::sqrt(db[y * w + x]));
  const double p_ab = percentile_nearest_rank(std::move(d_ab), 0.95);
  const double p_ba = percentile_nearest_rank(std::move(d_ba), 0.95);
  return Hd95{std::max(p_ab, p_ba) * pixel_spacing, true};
}

TapResult tap_metrics(const Tensor& pred_pos, const Tensor& pred_vis,
                      const Tensor& gt_pos, const Tensor& gt_vis,
                      const std::vector<double>& thresholds_px) {
  if (pred_pos.shape() != gt_pos.shape() || pred_vis.shape() != gt_vis.shape())
    throw ConfigError("tap_metrics: shape mismatch");
  if (thresholds_px.empty()) throw ConfigError("tap_metrics: thresholds required");
  check_binary(pred_vis, "tap_metrics pred visibility");
  check_binary(gt_vis, "tap_metrics gt visibility");
  const std::int64_t N = pred_pos.dim(0), T = pred_pos.dim(1);

  double jaccard_sum = 0.0, within_sum = 0.0;
  for (double delta : thresholds_px) {
    std::int64_t tp = 0, fp = 0, fn = 0, within = 0, gt_visible = 0;
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t t = 0; t < T; ++t) {
        const bool gv = gt_vis.at({i, t}) == 1.0;
        const bool pv = pred_vis.at({i, t}) == 1.0;
        const double err = std::hypot(pred_pos.at({i, t, 0}) - gt_pos.at({i, t, 0}),
                                      pred_pos.at({i, t, 1}) - gt_pos.at({i, t, 1}));
        if (gv) {
          ++gt_visible;
          if (err <= delta) ++within;
        }
        if (gv && pv && err <= delta) ++tp;
        if (pv && (!gv || err > delta)) ++fp;
        if (gv && (!pv || err > delta)) ++fn;
      }
    const std::int64_t denom = tp + fp + fn;
    jaccard_sum += denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
    within_sum += gt_visible == 0 ? 1.0
                                  : static_cast<double>(within) / static_cast<double>(gt_visible);
  }

  std::int64_t agree = 0;
  for (std::int64_t i = 0; i < pred_vis.numel(); ++i)
    agree += pred_vis[i] == gt_vis[i];

  TapResult r;
  r.aj = jaccard_sum / static_cast<double>(thresholds_px.size());
  r.delta_avg = within_sum / static_cast<double>(thresholds_px.size());
  r.oa = static_cast<double>(agree) / static_cast<double>(pred_vis.numel());
  return r;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // Continued fraction (Lentz), with the symmetry transform for stability.
  const double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - ln_beta);
  auto cf = [](double aa, double bb, double xx) {
    const double tiny = 1e-300;
    double c = 1.0, d = 1.0 - (aa + bb) * xx / (aa + 1.0);
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double result = d;
    for (int m = 1; m <= 300; ++m) {
      const double dm = static_cast<double>(m);
      double num = dm * (bb - dm) * xx / ((aa + 2.0 * dm - 1.0) * (aa + 2.0 * dm));
      d = 1.0 + num * d;
      if (std::fabs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::fabs(c) < tiny) c = tiny;
      d = 1.0 / d;
      result *= d * c;
      num = -(aa + dm) * (aa + bb + dm) * xx / ((aa + 2.0 * dm) * (aa + 2.0 * dm + 1.0));
      d = 1.0 + num * d;
      if (std::fabs(d) < tiny) d = tiny;
      c = 1.0 + num / c;
      if (std::fabs(c) < tiny) c = tiny;
      d = 1.0 / d;
      const double delta = d * c;
      result *= delta;
      if (std::fabs(delta - 1.0) < 1e-14) break;
    }
    return result;
  };
  if (x < (a + 1.0) / (a + b + 2.0)) return front * cf(a, b, x) / a;
  return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) -
                        (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b))) *
                   cf(b, a, 1.0 - x) / b;
}

double paired_t_test(const std::vector<double>& a, const std::vector<double>& b,
                     bool* degenerate) {
  if (a.size() != b.size()) throw ConfigError("paired_t_test: length mismatch");
  if (a.size() < 2) throw ConfigError("paired_t_test: need at least 2 pairs");
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1.0);
  if (degenerate) *degenerate = false;
  if (var == 0.0) {
    if (degenerate) *degenerate = true;
    return mean == 0.0 ? 1.0 : 0.0;
  }
  const double t = mean / std::sqrt(var / n);
  const double nu = n - 1.0;
  // two-sided p via the regularized incomplete beta
  return incomplete_beta(nu / 2.0, 0.5, nu / (nu + t * t));
}

double temporal_stability(const Tensor& mask_sequence) {
  if (mask_sequence.ndim() != 3 || mask_sequence.dim(0) < 2)
    throw ConfigError("temporal_stability: need [T,H,W] with T >= 2");
  const std::int64_t T = mask_sequence.dim(0);
  const std::int64_t plane = mask_sequence.dim(1) * mask_sequence.dim(2);
  double acc = 0.0;
  for (std::int64_t t = 0; t + 1 < T; ++t) {
    Tensor a(Shape{mask_sequence.dim(1), mask_sequence.dim(2)});
    Tensor b(Shape{mask_sequence.dim(1), mask_sequence.dim(2)});
    for (std::int64_t i = 0; i < plane; ++i) {
      a[i] = mask_sequence[t * plane + i];
      b[i] = mask_sequence[(t + 1) * plane + i];
    }
    acc += 1.0 - dice_score(a, b);
  }
  return acc / static_cast<double>(T - 1);
}

Aggregate aggregate(const std::vector<double>& values, int missing) {
  Aggregate a;
  a.missing = missing;
  a.count = static_cast<int>(values.size());
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

std::string mean_std(const Aggregate& a, int precision) {
  if (a.count == 0) return "-";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << a.mean << "(" << a.stddev << ")";
  return os.str();
}

}  // namespace pointseg::metrics
