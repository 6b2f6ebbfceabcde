#pragma once
// Evaluation kernels: Dice, boundary HD95, TAP-style tracking metrics,
// paired t-tests, and the temporal-stability score, plus the per-clip /
// aggregate report structure the CLI emits.

#include <optional>
#include <string>
#include <vector>

#include "pointseg/clip_io.hpp"

namespace pointseg::metrics {

// Overlap of two binary masks (any equal shape). Both empty -> 1.
double dice_score(const Tensor& a, const Tensor& b);

// 95th-percentile symmetric boundary distance in physical units.
// Boundary pixels are foreground pixels 4-adjacent to background or the
// image border; percentile is nearest-rank. Empty masks are an error
// value: callers report them as missing.
struct Hd95 {
  double value = 0.0;
  bool defined = false;
};
Hd95 hd95(const Tensor& pred, const Tensor& gt, double pixel_spacing);

struct TapResult {
  double aj = 0.0;
  double delta_avg = 0.0;
  double oa = 0.0;
};

// TAP-Vid bookkeeping. Default thresholds {1,2,4,8,16} px.
TapResult tap_metrics(const Tensor& pred_pos, const Tensor& pred_vis,
                      const Tensor& gt_pos, const Tensor& gt_vis,
                      const std::vector<double>& thresholds_px = {1, 2, 4, 8, 16});

// Two-sided paired t-test p-value. Degenerate variance falls back to the
// exact-tie convention (1.0 when the mean difference is 0, else 0.0) and
// sets *degenerate.
double paired_t_test(const std::vector<double>& a, const std::vector<double>& b,
                     bool* degenerate = nullptr);

// Mean over consecutive frames of (1 - dice). Lower = more stable.
double temporal_stability(const Tensor& mask_sequence);

// Regularized incomplete beta (exposed for the t-distribution CDF).
double incomplete_beta(double a, double b, double x);

// ------------------------------------------------------------ reports

struct ClipMetrics {
  std::string id;
  data::Quality quality = data::Quality::good_medium;
  double mdice = 0.0;              // 0-100
  std::optional<double> hd95;      // physical units; empty masks excluded
  double stability = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
  int count = 0;
  int missing = 0;  // clips excluded (e.g. empty-mask HD95)
};

Aggregate aggregate(const std::vector<double>& values, int missing = 0);
// "85.8(5.4)"-style formatting.
std::string mean_std(const Aggregate& a, int precision = 1);

}  // namespace pointseg::metrics
