#include "pointseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "pointseg/errors.hpp"
#include "pointseg/kernels.hpp"
#include "pointseg/rng.hpp"

namespace pointseg::phantom {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  return a < 0.0 ? a + 2.0 * kPi : a;
}

// Separable Gaussian blur with replicated borders; identity for sigma <= 0.
void gaussian_blur(Tensor& plane, std::int64_t h, std::int64_t w, double sigma) {
  if (sigma <= 0.0) return;
  const std::int64_t radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) * (static_cast<double>(i) / sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;

  Tensor tmp(Shape{h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i) {
        const std::int64_t xs = std::clamp<std::int64_t>(x + i, 0, w - 1);
        acc += plane[y * w + xs] * k[static_cast<std::size_t>(i + radius)];
      }
      tmp[y * w + x] = acc;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i) {
        const std::int64_t ys = std::clamp<std::int64_t>(y + i, 0, h - 1);
        acc += tmp[ys * w + x] * k[static_cast<std::size_t>(i + radius)];
      }
      plane[y * w + x] = acc;
    }
}

double bilinear_plane(const Tensor& plane, std::int64_t h, std::int64_t w, double x,
                      double y) {
  double out;
  const double pt[2] = {x, y};
  kern::bilinear_gather_serial(1, h, w, plane.data(), 1, pt, &out);
  return out;
}

}  // namespace

void PhantomSpec::validate() const {
  if (frames < 2) throw ConfigError("phantom: frames T must be >= 2");
  if (cycle_frames < 2) throw ConfigError("phantom: cycle length T_cycle must be >= 2");
  if (!(amplitude >= 0.0 && amplitude < 0.5))
    throw ConfigError("phantom: pulsation amplitude must satisfy 0 <= a < 0.5");
  if (!(r_in0 > 0.0)) throw ConfigError("phantom: inner radius must be positive");
  if (!(r_in0 < r_out0)) throw ConfigError("phantom: inner radius must be below outer radius");
  const double half = static_cast<double>(std::min(height, width)) / 2.0;
  if (!(r_out0 < half - amplitude * r_out0))
    throw ConfigError("phantom: annulus leaves the frame: require r_out0 < min(H,W)/2 - a*r_out0");
  if (blur_sigma < 0.0) throw ConfigError("phantom: blur sigma must be >= 0");
  if (speckle_scale < 0.0) throw ConfigError("phantom: speckle scale must be >= 0");
  if (!(pixel_spacing > 0.0)) throw ConfigError("phantom: pixel spacing must be positive");
  if (shadow) {
    if (shadow->duration < 0 || shadow->onset < 0)
      throw ConfigError("phantom: shadow onset/duration must be >= 0");
  }
}

double radial_scale(std::int64_t t, const PhantomSpec& spec) {
  return 1.0 + spec.amplitude *
                   std::sin(2.0 * kPi * static_cast<double>(t) /
                                static_cast<double>(spec.cycle_frames) +
                            spec.phase);
}

double band_weight(double rho, const PhantomSpec& spec) {
  if (rho <= spec.r_out0) return 1.0;
  const double edge = 1.5 * spec.r_out0;
  if (rho >= edge) return 0.0;
  const double u = (rho - spec.r_out0) / (0.5 * spec.r_out0);
  return 0.5 * (1.0 + std::cos(kPi * u));
}

Point deform_point(Point p0, std::int64_t t, const PhantomSpec& spec, bool* clamped) {
  const double dx = p0.x - spec.cx, dy = p0.y - spec.cy;
  const double rho0 = std::hypot(dx, dy);
  const double s = radial_scale(t, spec);
  const double rho_t = rho0 * (1.0 + band_weight(rho0, spec) * (s - 1.0));
  Point p;
  if (rho0 == 0.0) {
    p = Point{spec.cx, spec.cy};
  } else {
    p = Point{spec.cx + dx / rho0 * rho_t, spec.cy + dy / rho0 * rho_t};
  }
  const double xmax = static_cast<double>(spec.width - 1);
  const double ymax = static_cast<double>(spec.height - 1);
  bool hit = false;
  if (p.x < 0.0) { p.x = 0.0; hit = true; }
  if (p.x > xmax) { p.x = xmax; hit = true; }
  if (p.y < 0.0) { p.y = 0.0; hit = true; }
  if (p.y > ymax) { p.y = ymax; hit = true; }
  if (clamped) *clamped = hit;
  return p;
}

double invert_radius(double rho_t, double scale, const PhantomSpec& spec) {
  if (scale == 1.0 || rho_t == 0.0) return rho_t;
  double lo = 0.0, hi = rho_t + 1.5 * spec.r_out0;  // f(hi) = hi - rho_t > 0
  for (int it = 0; it < 48; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = mid * (1.0 + band_weight(mid, spec) * (scale - 1.0)) - rho_t;
    if (f < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

bool shadow_covers(const PhantomSpec& spec, std::int64_t t, double x, double y) {
  if (!spec.shadow) return false;
  const ShadowSpec& sh = *spec.shadow;
  if (t < sh.onset || t >= sh.onset + sh.duration) return false;
  if (sh.angle_end - sh.angle_start >= 2.0 * kPi) return true;  // full occlusion
  const double ang = wrap_angle(std::atan2(y - spec.cy, x - spec.cx));
  const double a0 = wrap_angle(sh.angle_start);
  const double span = wrap_angle(sh.angle_end - sh.angle_start);
  const double rel = wrap_angle(ang - a0);
  return rel < span;
}

data::ClipRecord GroundTruthClip::to_record() const {
  data::ClipRecord rec;
  rec.clip = clip;
  rec.masks = masks;
  rec.tracks = tracks;
  return rec;
}

namespace {

// 60% regular grid clipped to the band, 40% uniform in the band.
std::vector<Point> seed_band_points(const PhantomSpec& spec, std::int64_t n_points) {
  const std::int64_t n_grid_target =
      static_cast<std::int64_t>(std::llround(0.6 * static_cast<double>(n_points)));
  std::vector<Point> pts;

  auto in_band = [&](double x, double y) {
    const double rho = std::hypot(x - spec.cx, y - spec.cy);
    return rho >= spec.r_in0 && rho <= spec.r_out0;
  };

  if (n_grid_target > 0) {
    for (std::int64_t g = 1; g <= 4 * std::max(spec.height, spec.width); ++g) {
      std::vector<Point> cand;
      for (std::int64_t gy = 0; gy < g; ++gy)
        for (std::int64_t gx = 0; gx < g; ++gx) {
          const double x = (static_cast<double>(gx) + 0.5) * static_cast<double>(spec.width) /
                           static_cast<double>(g);
          const double y = (static_cast<double>(gy) + 0.5) * static_cast<double>(spec.height) /
                           static_cast<double>(g);
          if (in_band(x, y)) cand.push_back({x, y});
        }
      if (static_cast<std::int64_t>(cand.size()) >= n_grid_target) {
        cand.resize(static_cast<std::size_t>(n_grid_target));
        pts = std::move(cand);
        break;
      }
    }
    if (static_cast<std::int64_t>(pts.size()) < n_grid_target)
      throw ConfigError("phantom: band too thin to seed a regular grid");
  }

  rng::Stream rs(spec.seed, "phantom.points");
  const double r2in = spec.r_in0 * spec.r_in0;
  const double r2out = spec.r_out0 * spec.r_out0;
  std::uint64_t c = 0;
  while (static_cast<std::int64_t>(pts.size()) < n_points) {
    const double rho = std::sqrt(rs.uniform(c++) * (r2out - r2in) + r2in);
    const double theta = 2.0 * kPi * rs.uniform(c++);
    pts.push_back({spec.cx + rho * std::cos(theta), spec.cy + rho * std::sin(theta)});
  }
  return pts;
}

}  // namespace

GroundTruthClip generate_clip(const PhantomSpec& spec, std::int64_t n_points) {
  spec.validate();
  if (n_points < 1) throw ConfigError("phantom: n_points must be >= 1");

  const std::int64_t T = spec.frames, H = spec.height, W = spec.width;

  // Speckle texture in tissue (t=0) coordinates, mean-normalized lognormal.
  Tensor noise(Shape{H, W});
  {
    rng::Stream ns(spec.seed, "phantom.speckle");
    const double norm = std::exp(-0.5 * spec.speckle_scale * spec.speckle_scale);
    for (std::int64_t i = 0; i < H * W; ++i)
      noise[i] = std::exp(spec.speckle_scale * ns.gaussian(static_cast<std::uint64_t>(i))) * norm;
  }

  Tensor frames(Shape{T, H, W});
  Tensor masks(Shape{T, H, W});
  for (std::int64_t t = 0; t < T; ++t) {
    const double s = radial_scale(t, spec);
    Tensor plane(Shape{H, W});
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        const double rho_t = std::hypot(fx - spec.cx, fy - spec.cy);
        const double rho0 = invert_radius(rho_t, s, spec);
        double base = 0.5;
        if (rho0 < spec.r_in0)
          base = 0.15;
        else if (rho0 <= spec.r_out0)
          base = 0.85;
        // advected texture lookup at the preimage point
        double tex = 1.0;
        if (rho_t > 0.0) {
          const double px = spec.cx + (fx - spec.cx) / rho_t * rho0;
          const double py = spec.cy + (fy - spec.cy) / rho_t * rho0;
          tex = bilinear_plane(noise, H, W, px, py);
        } else {
          tex = bilinear_plane(noise, H, W, spec.cx, spec.cy);
        }
        plane[y * W + x] = base * tex;

        masks.at({t, y, x}) = (rho_t >= spec.r_in0 * s && rho_t <= spec.r_out0 * s) ? 1.0 : 0.0;
      }

    gaussian_blur(plane, H, W, spec.blur_sigma);

    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        double v = plane[y * W + x];
        if (shadow_covers(spec, t, static_cast<double>(x), static_cast<double>(y))) v = 0.0;
        frames.at({t, y, x}) = std::clamp(v, 0.0, 1.0);
      }
  }

  const auto seeds = seed_band_points(spec, n_points);
  Tensor positions(Shape{n_points, T, 2});
  Tensor visibility(Shape{n_points, T});
  for (std::int64_t i = 0; i < n_points; ++i)
    for (std::int64_t t = 0; t < T; ++t) {
      bool clamped = false;
      const Point p = deform_point(seeds[static_cast<std::size_t>(i)], t, spec, &clamped);
      positions.at({i, t, 0}) = p.x;
      positions.at({i, t, 1}) = p.y;
      const bool shadowed = shadow_covers(spec, t, p.x, p.y);
      visibility.at({i, t}) = (clamped || shadowed) ? 0.0 : 1.0;
    }

  GroundTruthClip out;
  data::quantize_f32(frames);
  data::quantize_f32(positions);
  out.clip.frames = frames;
  out.clip.pixel_spacing = spec.pixel_spacing;
  out.clip.quality = (spec.shadow || spec.speckle_scale > 0.55) ? data::Quality::poor
                                                                : data::Quality::good_medium;
  out.masks = masks;
  out.tracks.positions = positions;
  out.tracks.visibility = visibility;
  out.tracks.point_ids.resize(static_cast<std::size_t>(n_points));
  for (std::int64_t i = 0; i < n_points; ++i) out.tracks.point_ids[static_cast<std::size_t>(i)] = static_cast<int>(i);
  out.spec = spec;
  return out;
}

}  // namespace pointseg::phantom
