#pragma once
// Procedural ultrasound-like phantom with analytically exact ground truth.
//
// A pulsating annulus (bright band, dark cavity, mid-gray background)
// drives masks and point trajectories from the same radial deformation,
// so the two can never disagree. Speckle texture is defined in tissue
// coordinates at t=0 and advected by the inverse deformation, making the
// motion recoverable from texture rather than edges alone.

#include <cstdint>
#include <optional>

#include "pointseg/clip_io.hpp"

namespace pointseg::phantom {

struct ShadowSpec {
  double angle_start = 0.0;  // radians, measured from +x axis, y-down frame
  double angle_end = 0.0;    // sector covers [start, end) going counter-clockwise
  std::int64_t onset = 0;    // first shadowed frame
  std::int64_t duration = 0; // number of shadowed frames
};

struct PhantomSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t frames = 8;
  double cx = 32.0;
  double cy = 32.0;
  double r_in0 = 10.0;
  double r_out0 = 20.0;
  double amplitude = 0.08;       // pulsation fraction a
  std::int64_t cycle_frames = 8; // T_cycle
  double phase = 0.0;            // radians
  double speckle_scale = 0.4;
  double blur_sigma = 1.0;
  std::optional<ShadowSpec> shadow;
  double pixel_spacing = 1.0;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the violated constraint.
  void validate() const;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// s(t) = 1 + a*sin(2*pi*t/T_cycle + phase). Drives masks and trajectories.
double radial_scale(std::int64_t t, const PhantomSpec& spec);

// Radial weighting w(rho): 1 out to r_out0, cosine decay to 0 at 1.5*r_out0.
double band_weight(double rho, const PhantomSpec& spec);

// Forward deformation about the center: rho_t = rho0*(1 + w(rho0)*(s-1)),
// angle preserved. p0 lives in reference (tissue) coordinates; it equals
// the frame-0 position exactly when s(0) = 1 (phase 0). Results outside
// the frame are clamped; a clamped point is reported invisible via
// *clamped.
Point deform_point(Point p0, std::int64_t t, const PhantomSpec& spec,
                   bool* clamped = nullptr);

// Inverse of the radial map for a given scale, by bisection.
double invert_radius(double rho_t, double scale, const PhantomSpec& spec);

// True when the pixel/point angle falls inside the active shadow sector.
bool shadow_covers(const PhantomSpec& spec, std::int64_t t, double x, double y);

struct GroundTruthClip {
  data::VideoClip clip;
  Tensor masks;  // [T,H,W] binary annulus indicator
  data::TrajectorySet tracks;
  PhantomSpec spec;  // deformation parameters echoed from the request

  data::ClipRecord to_record() const;
};

GroundTruthClip generate_clip(const PhantomSpec& spec, std::int64_t n_points);

}  // namespace pointseg::phantom
