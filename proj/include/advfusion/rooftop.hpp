#pragma once

#include "advfusion/geometry.hpp"

namespace advf {

// Heading-aligned tight bounding box fitted to a vehicle point cloud.
struct VehicleFit {
  Vec3 center;
  double heading = 0.0;  // radians, normalized to (-pi, pi]
  double length = 0.0, width = 0.0, height = 0.0;
  std::vector<Vec3> points;  // the fitted cloud, kept for rooftop extraction
};

// Fits a tight box whose yaw minimizes footprint area over headings within
// +/-15 degrees of the prior. Requires at least 10 points.
inline VehicleFit fit_vehicle_box(const std::vector<Vec3>& points, double prior_heading) {
  if (points.size() < 10)
    throw std::invalid_argument("fit_vehicle_box: need >= 10 points, got " +
                                std::to_string(points.size()));
  const double band = 15.0 * M_PI / 180.0;

  auto footprint = [&](double heading, double* ext = nullptr) {
    double c = std::cos(heading), s = std::sin(heading);
    double u0 = 1e30, u1 = -1e30, v0 = 1e30, v1 = -1e30;
    for (const auto& p : points) {
      double u = c * p.x + s * p.y;   // along-heading
      double v = -s * p.x + c * p.y;  // lateral
      u0 = std::min(u0, u); u1 = std::max(u1, u);
      v0 = std::min(v0, v); v1 = std::max(v1, v);
    }
    if (ext) { ext[0] = u0; ext[1] = u1; ext[2] = v0; ext[3] = v1; }
    return (u1 - u0) * (v1 - v0);
  };

  // coarse scan then golden-section refinement around the best candidate
  double best_h = prior_heading, best_a = footprint(prior_heading);
  const int steps = 60;
  for (int i = 0; i <= steps; ++i) {
    double h = prior_heading - band + 2.0 * band * i / steps;
    double a = footprint(h);
    if (a < best_a) { best_a = a; best_h = h; }
  }
  double lo = best_h - 2.0 * band / steps, hi = best_h + 2.0 * band / steps;
  lo = std::max(lo, prior_heading - band);
  hi = std::min(hi, prior_heading + band);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
  double fa = footprint(a), fb = footprint(b);
  for (int it = 0; it < 40; ++it) {
    if (fa < fb) { hi = b; b = a; fb = fa; a = hi - gr * (hi - lo); fa = footprint(a); }
    else         { lo = a; a = b; fa = fb; b = lo + gr * (hi - lo); fb = footprint(b); }
  }
  best_h = 0.5 * (lo + hi);

  double ext[4];
  footprint(best_h, ext);
  double z0 = 1e30, z1 = -1e30;
  for (const auto& p : points) { z0 = std::min(z0, p.z); z1 = std::max(z1, p.z); }

  VehicleFit fit;
  fit.heading = wrap_angle(best_h);
  double c = std::cos(best_h), s = std::sin(best_h);
  double uc = 0.5 * (ext[0] + ext[1]), vc = 0.5 * (ext[2] + ext[3]);
  fit.center = {c * uc - s * vc, s * uc + c * vc, 0.5 * (z0 + z1)};
  fit.length = ext[1] - ext[0];
  fit.width = ext[3] - ext[2];
  fit.height = z1 - z0;
  fit.points = points;
  return fit;
}

// Placement pose on the vehicle roof: x/y at the centroid of points within the
// top 20 cm height band (or the box-top center when use_band_centroid=false),
// z at the band top, heading carried over from the fit.
inline Pose rooftop_pose(const VehicleFit& fit, bool use_band_centroid = true) {
  if (fit.height <= 0.2)
    throw std::invalid_argument("rooftop_pose: vehicle height must exceed 0.2 m, got " +
                                std::to_string(fit.height));
  double z_top = fit.center.z + 0.5 * fit.height;
  Pose pose;
  pose.heading = fit.heading;
  if (use_band_centroid) {
    double sx = 0, sy = 0;
    int64_t n = 0;
    for (const auto& p : fit.points)
      if (p.z >= z_top - 0.2) { sx += p.x; sy += p.y; ++n; }
    if (n == 0) throw std::runtime_error("rooftop_pose: no points in the top 20 cm band");
    pose.translation = {sx / n, sy / n, z_top};
  } else {
    pose.translation = {fit.center.x, fit.center.y, z_top};
  }
  return pose;
}

}  // namespace advf
