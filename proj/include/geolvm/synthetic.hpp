#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "geolvm/errors.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/manifolds.hpp"
#include "geolvm/rng.hpp"

namespace geolvm::synthetic {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Both scenarios trace a one-dimensional path through a product space, so a
// two-dimensional latent model has to bend around the ambient curvature:
//  - planar_j_sphere_c: a J-shaped polyline in R^2 paired with a C-shaped
//    arc on S^2 (drawn in a tangent disk and wrapped onto the sphere).
//  - planar_c_spd_profile: a C-shaped polyline in R^2 paired with 2x2 SPD
//    matrices whose eigenframe follows the heading of the planar curve.
enum class Scenario { PlanarJSphereC, PlanarCSpdProfile };

inline std::string scenario_name(Scenario s) {
  return s == Scenario::PlanarJSphereC ? "planar_j_sphere_c" : "planar_c_spd_profile";
}

inline Scenario scenario_from_name(const std::string& name) {
  if (name == "planar_j_sphere_c") return Scenario::PlanarJSphereC;
  if (name == "planar_c_spd_profile") return Scenario::PlanarCSpdProfile;
  fail(ErrorKind::Config, "unknown scenario: " + name);
}

namespace detail {

// arc-length point on a polyline, t in [0, 1]
inline VectorXd polyline_point(const std::vector<Eigen::Vector2d>& verts, double t) {
  std::vector<double> cum{0.0};
  for (std::size_t i = 0; i + 1 < verts.size(); ++i)
    cum.push_back(cum.back() + (verts[i + 1] - verts[i]).norm());
  const double s = t * cum.back();
  for (std::size_t i = 0; i + 1 < verts.size(); ++i) {
    if (s <= cum[i + 1] || i + 2 == verts.size()) {
      const double seg = cum[i + 1] - cum[i];
      const double u = seg > 0.0 ? (s - cum[i]) / seg : 0.0;
      return verts[i] + u * (verts[i + 1] - verts[i]);
    }
  }
  return verts.back();
}

inline const std::vector<Eigen::Vector2d>& j_polyline() {
  static const std::vector<Eigen::Vector2d> verts = {
      {0.35, 1.0},  {0.35, -0.3}, {0.28, -0.6},
      {0.10, -0.8}, {-0.15, -0.82}, {-0.35, -0.7}};
  return verts;
}

// open circular arc, the gap making the "C"
inline Eigen::Vector2d c_arc(double t, double radius) {
  const double deg = std::numbers::pi / 180.0;
  const double psi = (50.0 + 260.0 * t) * deg;
  return radius * Eigen::Vector2d(std::cos(psi), std::sin(psi));
}

inline double c_arc_heading(double t) {
  const double deg = std::numbers::pi / 180.0;
  const double psi = (50.0 + 260.0 * t) * deg;
  return psi + 0.5 * std::numbers::pi;
}

// Per-demonstration redraw of a template curve: a rotation, mild anisotropic
// scaling, and a smooth bandlimited warp along the arc parameter. Repeated
// demonstrations of the same shape then differ the way separately drawn
// copies of a letter do, instead of being rigid translates. The warp mixes
// four harmonics with amplitudes decaying like 1/h, so the wobble has
// structure at several scales the way a hand-drawn line does.
struct DemoRedraw {
  static constexpr int kHarmonics = 4;
  Eigen::Matrix2d A = Eigen::Matrix2d::Identity();
  Eigen::Matrix<double, 2, kHarmonics> amp = Eigen::Matrix<double, 2, kHarmonics>::Zero();
  Eigen::Matrix<double, 2, kHarmonics> phase = Eigen::Matrix<double, 2, kHarmonics>::Zero();

  Eigen::Vector2d apply(const Eigen::Vector2d& p, double t) const {
    Eigen::Vector2d q = A * p;
    for (int h = 0; h < kHarmonics; ++h) {
      const double arg = 2.0 * std::numbers::pi * (h + 1) * t;
      q(0) += amp(0, h) * std::sin(arg + phase(0, h));
      q(1) += amp(1, h) * std::sin(arg + phase(1, h));
    }
    return q;
  }
};

// strength 0 draws nothing, so datasets generated without demo variation keep
// their exact random stream
inline DemoRedraw draw_demo_redraw(Rng& rng, double strength) {
  DemoRedraw d;
  if (strength <= 0.0) return d;
  const double rot = 0.12 * strength * rng.normal();
  const double s0 = std::exp(0.08 * strength * rng.normal());
  const double s1 = std::exp(0.08 * strength * rng.normal());
  Eigen::Matrix2d R;
  R << std::cos(rot), -std::sin(rot), std::sin(rot), std::cos(rot);
  d.A = R * Eigen::Vector2d(s0, s1).asDiagonal();
  for (int c = 0; c < 2; ++c)
    for (int h = 0; h < DemoRedraw::kHarmonics; ++h) {
      d.amp(c, h) = 0.06 * strength / (h + 1.0) * rng.normal();
      d.phase(c, h) = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  return d;
}

}  // namespace detail

struct GenerateOptions {
  Scenario scenario = Scenario::PlanarJSphereC;
  std::uint64_t seed = 0;
  int trajectories = 6;
  int points_per_trajectory = 16;
  double noise = 0.03;         // isotropic tangent noise at each clean point
  double traj_offset = 0.05;   // per-trajectory tangent offset scale
  double demo_variation = 0.0; // per-trajectory redraw strength (rotation, scaling, smooth warp)
};

inline manifolds::ManifoldSpec scenario_spec(Scenario s) {
  if (s == Scenario::PlanarJSphereC)
    return manifolds::ManifoldSpec::product(
        {manifolds::ManifoldSpec::euclidean(2), manifolds::ManifoldSpec::sphere(2)});
  return manifolds::ManifoldSpec::product(
      {manifolds::ManifoldSpec::euclidean(2), manifolds::ManifoldSpec::spd(2)});
}

inline lvm::Dataset generate(const GenerateOptions& opt) {
  require(opt.trajectories >= 1 && opt.points_per_trajectory >= 2, ErrorKind::Config,
          "need at least one trajectory of at least two points");
  require(opt.noise >= 0.0 && opt.traj_offset >= 0.0 && opt.demo_variation >= 0.0,
          ErrorKind::Config, "noise scales must be nonnegative");
  const manifolds::ManifoldSpec spec = scenario_spec(opt.scenario);
  const manifolds::ManifoldSpec second =
      opt.scenario == Scenario::PlanarJSphereC ? manifolds::ManifoldSpec::sphere(2)
                                               : manifolds::ManifoldSpec::spd(2);
  const manifolds::ManifoldPoint second_base = manifolds::canonical_basepoint(second);
  const int m2 = second.tangent_dim();

  lvm::Dataset ds;
  ds.spec = spec;
  const int n = opt.trajectories * opt.points_per_trajectory;
  ds.points.resize(n, spec.ambient_dim());
  ds.trajectory_ids.resize(n);

  Rng rng(opt.seed);
  int row = 0;
  for (int k = 0; k < opt.trajectories; ++k) {
    const VectorXd off_planar = opt.traj_offset * rng.normal_vector(2);
    const VectorXd off_second = opt.traj_offset * rng.normal_vector(m2);
    const detail::DemoRedraw redraw_planar = detail::draw_demo_redraw(rng, opt.demo_variation);
    const detail::DemoRedraw redraw_second = detail::draw_demo_redraw(rng, opt.demo_variation);
    const auto planar_template = [&](double tt) {
      return redraw_planar.apply(
          opt.scenario == Scenario::PlanarJSphereC
              ? Eigen::Vector2d(detail::polyline_point(detail::j_polyline(), tt))
              : detail::c_arc(tt, 0.8),
          tt);
    };
    for (int i = 0; i < opt.points_per_trajectory; ++i) {
      const double t = static_cast<double>(i) / (opt.points_per_trajectory - 1);

      Eigen::Vector2d planar = planar_template(t);
      planar += Eigen::Vector2d(off_planar) + Eigen::Vector2d(opt.noise * rng.normal_vector(2));

      VectorXd v_clean(m2);
      if (opt.scenario == Scenario::PlanarJSphereC) {
        v_clean = redraw_second.apply(detail::c_arc(t, 0.8), t);
      } else {
        // log coordinates of R diag(2.0, 0.6) R' at heading phi, taken at the
        // basepoint; the heading follows the (possibly redrawn) planar curve
        double phi = detail::c_arc_heading(t);
        if (opt.demo_variation > 0.0) {
          const Eigen::Vector2d d = planar_template(t + 1e-4) - planar_template(t - 1e-4);
          phi = std::atan2(d(1), d(0));
        }
        Eigen::Matrix2d R;
        R << std::cos(phi), -std::sin(phi), std::sin(phi), std::cos(phi);
        const Eigen::Matrix2d Y = R * Eigen::Vector2d(2.0, 0.6).asDiagonal() * R.transpose();
        v_clean = manifolds::detail::spd_log(second_base.coords,
                                             manifolds::detail::flatten_square(Y), 2);
      }
      const manifolds::ManifoldPoint clean =
          manifolds::exp_map(second_base, VectorXd(v_clean + off_second));
      const manifolds::ManifoldPoint noisy =
          manifolds::exp_map(clean, VectorXd(opt.noise * rng.normal_vector(m2)));

      ds.points.row(row).segment(0, 2) = planar.transpose();
      ds.points.row(row).segment(2, second.ambient_dim()) = noisy.coords.transpose();
      ds.trajectory_ids[row] = k;
      ++row;
    }
  }
  ds.validate();
  return ds;
}

}  // namespace geolvm::synthetic
