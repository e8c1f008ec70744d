#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <queue>
#include <unordered_map>
#include <vector>

#include "geolvm/errors.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/optim.hpp"
#include "geolvm/pullback.hpp"

namespace geolvm::geodesics {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using pullback::MetricFn;

// Midpoint-rule length of a polyline under a position-dependent metric.
inline double curve_length(const MetricFn& metric, const MatrixXd& points) {
  double len = 0.0;
  for (Eigen::Index i = 0; i + 1 < points.rows(); ++i) {
    const VectorXd d = (points.row(i + 1) - points.row(i)).transpose();
    const VectorXd mid = 0.5 * (points.row(i + 1) + points.row(i)).transpose();
    len += std::sqrt(std::max(0.0, d.dot(metric(mid) * d)));
  }
  return len;
}

// Discrete Dirichlet energy with uniform parameterization on [0, 1]. By the
// Cauchy-Schwarz inequality energy >= length^2 for any metric, with equality
// at constant speed.
inline double curve_energy(const MetricFn& metric, const MatrixXd& points) {
  const Eigen::Index segs = points.rows() - 1;
  double e = 0.0;
  for (Eigen::Index i = 0; i < segs; ++i) {
    const VectorXd d = (points.row(i + 1) - points.row(i)).transpose();
    const VectorXd mid = 0.5 * (points.row(i + 1) + points.row(i)).transpose();
    e += d.dot(metric(mid) * d);
  }
  return static_cast<double>(segs) * e;
}

struct GeodesicCurve {
  MatrixXd points;  // T x Q
  double length = 0.0;
  double energy = 0.0;
};

// Resample a polyline at `samples` parameters spaced uniformly in cumulative
// chord length. The endpoints are preserved exactly.
inline MatrixXd resample_curve(const MatrixXd& points, int samples) {
  require(points.rows() >= 1 && samples >= 2, ErrorKind::Validation,
          "resampling needs a nonempty polyline and at least two samples");
  const Eigen::Index n = points.rows();
  MatrixXd out(samples, points.cols());
  if (n == 1) {
    out.rowwise() = points.row(0);
    return out;
  }
  VectorXd cum(n);
  cum(0) = 0.0;
  for (Eigen::Index i = 1; i < n; ++i)
    cum(i) = cum(i - 1) + (points.row(i) - points.row(i - 1)).norm();
  const double total = cum(n - 1);
  Eigen::Index j = 0;
  for (int i = 0; i < samples; ++i) {
    const double s = total * i / (samples - 1);
    while (j + 2 < n && cum(j + 1) < s) ++j;
    const double seg = cum(j + 1) - cum(j);
    const double t = seg > 0.0 ? std::clamp((s - cum(j)) / seg, 0.0, 1.0) : 0.0;
    out.row(i) = (1.0 - t) * points.row(j) + t * points.row(j + 1);
  }
  out.row(0) = points.row(0);
  out.row(samples - 1) = points.row(n - 1);
  return out;
}

// Entrywise bilinear interpolation of a precomputed metric grid, clamped at
// the boundary. Convex combinations keep the interpolant positive
// semidefinite wherever the grid is.
inline MetricFn interpolate_metric(std::shared_ptr<const pullback::MetricGrid> grid) {
  return [grid](const VectorXd& x) -> MatrixXd {
    const pullback::Lattice& lat = grid->lattice;
    const double fx = (x(0) - lat.bounds.x0_min) / (lat.bounds.x0_max - lat.bounds.x0_min) *
                      (lat.res - 1);
    const double fy = (x(1) - lat.bounds.x1_min) / (lat.bounds.x1_max - lat.bounds.x1_min) *
                      (lat.res - 1);
    const double cx = std::clamp(fx, 0.0, static_cast<double>(lat.res - 1));
    const double cy = std::clamp(fy, 0.0, static_cast<double>(lat.res - 1));
    const int ix = std::min(static_cast<int>(cx), lat.res - 2);
    const int iy = std::min(static_cast<int>(cy), lat.res - 2);
    const double ax = cx - ix;
    const double ay = cy - iy;
    return (1.0 - ax) * (1.0 - ay) * grid->at(ix, iy) + ax * (1.0 - ay) * grid->at(ix + 1, iy) +
           (1.0 - ax) * ay * grid->at(ix, iy + 1) + ax * ay * grid->at(ix + 1, iy + 1);
  };
}

namespace detail {

inline int snap_to_lattice(const pullback::Lattice& lat, const VectorXd& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int ix = 0; ix < lat.res; ++ix)
    for (int iy = 0; iy < lat.res; ++iy) {
      const double d = (lat.node(ix, iy) - x).squaredNorm();
      const int idx = lat.index(ix, iy);
      if (d < best_d - 1e-18 || (std::abs(d - best_d) <= 1e-18 && idx < best)) {
        best_d = d;
        best = idx;
      }
    }
  return best;
}

}  // namespace detail

// Shortest lattice path under the metric: 8-connected grid, edge weights from
// the midpoint rule, deterministic tie-breaking by node index. The exact
// endpoints are attached to the snapped lattice path.
inline GeodesicCurve graph_geodesic(const MetricFn& metric, const pullback::Lattice& lat,
                                    const VectorXd& a, const VectorXd& b) {
  require(a.size() == 2 && b.size() == 2, ErrorKind::Dimension,
          "lattice geodesics expect a 2d latent space");
  const int n = lat.size();
  const int src = detail::snap_to_lattice(lat, a);
  const int dst = detail::snap_to_lattice(lat, b);

  std::unordered_map<long long, double> edge_cache;
  auto edge_weight = [&](int u, int v) {
    const long long key = static_cast<long long>(std::min(u, v)) * n + std::max(u, v);
    auto it = edge_cache.find(key);
    if (it != edge_cache.end()) return it->second;
    const VectorXd pu = lat.node(u / lat.res, u % lat.res);
    const VectorXd pv = lat.node(v / lat.res, v % lat.res);
    const VectorXd d = pv - pu;
    const VectorXd mid = 0.5 * (pu + pv);
    const double w = std::sqrt(std::max(0.0, d.dot(metric(mid) * d)));
    edge_cache.emplace(key, w);
    return w;
  };

  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<int> prev(n, -1);
  std::vector<char> done(n, 0);
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> pq;
  dist[src] = 0.0;
  pq.emplace(0.0, src);
  static constexpr int kDx[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static constexpr int kDy[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
  while (!pq.empty()) {
    const auto [d0, u] = pq.top();
    pq.pop();
    if (done[u]) continue;
    done[u] = 1;
    if (u == dst) break;
    const int ux = u / lat.res, uy = u % lat.res;
    for (int k = 0; k < 8; ++k) {
      const int vx = ux + kDx[k], vy = uy + kDy[k];
      if (vx < 0 || vx >= lat.res || vy < 0 || vy >= lat.res) continue;
      const int v = lat.index(vx, vy);
      if (done[v]) continue;
      const double nd = d0 + edge_weight(u, v);
      if (nd < dist[v]) {
        dist[v] = nd;
        prev[v] = u;
        pq.emplace(nd, v);
      }
    }
  }
  require(std::isfinite(dist[dst]), ErrorKind::Numerical, "lattice path search failed to reach target");

  std::vector<int> path;
  for (int u = dst; u != -1; u = prev[u]) path.push_back(u);
  std::reverse(path.begin(), path.end());

  std::vector<VectorXd> pts;
  const VectorXd first = lat.node(path.front() / lat.res, path.front() % lat.res);
  if ((a - first).squaredNorm() > 1e-24) pts.push_back(a);
  for (int u : path) pts.push_back(lat.node(u / lat.res, u % lat.res));
  const VectorXd last = pts.back();
  if ((b - last).squaredNorm() > 1e-24) pts.push_back(b);

  GeodesicCurve out;
  out.points.resize(static_cast<Eigen::Index>(pts.size()), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) out.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  out.length = curve_length(metric, out.points);
  out.energy = curve_energy(metric, out.points);
  return out;
}

namespace detail {

// Cardinal natural-cubic-spline basis on uniform knots 0..n_ctrl+1, pinned to
// zero at both boundary knots, sampled at t_i = i/(samples-1). Column k is
// the spline through the k-th unit control vector.
inline MatrixXd spline_basis(int n_ctrl, int samples) {
  const int kn = n_ctrl + 2;  // knots including pinned boundaries
  MatrixXd S(samples, n_ctrl);
  for (int c = 0; c < n_ctrl; ++c) {
    VectorXd y = VectorXd::Zero(kn);
    y(c + 1) = 1.0;
    // natural spline moments: tridiagonal [1 4 1] system on interior knots
    const double h = 1.0 / (kn - 1);
    const int ni = kn - 2;
    VectorXd rhs(ni), diag(VectorXd::Constant(ni, 4.0)), m(VectorXd::Zero(kn));
    for (int i = 0; i < ni; ++i) rhs(i) = 6.0 / (h * h) * (y(i) - 2.0 * y(i + 1) + y(i + 2));
    for (int i = 1; i < ni; ++i) {  // Thomas elimination, unit off-diagonals
      const double w = 1.0 / diag(i - 1);
      diag(i) -= w;
      rhs(i) -= w * rhs(i - 1);
    }
    if (ni > 0) {
      m(ni) = rhs(ni - 1) / diag(ni - 1);
      for (int i = ni - 2; i >= 0; --i) m(i + 1) = (rhs(i) - m(i + 2)) / diag(i);
    }
    for (int i = 0; i < samples; ++i) {
      const double t = static_cast<double>(i) / (samples - 1);
      int seg = std::min(static_cast<int>(t / h), kn - 2);
      const double t0 = seg * h, t1 = (seg + 1) * h;
      const double u0 = (t1 - t) / h, u1 = (t - t0) / h;
      S(i, c) = u0 * y(seg) + u1 * y(seg + 1) +
                ((u0 * u0 * u0 - u0) * m(seg) + (u1 * u1 * u1 - u1) * m(seg + 1)) * h * h / 6.0;
    }
  }
  return S;
}

}  // namespace detail

struct SplineOptions {
  int control_points = 8;
  int samples = 100;
  int iterations = 500;
  double learning_rate = 0.05;
  double fd_step = 1e-4;  // spatial step for metric derivatives
};

// Energy-minimizing curve in a spline family with fixed endpoints: the curve
// is a straight line plus spline offsets, optimized by gradient descent on
// the discrete energy. When an initial polyline is given the control points
// start at its least-squares projection into the spline family; otherwise
// they start at zero (the straight line). The best iterate by energy is
// returned, so the result never falls behind the initialization's fit.
inline GeodesicCurve spline_geodesic(const MetricFn& metric, const VectorXd& a, const VectorXd& b,
                                     const SplineOptions& opts = {},
                                     const MatrixXd& init = MatrixXd()) {
  require(a.size() == b.size(), ErrorKind::Dimension, "endpoint dimensions differ");
  const int q = static_cast<int>(a.size());
  const int T = opts.samples;
  require(T >= 3 && opts.control_points >= 1, ErrorKind::Config, "spline needs samples >= 3 and controls >= 1");
  const MatrixXd S = detail::spline_basis(opts.control_points, T);

  MatrixXd line(T, q);
  for (int i = 0; i < T; ++i) {
    const double t = static_cast<double>(i) / (T - 1);
    line.row(i) = ((1.0 - t) * a + t * b).transpose();
  }

  MatrixXd C = MatrixXd::Zero(opts.control_points, q);
  if (init.rows() > 0) {
    require(init.cols() == q, ErrorKind::Dimension, "initial polyline dimension mismatch");
    C = S.colPivHouseholderQr().solve(resample_curve(init, T) - line);
  }
  auto points_of = [&](const MatrixXd& ctrl) -> MatrixXd { return line + S * ctrl; };

  auto energy_grad = [&](const MatrixXd& pts, MatrixXd& dP) {
    const int segs = T - 1;
    dP.setZero(T, q);
    double e = 0.0;
    for (int i = 0; i < segs; ++i) {
      const VectorXd d = (pts.row(i + 1) - pts.row(i)).transpose();
      const VectorXd mid = 0.5 * (pts.row(i + 1) + pts.row(i)).transpose();
      const MatrixXd G = metric(mid);
      e += d.dot(G * d);
      const VectorXd Gd2 = 2.0 * (G * d);
      dP.row(i + 1) += Gd2.transpose();
      dP.row(i) -= Gd2.transpose();
      VectorXd dmid(q);
      for (int c = 0; c < q; ++c) {
        VectorXd mp = mid, mm = mid;
        mp(c) += opts.fd_step;
        mm(c) -= opts.fd_step;
        dmid(c) = d.dot((metric(mp) - metric(mm)) * d) / (2.0 * opts.fd_step);
      }
      dP.row(i + 1) += 0.5 * dmid.transpose();
      dP.row(i) += 0.5 * dmid.transpose();
    }
    dP *= static_cast<double>(segs);
    return static_cast<double>(segs) * e;
  };

  Adam opt(opts.control_points * q, opts.learning_rate);
  MatrixXd best_C = C;
  double best_e = std::numeric_limits<double>::infinity();
  MatrixXd dP;
  for (int it = 0; it < opts.iterations; ++it) {
    const MatrixXd pts = points_of(C);
    const double e = energy_grad(pts, dP);
    if (e < best_e) {
      best_e = e;
      best_C = C;
    }
    const MatrixXd dC = S.transpose() * dP;
    VectorXd flat_c = Eigen::Map<const VectorXd>(C.data(), C.size());
    const VectorXd flat_g = Eigen::Map<const VectorXd>(dC.data(), dC.size());
    opt.step(flat_c, flat_g);
    C = Eigen::Map<const MatrixXd>(flat_c.data(), C.rows(), C.cols());
  }
  {
    const MatrixXd pts = points_of(C);
    const double e = curve_energy(metric, pts);
    if (e < best_e) {
      best_e = e;
      best_C = C;
    }
  }

  GeodesicCurve out;
  out.points = points_of(best_C);
  out.length = curve_length(metric, out.points);
  out.energy = best_e;
  return out;
}

// Two-stage geodesic: lattice shortest path for a global route, then spline
// smoothing against the continuous metric for sub-lattice accuracy.
inline GeodesicCurve refined_geodesic(const MetricFn& metric, const pullback::Lattice& lat,
                                      const VectorXd& a, const VectorXd& b,
                                      const SplineOptions& opts = {}) {
  const GeodesicCurve coarse = graph_geodesic(metric, lat, a, b);
  return spline_geodesic(metric, a, b, opts, coarse.points);
}

// Decode a latent polyline through the model into ambient coordinates.
inline MatrixXd decode_curve(const lvm::LatentModel& model, const MatrixXd& latent_points) {
  MatrixXd out(latent_points.rows(), model.spec.ambient_dim());
  for (Eigen::Index i = 0; i < latent_points.rows(); ++i)
    out.row(i) = lvm::decode(model, latent_points.row(i).transpose()).coords.transpose();
  return out;
}

}  // namespace geolvm::geodesics
