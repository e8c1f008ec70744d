#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>

#include "geolvm/errors.hpp"
#include "geolvm/io.hpp"
#include "geolvm/kernels.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/manifolds.hpp"

namespace geolvm::pullback {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class JacobianMode { Analytic, FiniteDifference };

namespace detail {

using manifolds::detail::coeffs_from_sym;
using manifolds::detail::sym_from_coeffs;

// d Exp_p(v) for the unit sphere, columns/rows in the coefficient charts at p
// and at y = Exp_p(v).
inline MatrixXd sphere_exp_jacobian(const VectorXd& p, const VectorXd& v_coeffs,
                                    const MatrixXd& Bp, const MatrixXd& By) {
  const VectorXd v = Bp * v_coeffs;
  const double r = v.norm();
  const Eigen::Index d = p.size();
  MatrixXd J_amb;
  if (r < 1e-12) {
    J_amb = MatrixXd::Identity(d, d) - p * p.transpose();
  } else {
    const VectorXd u = v / r;
    const double sinc = std::sin(r) / r;
    J_amb = -std::sin(r) * p * u.transpose() + std::cos(r) * u * u.transpose() +
            sinc * (MatrixXd::Identity(d, d) - u * u.transpose());
  }
  return By.transpose() * J_amb * Bp;
}

// d Exp_X(V) for the affine-invariant geometry: with S = X^-1/2 V X^-1/2 =
// P diag(s) P', the derivative of exp at S acts entrywise through divided
// differences of e^s in the eigenbasis.
inline MatrixXd spd_exp_jacobian(const MatrixXd& X, const VectorXd& v_coeffs) {
  const int d = static_cast<int>(X.rows());
  const int m = d * (d + 1) / 2;
  const MatrixXd Xh = manifolds::detail::spd_sqrt(X);
  const MatrixXd Xhi = manifolds::detail::spd_inv_sqrt(X);
  const MatrixXd S = Xhi * sym_from_coeffs(v_coeffs, d) * Xhi;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (S + S.transpose()));
  require(es.info() == Eigen::Success, ErrorKind::Numerical, "spd jacobian eigendecomposition failed");
  const VectorXd s = es.eigenvalues();
  const MatrixXd& P = es.eigenvectors();
  MatrixXd gamma(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const double ds = s(i) - s(j);
      gamma(i, j) = std::abs(ds) < 1e-12 ? std::exp(0.5 * (s(i) + s(j)))
                                         : (std::exp(s(i)) - std::exp(s(j))) / ds;
    }
  MatrixXd J(m, m);
  for (int k = 0; k < m; ++k) {
    VectorXd ek = VectorXd::Zero(m);
    ek(k) = 1.0;
    const MatrixXd H = Xhi * sym_from_coeffs(ek, d) * Xhi;
    const MatrixXd dExp = P * (gamma.cwiseProduct(P.transpose() * H * P)) * P.transpose();
    J.col(k) = coeffs_from_sym(Xh * dExp * Xh);
  }
  return J;
}

}  // namespace detail

// Differential of the exponential map in coefficient charts: input chart at
// the basepoint, output chart at the decoded point Exp_b(v).
inline MatrixXd exp_jacobian(const manifolds::ManifoldPoint& b,
                             const Eigen::Ref<const VectorXd>& v,
                             JacobianMode mode = JacobianMode::Analytic) {
  const int m = b.spec.tangent_dim();
  require(v.size() == m, ErrorKind::Dimension, "tangent vector has wrong dimension");
  const manifolds::ManifoldPoint y = manifolds::exp_map(b, v);

  if (mode == JacobianMode::FiniteDifference) {
    const double h = 1e-6;
    const manifolds::TangentBasis By = manifolds::tangent_basis(y);
    MatrixXd J(m, m);
    for (int k = 0; k < m; ++k) {
      VectorXd vp = v, vm = v;
      vp(k) += h;
      vm(k) -= h;
      const VectorXd dy =
          (manifolds::exp_map(b, vp).coords - manifolds::exp_map(b, vm).coords) / (2.0 * h);
      J.col(k) = By.columns.transpose() * dy;
    }
    return J;
  }

  MatrixXd J = MatrixXd::Zero(m, m);
  manifolds::detail::for_each_component(
      b.spec, [&](const manifolds::ManifoldSpec& part, int amb_off, int tan_off) {
        const int mk = part.tangent_dim();
        const VectorXd pc = b.coords.segment(amb_off, part.ambient_dim());
        const VectorXd vc = v.segment(tan_off, mk);
        if (part.kind == manifolds::Kind::Euclidean) {
          J.block(tan_off, tan_off, mk, mk).setIdentity();
        } else if (part.kind == manifolds::Kind::Sphere) {
          const VectorXd yc = y.coords.segment(amb_off, part.ambient_dim());
          J.block(tan_off, tan_off, mk, mk) = detail::sphere_exp_jacobian(
              pc, vc, manifolds::detail::sphere_basis(pc), manifolds::detail::sphere_basis(yc));
        } else {
          J.block(tan_off, tan_off, mk, mk) =
              detail::spd_exp_jacobian(manifolds::detail::as_square(pc, part.size), vc);
        }
      });
  return J;
}

// Riemannian metric of the data manifold at y, expressed in the coefficient
// chart of tangent_basis(y). Orthonormal bases give the identity; the
// affine-invariant metric on symmetric-matrix coefficients is computed
// explicitly.
inline MatrixXd ambient_metric(const manifolds::ManifoldPoint& y) {
  const int m = y.spec.tangent_dim();
  MatrixXd G = MatrixXd::Identity(m, m);
  manifolds::detail::for_each_component(
      y.spec, [&](const manifolds::ManifoldSpec& part, int amb_off, int tan_off) {
        if (part.kind != manifolds::Kind::Spd) return;
        const int mk = part.tangent_dim();
        const int d = part.size;
        const MatrixXd Y =
            manifolds::detail::as_square(y.coords.segment(amb_off, part.ambient_dim()), d);
        const MatrixXd Yi = Y.llt().solve(MatrixXd::Identity(d, d));
        for (int a = 0; a < mk; ++a) {
          VectorXd ea = VectorXd::Zero(mk);
          ea(a) = 1.0;
          const MatrixXd YiEa = Yi * detail::sym_from_coeffs(ea, d);
          for (int c = a; c < mk; ++c) {
            VectorXd ec = VectorXd::Zero(mk);
            ec(c) = 1.0;
            const double val = (YiEa * Yi * detail::sym_from_coeffs(ec, d)).trace();
            G(tan_off + a, tan_off + c) = val;
            G(tan_off + c, tan_off + a) = val;
          }
        }
      });
  return G;
}

// Pullback of the ambient metric at Exp_b(v) to the tangent space at b.
inline MatrixXd tangent_metric(const manifolds::ManifoldPoint& b,
                               const Eigen::Ref<const VectorXd>& v,
                               JacobianMode mode = JacobianMode::Analytic) {
  const MatrixXd J = exp_jacobian(b, v, mode);
  const MatrixXd G = ambient_metric(manifolds::exp_map(b, v));
  return J.transpose() * G * J;
}

// Posterior of the GP Jacobian at a latent point: matrix-normal with mean
// M x Q, among-task covariance kf, and among-direction covariance from the
// SE kernel derivatives.
struct JacobianPosterior {
  MatrixXd mean;       // M x Q, rows are gradients of the tangent coordinates
  MatrixXd task_cov;   // M x M
  MatrixXd input_cov;  // Q x Q
};

inline JacobianPosterior jacobian_posterior(const lvm::LatentModel& model,
                                            const Eigen::Ref<const VectorXd>& xstar) {
  require(xstar.size() == model.latent_dim, ErrorKind::Dimension, "query has wrong latent dimension");
  const auto& cache = lvm::ensure_cache(model);
  const MatrixXd dK = kernels::grad_cross(model.kernel.kx, model.X, xstar);  // N x Q
  JacobianPosterior jp;
  jp.mean = cache.alpha.transpose() * dK;
  jp.task_cov = model.kernel.kf.matrix();
  MatrixXd ic = kernels::hess_self(model.kernel.kx, model.latent_dim) -
                dK.transpose() * cache.llt.solve(dK);
  jp.input_cov = 0.5 * (ic + ic.transpose());
  return jp;
}

// One draw J ~ MN(mean, task_cov, input_cov); covariance roots use clamped
// eigendecompositions since input_cov can be numerically singular.
inline MatrixXd sample_jacobian(const JacobianPosterior& jp, Rng& rng) {
  auto sqrt_psd = [](const MatrixXd& A) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(A);
    require(es.info() == Eigen::Success, ErrorKind::Numerical, "covariance eigendecomposition failed");
    return MatrixXd(es.eigenvectors() *
                    es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                    es.eigenvectors().transpose());
  };
  const MatrixXd Lu = sqrt_psd(jp.task_cov);
  const MatrixXd Lv = sqrt_psd(jp.input_cov);
  const MatrixXd Z = rng.normal_matrix(static_cast<int>(jp.mean.rows()),
                                       static_cast<int>(jp.mean.cols()));
  return jp.mean + Lu * Z * Lv;
}

inline MatrixXd floor_eigenvalues(const MatrixXd& G) {
  MatrixXd S = 0.5 * (G + G.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
  require(es.info() == Eigen::Success, ErrorKind::Numerical, "metric eigendecomposition failed");
  const double scale = std::max(S.trace() / static_cast<double>(S.rows()), 1e-12);
  const double floor = 1e-10 * scale;
  return es.eigenvectors() * es.eigenvalues().cwiseMax(floor).asDiagonal() *
         es.eigenvectors().transpose();
}

// Expected pullback metric at a latent point:
//   E[G] = E[J]' Gv E[J] + tr(Gv kf) * input_cov
// where Gv is the pullback of the ambient metric through Exp at the predicted
// tangent vector. Symmetrized and eigenvalue-floored so downstream solvers
// always see a positive-definite matrix.
inline MatrixXd expected_pullback(const lvm::LatentModel& model,
                                  const Eigen::Ref<const VectorXd>& xstar,
                                  JacobianMode mode = JacobianMode::Analytic) {
  const lvm::Posterior post = lvm::predict(model, xstar);
  const MatrixXd Gv = tangent_metric(model.basepoint, post.mean, mode);
  const JacobianPosterior jp = jacobian_posterior(model, xstar);
  const MatrixXd G = jp.mean.transpose() * Gv * jp.mean +
                     Gv.cwiseProduct(jp.task_cov).sum() * jp.input_cov;
  return floor_eigenvalues(G);
}

inline double magnification(const MatrixXd& G) {
  const double det = G.determinant();
  return std::sqrt(std::max(det, 0.0));
}

// Density-scaled conformal metric: G(x) = (p(x) + eps)^(-2/Q) I with p a
// fixed-bandwidth Gaussian kernel density over the latent training points.
struct KdeMetric {
  MatrixXd X;  // N x Q
  double sigma = 0.25;
  double eps = 0.0;

  KdeMetric() = default;
  // The floor is a tiny fraction of the peak training-point density: it keeps
  // the conformal factor finite in empty regions while leaving the density
  // landscape untouched wherever any kernel mass reaches.
  KdeMetric(MatrixXd latents, double bandwidth) : X(std::move(latents)), sigma(bandwidth) {
    require(sigma > 0.0, ErrorKind::Config, "kde bandwidth must be positive");
    require(X.rows() > 0, ErrorKind::Validation, "kde metric needs at least one point");
    double pmax = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      pmax = std::max(pmax, density(X.row(i).transpose()));
    eps = 1e-12 * pmax;
  }

  double density(const Eigen::Ref<const VectorXd>& x) const {
    const double q = static_cast<double>(X.cols());
    const double norm = std::pow(2.0 * std::numbers::pi * sigma * sigma, -0.5 * q);
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double d2 = (X.row(i).transpose() - x).squaredNorm();
      s += std::exp(-d2 / (2.0 * sigma * sigma));
    }
    return norm * s;
  }

  MatrixXd operator()(const Eigen::Ref<const VectorXd>& x) const {
    require(x.size() == X.cols(), ErrorKind::Dimension, "query has wrong latent dimension");
    const double q = static_cast<double>(X.cols());
    const double lam = std::pow(density(x) + eps, -2.0 / q);
    return lam * MatrixXd::Identity(X.cols(), X.cols());
  }
};

using MetricFn = std::function<MatrixXd(const VectorXd&)>;

inline MetricFn pullback_metric_fn(std::shared_ptr<const lvm::LatentModel> model,
                                   JacobianMode mode = JacobianMode::Analytic) {
  return [model, mode](const VectorXd& x) { return expected_pullback(*model, x, mode); };
}

inline MetricFn kde_metric_fn(KdeMetric metric) {
  return [metric = std::move(metric)](const VectorXd& x) { return metric(x); };
}

inline MetricFn identity_metric_fn(int q) {
  return [q](const VectorXd&) { return MatrixXd::Identity(q, q); };
}

// ---- regular 2d evaluation lattice ----

struct Bounds2 {
  double x0_min = -1.0, x0_max = 1.0;
  double x1_min = -1.0, x1_max = 1.0;
};

inline void to_json(nlohmann::json& j, const Bounds2& b) {
  j = nlohmann::json{{"x0_min", b.x0_min}, {"x0_max", b.x0_max},
                     {"x1_min", b.x1_min}, {"x1_max", b.x1_max}};
}

inline void from_json(const nlohmann::json& j, Bounds2& b) {
  b.x0_min = j.at("x0_min").get<double>();
  b.x0_max = j.at("x0_max").get<double>();
  b.x1_min = j.at("x1_min").get<double>();
  b.x1_max = j.at("x1_max").get<double>();
}

struct Lattice {
  Bounds2 bounds;
  int res = 32;

  Lattice() = default;
  Lattice(Bounds2 b, int r) : bounds(b), res(r) {
    require(res >= 2, ErrorKind::Config, "lattice resolution must be at least 2");
    require(bounds.x0_max > bounds.x0_min && bounds.x1_max > bounds.x1_min, ErrorKind::Config,
            "lattice bounds must have positive extent");
  }

  double x0(int ix) const {
    return bounds.x0_min + (bounds.x0_max - bounds.x0_min) * ix / (res - 1);
  }
  double x1(int iy) const {
    return bounds.x1_min + (bounds.x1_max - bounds.x1_min) * iy / (res - 1);
  }
  VectorXd node(int ix, int iy) const {
    VectorXd x(2);
    x << x0(ix), x1(iy);
    return x;
  }
  int index(int ix, int iy) const { return ix * res + iy; }
  int size() const { return res * res; }
};

struct MetricGrid {
  Lattice lattice;
  std::vector<MatrixXd> G;  // lattice.size() entries, 2 x 2

  const MatrixXd& at(int ix, int iy) const { return G[lattice.index(ix, iy)]; }
};

inline MetricGrid compute_metric_grid(const MetricFn& metric, const Lattice& lattice) {
  MetricGrid grid;
  grid.lattice = lattice;
  grid.G.resize(lattice.size());
  for (int ix = 0; ix < lattice.res; ++ix)
    for (int iy = 0; iy < lattice.res; ++iy) {
      MatrixXd g = metric(lattice.node(ix, iy));
      require(g.rows() == 2 && g.cols() == 2, ErrorKind::Dimension,
              "metric grid expects a 2d latent space");
      grid.G[lattice.index(ix, iy)] = std::move(g);
    }
  return grid;
}

inline std::string metric_grid_csv(const MetricGrid& grid) {
  io::CsvWriter w({"ix", "iy", "x0", "x1", "g00", "g01", "g10", "g11", "magnification"});
  const Lattice& lat = grid.lattice;
  for (int ix = 0; ix < lat.res; ++ix)
    for (int iy = 0; iy < lat.res; ++iy) {
      const MatrixXd& g = grid.at(ix, iy);
      w.row({static_cast<double>(ix), static_cast<double>(iy), lat.x0(ix), lat.x1(iy),
             g(0, 0), g(0, 1), g(1, 0), g(1, 1), magnification(g)});
    }
  return w.str();
}

}  // namespace geolvm::pullback
