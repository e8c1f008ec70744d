#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <vector>

#include <json.hpp>

#include "geolvm/errors.hpp"
#include "geolvm/manifolds.hpp"

namespace geolvm::kernels {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Squared-exponential kernel, parametrized in logs so optimization is
// unconstrained. k(x,y) = sigma2 * exp(-|x-y|^2 / (2 theta^2)).
struct SEKernel {
  double log_theta = 0.0;
  double log_sigma2 = 0.0;

  double theta() const { return std::exp(log_theta); }
  double sigma2() const { return std::exp(log_sigma2); }

  double operator()(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y) const {
    return sigma2() * std::exp(-(x - y).squaredNorm() / (2.0 * theta() * theta()));
  }
};

inline MatrixXd squared_distances(const MatrixXd& X, const MatrixXd& Z) {
  const VectorXd xn = X.rowwise().squaredNorm();
  const VectorXd zn = Z.rowwise().squaredNorm();
  MatrixXd D = -2.0 * X * Z.transpose();
  D.colwise() += xn;
  D.rowwise() += zn.transpose();
  return D.cwiseMax(0.0);
}

inline MatrixXd gram_cross(const SEKernel& k, const MatrixXd& X, const MatrixXd& Z) {
  require(X.cols() == Z.cols(), ErrorKind::Dimension, "kernel inputs have mismatched widths");
  const double t2 = 2.0 * k.theta() * k.theta();
  return k.sigma2() * (-squared_distances(X, Z) / t2).array().exp().matrix();
}

inline MatrixXd gram(const SEKernel& k, const MatrixXd& X) { return gram_cross(k, X, X); }

// Relative jitter, added in place before factorizations.
inline void add_jitter(MatrixXd& A, double rel = 1e-8) {
  const double mean_diag = A.trace() / static_cast<double>(A.rows());
  A.diagonal().array() += rel * mean_diag;
}

// Row n holds d k(x_n, x*) / d x*, i.e. k(x_n,x*) (x_n - x*) / theta^2.
inline MatrixXd grad_cross(const SEKernel& k, const MatrixXd& X, const Eigen::Ref<const VectorXd>& xstar) {
  require(X.cols() == xstar.size(), ErrorKind::Dimension, "query point has wrong dimension");
  const double t2 = k.theta() * k.theta();
  MatrixXd G(X.rows(), X.cols());
  for (Eigen::Index n = 0; n < X.rows(); ++n) {
    const VectorXd d = X.row(n).transpose() - xstar;
    G.row(n) = (k.sigma2() * std::exp(-d.squaredNorm() / (2.0 * t2)) / t2) * d.transpose();
  }
  return G;
}

// Cross second derivative at coincident inputs: (sigma2 / theta^2) I.
inline MatrixXd hess_self(const SEKernel& k, int q) {
  return (k.sigma2() / (k.theta() * k.theta())) * MatrixXd::Identity(q, q);
}

// Task covariance k^f = B B' + diag(exp(log_v)).
struct TaskCovariance {
  MatrixXd B;        // M x r
  VectorXd log_v;    // M

  MatrixXd matrix() const {
    MatrixXd kf = B * B.transpose();
    kf.diagonal() += log_v.array().exp().matrix();
    return kf;
  }
};

struct MultitaskKernel {
  SEKernel kx;
  TaskCovariance kf;
  double log_noise = std::log(1e-2);

  double noise() const { return std::exp(log_noise); }
};

inline MatrixXd kronecker(const MatrixXd& A, const MatrixXd& B) {
  MatrixXd K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

// Symbolic factors of k^f (x) K^x + noise I. The dense product is only for
// small oracles; assembling it above NM = 4000 is refused.
struct MultitaskBlocks {
  MatrixXd Kx;   // N x N (no noise, no jitter)
  MatrixXd kf;   // M x M
  double noise = 0.0;

  Eigen::Index joint_dim() const { return Kx.rows() * kf.rows(); }

  MatrixXd dense() const {
    require(joint_dim() <= 4000, ErrorKind::Validation,
            "memory guard: dense multitask covariance above NM = 4000");
    MatrixXd C = kronecker(kf, Kx);
    C.diagonal().array() += noise;
    return C;
  }
};

inline MultitaskBlocks multitask_blocks(const MultitaskKernel& k, const MatrixXd& X) {
  return {gram(k.kx, X), k.kf.matrix(), k.noise()};
}

// ---- data-space kernel for back constraints ----

struct BcComponentParams {
  double theta = 0.5;
  double sigma2 = 1.0;
  int n_max = 10;  // heat-series truncation on spheres
};

namespace detail {

inline double gegenbauer(int n, double alpha, double x) {
  if (n == 0) return 1.0;
  if (alpha == 0.0) {
    // circle limit: Chebyshev angular harmonics
    return std::cos(n * std::acos(std::clamp(x, -1.0, 1.0)));
  }
  double c0 = 1.0, c1 = 2.0 * alpha * x;
  if (n == 1) return c1;
  for (int k = 2; k <= n; ++k) {
    const double c2 = (2.0 * x * (k + alpha - 1.0) * c1 - (k + 2.0 * alpha - 2.0) * c0) / k;
    c0 = c1;
    c1 = c2;
  }
  return c1;
}

inline double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// dim of the degree-n spherical-harmonic space on S^m
inline double harmonic_count(int n, int m) {
  if (n == 0) return 1.0;
  return binom(n + m, m) - binom(n + m - 2, m);
}

// Truncated heat-kernel series on S^m, normalized to 1 at zero distance.
inline double sphere_heat(double cosd, int m, double theta, int n_max) {
  const double alpha = (m - 1) / 2.0;
  const double t = 0.5 * theta * theta;
  double s = 0.0, s0 = 0.0;
  for (int n = 0; n <= n_max; ++n) {
    const double w = std::exp(-t * n * (n + m - 1.0)) * harmonic_count(n, m);
    s += w * gegenbauer(n, alpha, cosd) / gegenbauer(n, alpha, 1.0);
    s0 += w;
  }
  return s / s0;
}

}  // namespace detail

// Data-space similarity on a (product) manifold: product over components of a
// per-component kernel. Euclidean parts use the SE form, spheres the truncated
// heat series, SPD parts an SE form in the affine-invariant distance.
inline double bc_kernel_eval(const manifolds::ManifoldSpec& spec,
                             const std::vector<BcComponentParams>& params,
                             const Eigen::Ref<const VectorXd>& a,
                             const Eigen::Ref<const VectorXd>& b) {
  const int n_comp = spec.kind == manifolds::Kind::Product ? static_cast<int>(spec.parts.size()) : 1;
  require(static_cast<int>(params.size()) == n_comp, ErrorKind::Config,
          "back-constraint kernel needs one parameter set per manifold component");
  double v = 1.0;
  int ci = 0;
  manifolds::detail::for_each_component(spec, [&](const manifolds::ManifoldSpec& p, int ao, int) {
    const BcComponentParams& bp = params[ci++];
    const auto ac = a.segment(ao, p.ambient_dim());
    const auto bc = b.segment(ao, p.ambient_dim());
    switch (p.kind) {
      case manifolds::Kind::Euclidean:
        v *= bp.sigma2 * std::exp(-(ac - bc).squaredNorm() / (2.0 * bp.theta * bp.theta));
        break;
      case manifolds::Kind::Sphere:
        v *= bp.sigma2 *
             detail::sphere_heat(std::clamp(ac.dot(bc), -1.0, 1.0), p.size, bp.theta, bp.n_max);
        break;
      case manifolds::Kind::Spd: {
        const double d = manifolds::detail::spd_distance(ac, bc, p.size);
        v *= bp.sigma2 * std::exp(-d * d / (2.0 * bp.theta * bp.theta));
        break;
      }
      case manifolds::Kind::Product:
        break;
    }
  });
  return v;
}

inline MatrixXd bc_gram(const manifolds::ManifoldSpec& spec,
                        const std::vector<BcComponentParams>& params, const MatrixXd& points) {
  const Eigen::Index n = points.rows();
  MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      K(i, j) = K(j, i) = bc_kernel_eval(spec, params, points.row(i), points.row(j));
    }
  }
  return K;
}

inline void to_json(nlohmann::json& j, const BcComponentParams& p) {
  j = {{"theta", p.theta}, {"sigma2", p.sigma2}, {"n_max", p.n_max}};
}

inline void from_json(const nlohmann::json& j, BcComponentParams& p) {
  p.theta = j.at("theta").get<double>();
  p.sigma2 = j.at("sigma2").get<double>();
  p.n_max = j.at("n_max").get<int>();
}

}  // namespace geolvm::kernels
