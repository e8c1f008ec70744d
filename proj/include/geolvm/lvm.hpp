#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geolvm/errors.hpp"
#include "geolvm/io.hpp"
#include "geolvm/kernels.hpp"
#include "geolvm/manifolds.hpp"
#include "geolvm/optim.hpp"
#include "geolvm/rng.hpp"

namespace geolvm::lvm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLog2Pi = 1.8378770664093454836;

// (start, length) runs of equal trajectory id
inline std::vector<std::pair<int, int>> trajectory_runs(const std::vector<int>& ids) {
  std::vector<std::pair<int, int>> runs;
  int start = 0;
  for (int i = 1; i <= static_cast<int>(ids.size()); ++i) {
    if (i == static_cast<int>(ids.size()) || ids[i] != ids[start]) {
      runs.emplace_back(start, i - start);
      start = i;
    }
  }
  return runs;
}

struct Dataset {
  manifolds::ManifoldSpec spec;
  MatrixXd points;                 // N x ambient_dim
  std::vector<int> trajectory_ids; // size N, contiguous runs

  Eigen::Index n() const { return points.rows(); }

  void validate() const {
    require(points.cols() == spec.ambient_dim(), ErrorKind::Dimension,
            "dataset points have wrong ambient dimension");
    require(static_cast<Eigen::Index>(trajectory_ids.size()) == points.rows(), ErrorKind::Validation,
            "dataset needs one trajectory id per point");
    std::vector<int> seen;
    for (const auto& [start, len] : trajectory_runs(trajectory_ids)) {
      const int id = trajectory_ids[start];
      require(std::find(seen.begin(), seen.end(), id) == seen.end(), ErrorKind::Validation,
              "trajectory ids must form contiguous runs");
      seen.push_back(id);
    }
    for (Eigen::Index i = 0; i < points.rows(); ++i)
      manifolds::validate_point(spec, points.row(i).transpose());
  }

  std::vector<std::pair<int, int>> trajectories() const { return trajectory_runs(trajectory_ids); }
};

struct ModelConfig {
  int latent_dim = 2;
  int iterations = 1000;
  double learning_rate = 0.025;
  std::uint64_t seed = 0;
  bool gpdm = false;
  bool gamma_lengthscale = false;
  bool back_constraints = false;
  int task_rank = -1;                    // -1: full rank (tangent dim)
  double init_noise = 1e-2;              // initial noise variance
  std::vector<double> per_task_noise;    // empty: shared, trainable
  std::vector<kernels::BcComponentParams> bc_params;  // empty: per-component defaults
};

struct GpdmParams {
  double log_theta = 0.0;
  double log_sigma2 = 0.0;
};

struct LatentModel {
  manifolds::ManifoldSpec spec;
  int latent_dim = 2;
  MatrixXd X;   // N x Q (derived from W when back-constrained)
  MatrixXd W;   // Q x N, back-constrained models only (otherwise 0 x 0)
  kernels::MultitaskKernel kernel;
  manifolds::ManifoldPoint basepoint;
  VectorXd tangent_mean;                 // M
  std::optional<GpdmParams> gpdm;
  ModelConfig config;
  std::vector<double> objective_trace;
  std::vector<std::string> warnings;

  // training data; a GP posterior is data plus hyperparameters
  MatrixXd points;                 // N x ambient
  std::vector<int> trajectory_ids;
  MatrixXd V;                      // N x M centered tangent targets
  double cov_correction = 0.0;     // sum of per-point log-volume terms (raw targets)
  MatrixXd bc_kernel_matrix;       // N x N, back-constrained models only

  Eigen::Index n() const { return X.rows(); }
  int tangent_dim() const { return spec.tangent_dim(); }

  // effective noise variance folded into the latent-space Gram for prediction
  double fold_noise() const {
    if (!config.per_task_noise.empty()) {
      double s = 0.0;
      for (double v : config.per_task_noise) s += v;
      return s / static_cast<double>(config.per_task_noise.size());
    }
    return kernel.noise();
  }

  VectorXd noise_vector() const {
    const int m = tangent_dim();
    if (!config.per_task_noise.empty()) {
      require(static_cast<int>(config.per_task_noise.size()) == m, ErrorKind::Config,
              "per-task noise vector has wrong length");
      VectorXd d(m);
      for (int i = 0; i < m; ++i) d(i) = config.per_task_noise[i];
      return d;
    }
    return VectorXd::Constant(m, kernel.noise());
  }

  struct Cache {
    std::uint64_t fingerprint = 0;
    Eigen::LLT<MatrixXd> llt;  // of K^x + (jitter + noise) I
    MatrixXd alpha;            // solve(V)
  };
  mutable std::shared_ptr<Cache> cache_;
};

// X = K_M W'; recomputed from scratch so latents stay a pure function of the
// weights and the data kernel.
inline MatrixXd apply_back_constraints(const MatrixXd& bc_kernel_matrix, const MatrixXd& W) {
  require(bc_kernel_matrix.cols() == W.cols(), ErrorKind::Dimension,
          "back-constraint weight width must match data size");
  return bc_kernel_matrix * W.transpose();
}

inline std::vector<kernels::BcComponentParams> default_bc_params(const manifolds::ManifoldSpec& spec) {
  std::vector<kernels::BcComponentParams> out;
  manifolds::detail::for_each_component(spec, [&](const manifolds::ManifoldSpec& p, int, int) {
    kernels::BcComponentParams bp;
    bp.theta = p.kind == manifolds::Kind::Euclidean ? 0.2 : 0.5;
    out.push_back(bp);
  });
  return out;
}

// Raw (uncentered) tangent targets: rows are log_map(basepoint, y_i).
inline MatrixXd tangent_targets(const manifolds::ManifoldPoint& basepoint, const MatrixXd& points) {
  const int m = basepoint.spec.tangent_dim();
  MatrixXd V(points.rows(), m);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const manifolds::ManifoldPoint y{basepoint.spec, points.row(i).transpose()};
    V.row(i) = manifolds::log_map(basepoint, y).coeffs.transpose();
  }
  return V;
}

// Principal-component initialization of the latents from centered tangent
// targets; columns scaled to unit variance, signs fixed deterministically.
inline MatrixXd init_pca(const MatrixXd& V_centered, int q) {
  const Eigen::Index n = V_centered.rows();
  require(q >= 1 && q <= V_centered.cols(), ErrorKind::Config,
          "latent dimension must be in [1, tangent_dim]");
  require(n >= 2, ErrorKind::Validation, "pca initialization needs at least two points");
  Eigen::JacobiSVD<MatrixXd> svd(V_centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd s = svd.singularValues();
  require(s.size() >= q && s(q - 1) > 1e-12 * std::max(1.0, s(0)), ErrorKind::Validation,
          "data is degenerate: fewer than latent_dim principal components");
  MatrixXd X0 = svd.matrixU().leftCols(q) * s.head(q).asDiagonal();
  for (int c = 0; c < q; ++c) {
    Eigen::Index imax;
    X0.col(c).cwiseAbs().maxCoeff(&imax);
    if (X0(imax, c) < 0.0) X0.col(c) = -X0.col(c);
    const double sd = std::sqrt(X0.col(c).squaredNorm() / static_cast<double>(n));
    require(sd > 0.0, ErrorKind::Validation, "degenerate principal component");
    X0.col(c) /= sd;
  }
  return X0;
}

// ---- Gaussian part of the likelihood via joint diagonalization ----
//
// Sigma = kf (x) Kx + D (x) I_N with D = diag(noise). The generalized
// eigenproblem kf p = lambda D p yields P with P' D P = I and P' kf P =
// diag(lam_f), so Sigma = (P^-T (x) Ux) (lam_f (x) lam_x + I) (P^-1 (x) Ux').
// Everything below works on N x M arrays; no NM x NM matrix is formed.
struct KronLik {
  double value = 0.0;
  MatrixXd A;       // unvec(Sigma^-1 vec V), N x M
  MatrixXd G_Kx;    // d value / d Kx
  MatrixXd G_kf;    // d value / d kf
  VectorXd g_noise; // d value / d noise_m
};

inline KronLik kron_loglik(const MatrixXd& Kx, const MatrixXd& kf, const VectorXd& noise,
                           const MatrixXd& V, bool want_grads) {
  const Eigen::Index n = Kx.rows();
  const Eigen::Index m = kf.rows();
  require(V.rows() == n && V.cols() == m, ErrorKind::Dimension, "targets have wrong shape");
  require(noise.size() == m && noise.minCoeff() > 0.0, ErrorKind::Validation,
          "noise variances must be positive");

  Eigen::SelfAdjointEigenSolver<MatrixXd> esx(Kx);
  require(esx.info() == Eigen::Success, ErrorKind::Numerical, "latent Gram eigendecomposition failed");
  const MatrixXd& Ux = esx.eigenvectors();
  const VectorXd lam_x = esx.eigenvalues();

  Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> esf(kf, MatrixXd(noise.asDiagonal()),
                                                         Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  require(esf.info() == Eigen::Success, ErrorKind::Numerical, "task covariance eigendecomposition failed");
  const MatrixXd& P = esf.eigenvectors();  // P' D P = I
  const VectorXd lam_f = esf.eigenvalues();

  MatrixXd dmat(n, m);
  for (Eigen::Index j = 0; j < m; ++j) dmat.col(j) = (lam_f(j) * lam_x).array() + 1.0;
  require(dmat.minCoeff() > 0.0, ErrorKind::Numerical, "multitask covariance is not positive definite");

  const MatrixXd Vt = Ux.transpose() * V * P;
  const MatrixXd Vd = Vt.cwiseQuotient(dmat);

  KronLik out;
  const double logdet = static_cast<double>(n) * noise.array().log().sum() +
                        dmat.array().log().sum();
  const double quad = Vt.cwiseProduct(Vd).sum();
  out.value = -0.5 * (static_cast<double>(n * m) * kLog2Pi + logdet + quad);
  out.A = Ux * Vd * P.transpose();

  if (want_grads) {
    const VectorXd inv_d_rowsum_f = dmat.cwiseInverse() * lam_f;           // w_x(n)
    const VectorXd inv_d_colsum_x = dmat.cwiseInverse().transpose() * lam_x;  // w_f(m)
    out.G_Kx = 0.5 * (out.A * kf * out.A.transpose() -
                      Ux * inv_d_rowsum_f.asDiagonal() * Ux.transpose());
    out.G_kf = 0.5 * (out.A.transpose() * Kx * out.A -
                      P * inv_d_colsum_x.asDiagonal() * P.transpose());
    const VectorXd s = dmat.cwiseInverse().colwise().sum().transpose();   // s_k
    out.g_noise = VectorXd(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      double tr = 0.0;
      for (Eigen::Index k = 0; k < m; ++k) tr += P(j, k) * P(j, k) * s(k);
      out.g_noise(j) = 0.5 * (out.A.col(j).squaredNorm() - tr);
    }
  }
  return out;
}

// ---- parameter packing ----

struct ParamLayout {
  Eigen::Index n = 0;
  int q = 0, m = 0, r = 0;
  bool bc = false, gpdm = false, per_task_noise = false;

  Eigen::Index latent_count() const { return n * q; }
  Eigen::Index total() const {
    return latent_count() + 2 + static_cast<Eigen::Index>(m) * r + m + 1 + (gpdm ? 2 : 0);
  }
};

inline ParamLayout layout_of(const LatentModel& model) {
  ParamLayout l;
  l.n = model.n();
  l.q = model.latent_dim;
  l.m = model.tangent_dim();
  l.r = static_cast<int>(model.kernel.kf.B.cols());
  l.bc = model.config.back_constraints;
  l.gpdm = model.gpdm.has_value();
  l.per_task_noise = !model.config.per_task_noise.empty();
  return l;
}

inline VectorXd pack_params(const LatentModel& model) {
  const ParamLayout l = layout_of(model);
  VectorXd p(l.total());
  Eigen::Index o = 0;
  if (l.bc) {
    p.segment(o, l.latent_count()) = Eigen::Map<const VectorXd>(model.W.data(), l.latent_count());
  } else {
    p.segment(o, l.latent_count()) = Eigen::Map<const VectorXd>(model.X.data(), l.latent_count());
  }
  o += l.latent_count();
  p(o++) = model.kernel.kx.log_theta;
  p(o++) = model.kernel.kx.log_sigma2;
  p.segment(o, static_cast<Eigen::Index>(l.m) * l.r) =
      Eigen::Map<const VectorXd>(model.kernel.kf.B.data(), static_cast<Eigen::Index>(l.m) * l.r);
  o += static_cast<Eigen::Index>(l.m) * l.r;
  p.segment(o, l.m) = model.kernel.kf.log_v;
  o += l.m;
  p(o++) = model.kernel.log_noise;
  if (l.gpdm) {
    p(o++) = model.gpdm->log_theta;
    p(o++) = model.gpdm->log_sigma2;
  }
  return p;
}

inline void unpack_params(const VectorXd& p, LatentModel& model) {
  const ParamLayout l = layout_of(model);
  require(p.size() == l.total(), ErrorKind::Dimension, "parameter vector has wrong length");
  Eigen::Index o = 0;
  if (l.bc) {
    model.W = Eigen::Map<const MatrixXd>(p.data() + o, l.q, l.n);
    model.X = apply_back_constraints(model.bc_kernel_matrix, model.W);
  } else {
    model.X = Eigen::Map<const MatrixXd>(p.data() + o, l.n, l.q);
  }
  o += l.latent_count();
  model.kernel.kx.log_theta = p(o++);
  model.kernel.kx.log_sigma2 = p(o++);
  model.kernel.kf.B = Eigen::Map<const MatrixXd>(p.data() + o, l.m, l.r);
  o += static_cast<Eigen::Index>(l.m) * l.r;
  model.kernel.kf.log_v = p.segment(o, l.m);
  o += l.m;
  model.kernel.log_noise = p(o++);
  if (l.gpdm) {
    model.gpdm->log_theta = p(o++);
    model.gpdm->log_sigma2 = p(o++);
  }
}

// ---- MAP objective: marginal likelihood + priors, with analytic gradients ----

namespace detail {

inline double gamma22_log_pdf(double theta) {
  // Gamma(shape 2, rate 2) density at theta
  return std::log(4.0) + std::log(theta) - 2.0 * theta;
}

struct GradSink {
  MatrixXd dX;
  double d_log_theta = 0.0, d_log_sigma2 = 0.0, d_log_noise = 0.0;
  MatrixXd dB;
  VectorXd d_log_v;
  double d_log_theta_d = 0.0, d_log_sigma2_d = 0.0;
};

// First-order latent dynamics prior, independent across latent dimensions:
// each trajectory contributes N(x_1; 0, I) and GP regressions of x_{t+1} on
// x_t under a shared SE kernel.
inline double gpdm_log_prior(const LatentModel& model, GradSink* g) {
  const GpdmParams& dp = *model.gpdm;
  kernels::SEKernel kd{dp.log_theta, dp.log_sigma2};
  const double theta_d = kd.theta();
  double value = 0.0;
  for (const auto& [start, len] : trajectory_runs(model.trajectory_ids)) {
    const VectorXd x1 = model.X.row(start).transpose();
    value += -0.5 * x1.squaredNorm() - 0.5 * model.latent_dim * kLog2Pi;
    if (g) g->dX.row(start) -= x1.transpose();
    if (len < 2) continue;
    const int t = len - 1;
    const MatrixXd Z = model.X.middleRows(start, t);
    const MatrixXd Tgt = model.X.middleRows(start + 1, t);
    const MatrixXd Kse = kernels::gram(kd, Z);
    MatrixXd Kd = Kse;
    Kd.diagonal().array() += 1e-6 * kd.sigma2();
    Eigen::LLT<MatrixXd> llt(Kd);
    require(llt.info() == Eigen::Success, ErrorKind::Numerical, "dynamics Gram factorization failed");
    const MatrixXd Alpha = llt.solve(Tgt);
    double logdet = 0.0;
    for (int i = 0; i < t; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    value += -0.5 * Tgt.cwiseProduct(Alpha).sum() -
             0.5 * model.latent_dim * (logdet + t * kLog2Pi);
    if (g) {
      g->dX.middleRows(start + 1, t) -= Alpha;
      const MatrixXd Kinv = llt.solve(MatrixXd::Identity(t, t));
      const MatrixXd Gd = 0.5 * (Alpha * Alpha.transpose() - model.latent_dim * Kinv);
      const MatrixXd Wh = Gd.cwiseProduct(Kse);
      const VectorXd rs = Wh.rowwise().sum();
      g->dX.middleRows(start, t) +=
          (2.0 / (theta_d * theta_d)) * (Wh * Z - rs.asDiagonal() * Z);
      const MatrixXd R2 = kernels::squared_distances(Z, Z);
      g->d_log_theta_d += Wh.cwiseProduct(R2).sum() / (theta_d * theta_d);
      g->d_log_sigma2_d += Gd.cwiseProduct(Kd).sum();
    }
  }
  return value;
}

}  // namespace detail

// Log prior of the current model state (latents plus hyperpriors).
inline double log_prior(const LatentModel& model) {
  double value = 0.0;
  if (model.gpdm) {
    value += detail::gpdm_log_prior(model, nullptr);
  } else {
    value += -0.5 * model.X.squaredNorm() -
             0.5 * static_cast<double>(model.X.size()) * kLog2Pi;
  }
  if (model.config.gamma_lengthscale) {
    value += detail::gamma22_log_pdf(model.kernel.kx.theta());
    if (model.gpdm) value += detail::gamma22_log_pdf(std::exp(model.gpdm->log_theta));
  }
  return value;
}

struct LikelihoodParts {
  double gaussian = 0.0;
  double correction = 0.0;  // sum of per-point change-of-volume terms
  double value = 0.0;       // gaussian - correction
};

// Wrapped-GP marginal likelihood of the model's stored targets.
inline LikelihoodParts log_marginal_likelihood_parts(const LatentModel& model) {
  MatrixXd Kx = kernels::gram(model.kernel.kx, model.X);
  kernels::add_jitter(Kx);
  const KronLik kl =
      kron_loglik(Kx, model.kernel.kf.matrix(), model.noise_vector(), model.V, false);
  LikelihoodParts parts;
  parts.gaussian = kl.value;
  parts.correction = model.cov_correction;
  parts.value = parts.gaussian - parts.correction;
  return parts;
}

inline double log_marginal_likelihood(const LatentModel& model, const Dataset& dataset) {
  require(dataset.spec == model.spec, ErrorKind::Dimension, "dataset spec does not match model");
  require(dataset.n() == model.n(), ErrorKind::Dimension, "dataset size does not match model");
  const MatrixXd Vraw = tangent_targets(model.basepoint, dataset.points);
  const MatrixXd Vc = Vraw.rowwise() - model.tangent_mean.transpose();
  MatrixXd Kx = kernels::gram(model.kernel.kx, model.X);
  kernels::add_jitter(Kx);
  const KronLik kl = kron_loglik(Kx, model.kernel.kf.matrix(), model.noise_vector(), Vc, false);
  double corr = 0.0;
  for (Eigen::Index i = 0; i < Vraw.rows(); ++i) corr += manifolds::cov_log_det(model.basepoint, Vraw.row(i).transpose());
  return kl.value - corr;
}

// Full MAP objective (marginal likelihood + priors) and its gradient with
// respect to the packed parameter vector. The change-of-volume correction
// depends only on the fixed targets, so it shifts the value but not the
// gradient.
inline double map_objective(LatentModel& model, const VectorXd& params, VectorXd* grad) {
  unpack_params(params, model);
  const ParamLayout l = layout_of(model);
  const kernels::SEKernel& kx = model.kernel.kx;
  const double theta = kx.theta();

  const MatrixXd Kse = kernels::gram(kx, model.X);
  MatrixXd Kx = Kse;
  Kx.diagonal().array() += 1e-8 * kx.sigma2();
  const MatrixXd kf = model.kernel.kf.matrix();
  const VectorXd noise = model.noise_vector();

  const bool want = grad != nullptr;
  const KronLik kl = kron_loglik(Kx, kf, noise, model.V, want);
  double value = kl.value - model.cov_correction;

  detail::GradSink g;
  if (want) {
    g.dX = MatrixXd::Zero(l.n, l.q);
    g.dB = MatrixXd::Zero(l.m, l.r);
    g.d_log_v = VectorXd::Zero(l.m);

    const MatrixXd Wh = kl.G_Kx.cwiseProduct(Kse);
    const VectorXd rs = Wh.rowwise().sum();
    g.dX += (2.0 / (theta * theta)) * (Wh * model.X - rs.asDiagonal() * model.X);
    const MatrixXd R2 = kernels::squared_distances(model.X, model.X);
    g.d_log_theta += Wh.cwiseProduct(R2).sum() / (theta * theta);
    g.d_log_sigma2 += kl.G_Kx.cwiseProduct(Kx).sum();
    g.dB += 2.0 * kl.G_kf * model.kernel.kf.B;
    g.d_log_v += kl.G_kf.diagonal().cwiseProduct(model.kernel.kf.log_v.array().exp().matrix());
    if (!l.per_task_noise) g.d_log_noise += kl.g_noise.sum() * model.kernel.noise();
  }

  if (model.gpdm) {
    value += detail::gpdm_log_prior(model, want ? &g : nullptr);
  } else {
    value += -0.5 * model.X.squaredNorm() - 0.5 * static_cast<double>(model.X.size()) * kLog2Pi;
    if (want) g.dX -= model.X;
  }

  if (model.config.gamma_lengthscale) {
    value += detail::gamma22_log_pdf(theta);
    if (want) g.d_log_theta += 1.0 - 2.0 * theta;
    if (model.gpdm) {
      const double theta_d = std::exp(model.gpdm->log_theta);
      value += detail::gamma22_log_pdf(theta_d);
      if (want) g.d_log_theta_d += 1.0 - 2.0 * theta_d;
    }
  }

  if (want) {
    grad->resize(l.total());
    Eigen::Index o = 0;
    if (l.bc) {
      const MatrixXd dW = (model.bc_kernel_matrix * g.dX).transpose();
      grad->segment(o, l.latent_count()) = Eigen::Map<const VectorXd>(dW.data(), l.latent_count());
    } else {
      grad->segment(o, l.latent_count()) =
          Eigen::Map<const VectorXd>(g.dX.data(), l.latent_count());
    }
    o += l.latent_count();
    (*grad)(o++) = g.d_log_theta;
    (*grad)(o++) = g.d_log_sigma2;
    grad->segment(o, static_cast<Eigen::Index>(l.m) * l.r) =
        Eigen::Map<const VectorXd>(g.dB.data(), static_cast<Eigen::Index>(l.m) * l.r);
    o += static_cast<Eigen::Index>(l.m) * l.r;
    grad->segment(o, l.m) = g.d_log_v;
    o += l.m;
    (*grad)(o++) = g.d_log_noise;
    if (l.gpdm) {
      (*grad)(o++) = g.d_log_theta_d;
      (*grad)(o++) = g.d_log_sigma2_d;
    }
  }
  return value;
}

// ---- training ----

inline LatentModel make_untrained_model(const Dataset& dataset, const ModelConfig& config) {
  dataset.validate();
  LatentModel model;
  model.spec = dataset.spec;
  model.latent_dim = config.latent_dim;
  model.config = config;
  model.basepoint = canonical_basepoint(dataset.spec);
  model.points = dataset.points;
  model.trajectory_ids = dataset.trajectory_ids;

  const MatrixXd Vraw = tangent_targets(model.basepoint, dataset.points);
  model.tangent_mean = Vraw.colwise().mean().transpose();
  model.V = Vraw.rowwise() - model.tangent_mean.transpose();
  model.cov_correction = 0.0;
  for (Eigen::Index i = 0; i < Vraw.rows(); ++i)
    model.cov_correction += manifolds::cov_log_det(model.basepoint, Vraw.row(i).transpose());

  const int m = model.tangent_dim();
  const int r = config.task_rank <= 0 ? m : config.task_rank;
  require(r <= m, ErrorKind::Config, "task rank cannot exceed tangent dimension");
  Rng rng(config.seed);
  model.kernel.kx = kernels::SEKernel{0.0, 0.0};
  model.kernel.kf.B = 0.05 * rng.normal_matrix(m, r);
  model.kernel.kf.log_v = VectorXd::Zero(m);
  require(config.init_noise > 0.0, ErrorKind::Config, "initial noise must be positive");
  model.kernel.log_noise = std::log(config.init_noise);
  if (!config.per_task_noise.empty()) {
    require(static_cast<int>(config.per_task_noise.size()) == m, ErrorKind::Config,
            "per-task noise vector has wrong length");
    for (double v : config.per_task_noise)
      require(v > 0.0, ErrorKind::Config, "per-task noise must be positive");
  }
  if (config.gpdm) model.gpdm = GpdmParams{};

  MatrixXd X0 = init_pca(model.V, config.latent_dim);
  if (config.back_constraints) {
    std::vector<kernels::BcComponentParams> bcp =
        config.bc_params.empty() ? default_bc_params(dataset.spec) : config.bc_params;
    model.config.bc_params = bcp;
    model.bc_kernel_matrix = kernels::bc_gram(dataset.spec, bcp, dataset.points);
    MatrixXd Kreg = model.bc_kernel_matrix;
    kernels::add_jitter(Kreg, 1e-8);
    model.W = Kreg.ldlt().solve(X0).transpose();
    model.X = apply_back_constraints(model.bc_kernel_matrix, model.W);
  } else {
    model.X = X0;
  }
  if (dataset.n() > 400)
    model.warnings.push_back("training set exceeds the desk-scale guidance of 400 points");
  return model;
}

inline LatentModel train_map(const Dataset& dataset, const ModelConfig& config) {
  LatentModel model = make_untrained_model(dataset, config);
  VectorXd params = pack_params(model);
  Adam opt(static_cast<int>(params.size()), config.learning_rate);
  VectorXd grad;
  model.objective_trace.clear();
  model.objective_trace.reserve(config.iterations);
  double best_recent = -std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  bool stall_warned = false;
  for (int it = 0; it < config.iterations; ++it) {
    const double value = map_objective(model, params, &grad);
    require(std::isfinite(value), ErrorKind::Numerical, "objective became non-finite during training");
    model.objective_trace.push_back(value);
    if (value > best_recent + 1e-12) {
      best_recent = value;
      since_improvement = 0;
    } else if (++since_improvement >= 200 && !stall_warned) {
      model.warnings.push_back("objective failed to improve for 200 consecutive iterations");
      stall_warned = true;
    }
    VectorXd neg = -grad;
    opt.step(params, neg);
  }
  unpack_params(params, model);
  model.cache_.reset();
  return model;
}

// ---- prediction ----

namespace detail {

inline void hash_bytes(std::uint64_t& h, const void* data, std::size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

inline std::uint64_t model_fingerprint(const LatentModel& m) {
  std::uint64_t h = 1469598103934665603ull;
  hash_bytes(h, m.X.data(), sizeof(double) * m.X.size());
  hash_bytes(h, m.V.data(), sizeof(double) * m.V.size());
  hash_bytes(h, &m.kernel.kx.log_theta, sizeof(double));
  hash_bytes(h, &m.kernel.kx.log_sigma2, sizeof(double));
  hash_bytes(h, m.kernel.kf.B.data(), sizeof(double) * m.kernel.kf.B.size());
  hash_bytes(h, m.kernel.kf.log_v.data(), sizeof(double) * m.kernel.kf.log_v.size());
  hash_bytes(h, &m.kernel.log_noise, sizeof(double));
  return h;
}

}  // namespace detail

inline const LatentModel::Cache& ensure_cache(const LatentModel& model) {
  const std::uint64_t fp = detail::model_fingerprint(model);
  if (model.cache_ && model.cache_->fingerprint == fp) return *model.cache_;
  auto cache = std::make_shared<LatentModel::Cache>();
  cache->fingerprint = fp;
  MatrixXd K = kernels::gram(model.kernel.kx, model.X);
  K.diagonal().array() += 1e-8 * model.kernel.kx.sigma2() + model.fold_noise();
  cache->llt.compute(K);
  require(cache->llt.info() == Eigen::Success, ErrorKind::Numerical,
          "noisy Gram factorization failed");
  cache->alpha = cache->llt.solve(model.V);
  model.cache_ = cache;
  return *model.cache_;
}

struct Posterior {
  VectorXd mean;   // M
  MatrixXd cov;    // M x M
};

// Tangent-space posterior at a latent query. The noise is folded into the
// latent Gram, so the mean is the exact derivative target for the Jacobian
// posterior and the sigma^2 -> 0 limit interpolates the targets.
inline Posterior predict(const LatentModel& model, const Eigen::Ref<const VectorXd>& xstar) {
  require(xstar.size() == model.latent_dim, ErrorKind::Dimension, "query has wrong latent dimension");
  const auto& cache = ensure_cache(model);
  const MatrixXd ks = kernels::gram_cross(model.kernel.kx, model.X, xstar.transpose());  // N x 1
  Posterior post;
  post.mean = model.tangent_mean + cache.alpha.transpose() * ks.col(0);
  const double s = std::max(0.0, model.kernel.kx.sigma2() -
                                     ks.col(0).dot(cache.llt.solve(ks.col(0))));
  post.cov = s * model.kernel.kf.matrix();
  return post;
}

inline manifolds::ManifoldPoint decode(const LatentModel& model, const Eigen::Ref<const VectorXd>& xstar) {
  return manifolds::exp_map(model.basepoint, predict(model, xstar).mean);
}

// ---- serialization ----

namespace detail {

inline nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return MatrixXd(0, 0);
  const Eigen::Index cols = static_cast<Eigen::Index>(j.at(0).size());
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    require(static_cast<Eigen::Index>(j.at(i).size()) == cols, ErrorKind::Validation,
            "ragged matrix in json");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline VectorXd vector_from_json(const nlohmann::json& j) {
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"latent_dim", c.latent_dim},
                     {"iterations", c.iterations},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"gpdm", c.gpdm},
                     {"gamma_lengthscale", c.gamma_lengthscale},
                     {"back_constraints", c.back_constraints},
                     {"task_rank", c.task_rank},
                     {"init_noise", c.init_noise},
                     {"per_task_noise", c.per_task_noise},
                     {"bc_params", c.bc_params}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim").get<int>();
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("gpdm")) c.gpdm = j.at("gpdm").get<bool>();
  if (j.contains("gamma_lengthscale")) c.gamma_lengthscale = j.at("gamma_lengthscale").get<bool>();
  if (j.contains("back_constraints")) c.back_constraints = j.at("back_constraints").get<bool>();
  if (j.contains("task_rank")) c.task_rank = j.at("task_rank").get<int>();
  if (j.contains("init_noise")) c.init_noise = j.at("init_noise").get<double>();
  if (j.contains("per_task_noise")) c.per_task_noise = j.at("per_task_noise").get<std::vector<double>>();
  if (j.contains("bc_params")) c.bc_params = j.at("bc_params").get<std::vector<kernels::BcComponentParams>>();
}

inline void to_json(nlohmann::json& j, const Dataset& d) {
  j = nlohmann::json{{"schema", "geolvm-dataset-v1"},
                     {"spec", d.spec},
                     {"points", detail::matrix_to_json(d.points)},
                     {"trajectory_ids", d.trajectory_ids}};
}

inline void from_json(const nlohmann::json& j, Dataset& d) {
  require(j.value("schema", "") == std::string("geolvm-dataset-v1"), ErrorKind::Validation,
          "unrecognized dataset schema");
  d.spec = j.at("spec").get<manifolds::ManifoldSpec>();
  d.points = detail::matrix_from_json(j.at("points"));
  d.trajectory_ids = j.at("trajectory_ids").get<std::vector<int>>();
  d.validate();
}

inline void to_json(nlohmann::json& j, const LatentModel& m) {
  j = nlohmann::json{
      {"schema", "geolvm-model-v1"},
      {"spec", m.spec},
      {"latent_dim", m.latent_dim},
      {"latents", detail::matrix_to_json(m.X)},
      {"hyperparameters",
       nlohmann::json{{"se_log_theta", m.kernel.kx.log_theta},
                      {"se_log_sigma2", m.kernel.kx.log_sigma2},
                      {"task_b", detail::matrix_to_json(m.kernel.kf.B)},
                      {"task_log_v", detail::vector_to_json(m.kernel.kf.log_v)},
                      {"log_noise", m.kernel.log_noise}}},
      {"basepoint", detail::vector_to_json(m.basepoint.coords)},
      {"tangent_mean", detail::vector_to_json(m.tangent_mean)},
      {"config", m.config},
      {"objective_trace", m.objective_trace},
      {"warnings", m.warnings},
      {"data", nlohmann::json{{"points", detail::matrix_to_json(m.points)},
                              {"trajectory_ids", m.trajectory_ids}}},
      {"tangent_targets", detail::matrix_to_json(m.V)},
      {"cov_correction", m.cov_correction}};
  if (m.config.back_constraints) j["bc_weights"] = detail::matrix_to_json(m.W);
  if (m.gpdm)
    j["gpdm"] = nlohmann::json{{"log_theta", m.gpdm->log_theta},
                               {"log_sigma2", m.gpdm->log_sigma2}};
}

inline void from_json(const nlohmann::json& j, LatentModel& m) {
  require(j.value("schema", "") == std::string("geolvm-model-v1"), ErrorKind::Validation,
          "unrecognized model schema");
  m = LatentModel{};
  m.spec = j.at("spec").get<manifolds::ManifoldSpec>();
  m.latent_dim = j.at("latent_dim").get<int>();
  m.X = detail::matrix_from_json(j.at("latents"));
  const auto& h = j.at("hyperparameters");
  m.kernel.kx.log_theta = h.at("se_log_theta").get<double>();
  m.kernel.kx.log_sigma2 = h.at("se_log_sigma2").get<double>();
  m.kernel.kf.B = detail::matrix_from_json(h.at("task_b"));
  m.kernel.kf.log_v = detail::vector_from_json(h.at("task_log_v"));
  m.kernel.log_noise = h.at("log_noise").get<double>();
  m.basepoint = manifolds::ManifoldPoint{m.spec, detail::vector_from_json(j.at("basepoint"))};
  m.tangent_mean = detail::vector_from_json(j.at("tangent_mean"));
  m.config = j.at("config").get<ModelConfig>();
  m.objective_trace = j.at("objective_trace").get<std::vector<double>>();
  m.warnings = j.at("warnings").get<std::vector<std::string>>();
  m.points = detail::matrix_from_json(j.at("data").at("points"));
  m.trajectory_ids = j.at("data").at("trajectory_ids").get<std::vector<int>>();
  m.V = detail::matrix_from_json(j.at("tangent_targets"));
  m.cov_correction = j.at("cov_correction").get<double>();
  if (j.contains("gpdm")) {
    GpdmParams g;
    g.log_theta = j.at("gpdm").at("log_theta").get<double>();
    g.log_sigma2 = j.at("gpdm").at("log_sigma2").get<double>();
    m.gpdm = g;
  }
  if (m.config.back_constraints) {
    m.W = detail::matrix_from_json(j.at("bc_weights"));
    std::vector<kernels::BcComponentParams> bcp =
        m.config.bc_params.empty() ? default_bc_params(m.spec) : m.config.bc_params;
    m.bc_kernel_matrix = kernels::bc_gram(m.spec, bcp, m.points);
  }
}

inline std::string model_to_string(const LatentModel& m) {
  nlohmann::json j = m;
  return j.dump(2) + "\n";
}

inline LatentModel model_from_string(const std::string& s) {
  return nlohmann::json::parse(s).get<LatentModel>();
}

}  // namespace geolvm::lvm
