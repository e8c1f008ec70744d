#include <catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "geolvm/lvm.hpp"
#include "geolvm/manifolds.hpp"
#include "geolvm/pullback.hpp"
#include "geolvm/rng.hpp"
#include "test_helpers.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace gm = geolvm::manifolds;
namespace gl = geolvm::lvm;
namespace gp = geolvm::pullback;
using geolvm::Rng;

namespace {

gl::LatentModel tiny_sphere_model(std::uint64_t seed = 41) {
  Rng rng(seed);
  const auto ds = test_helpers::random_walk_dataset(rng, gm::ManifoldSpec::sphere(3), 3, 5, 0.2);
  gl::ModelConfig cfg;
  cfg.seed = 11;
  gl::LatentModel model = gl::make_untrained_model(ds, cfg);
  // spread latents so gram solves stay benign
  for (Eigen::Index i = 0; i < model.n(); ++i)
    model.X.row(i) << 0.9 * static_cast<double>(i % 4), 0.9 * static_cast<double>(i / 4);
  return model;
}

}  // namespace

TEST_CASE("exponential map jacobian matches finite differences", "[pullback]") {
  Rng rng(42);
  const std::vector<gm::ManifoldSpec> specs = {
      gm::ManifoldSpec::sphere(2), gm::ManifoldSpec::sphere(3), gm::ManifoldSpec::spd(2),
      gm::ManifoldSpec::spd(3),
      gm::ManifoldSpec::product({gm::ManifoldSpec::euclidean(2), gm::ManifoldSpec::sphere(2),
                                 gm::ManifoldSpec::spd(2)})};
  for (const auto& spec : specs) {
    for (int it = 0; it < 40; ++it) {
      const gm::ManifoldPoint b = test_helpers::random_point(rng, spec);
      const VectorXd v = test_helpers::random_tangent(rng, spec, 0.7);
      const MatrixXd Ja = gp::exp_jacobian(b, v, gp::JacobianMode::Analytic);
      const MatrixXd Jf = gp::exp_jacobian(b, v, gp::JacobianMode::FiniteDifference);
      INFO("spec tangent dim " << spec.tangent_dim() << " iter " << it);
      CHECK((Ja - Jf).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
}

TEST_CASE("jacobian at zero tangent is the identity", "[pullback]") {
  for (const auto& spec :
       {gm::ManifoldSpec::sphere(2), gm::ManifoldSpec::spd(2), gm::ManifoldSpec::euclidean(3)}) {
    const gm::ManifoldPoint b = gm::canonical_basepoint(spec);
    const MatrixXd J = gp::exp_jacobian(b, VectorXd::Zero(spec.tangent_dim()));
    CHECK((J - MatrixXd::Identity(J.rows(), J.cols())).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("jacobian determinant reproduces the volume correction", "[pullback]") {
  Rng rng(43);
  SECTION("sphere, arbitrary basepoints") {
    for (int m : {2, 3, 4}) {
      const auto spec = gm::ManifoldSpec::sphere(m);
      for (int it = 0; it < 30; ++it) {
        const gm::ManifoldPoint b = test_helpers::random_point(rng, spec);
        VectorXd v = test_helpers::random_tangent(rng, spec, 0.8);
        const MatrixXd J = gp::exp_jacobian(b, v);
        CHECK(std::log(std::abs(J.determinant())) ==
              Catch::Approx(gm::cov_log_det(b, v)).margin(1e-9));
      }
    }
  }
  SECTION("spd, scalar basepoints") {
    for (int m : {2, 3}) {
      const auto spec = gm::ManifoldSpec::spd(m);
      for (double a : {1.0, 2.0}) {
        gm::ManifoldPoint b = gm::canonical_basepoint(spec);
        b.coords *= a;
        for (int it = 0; it < 20; ++it) {
          const VectorXd v = test_helpers::random_tangent(rng, spec, 0.6);
          const MatrixXd J = gp::exp_jacobian(b, v);
          CHECK(std::log(std::abs(J.determinant())) ==
                Catch::Approx(gm::cov_log_det(b, v)).margin(1e-9));
        }
      }
    }
  }
  SECTION("product sums per-part corrections") {
    const auto spec =
        gm::ManifoldSpec::product({gm::ManifoldSpec::euclidean(2), gm::ManifoldSpec::sphere(2)});
    const gm::ManifoldPoint b = gm::canonical_basepoint(spec);
    for (int it = 0; it < 20; ++it) {
      const VectorXd v = test_helpers::random_tangent(rng, spec, 0.8);
      const MatrixXd J = gp::exp_jacobian(b, v);
      CHECK(std::log(std::abs(J.determinant())) ==
            Catch::Approx(gm::cov_log_det(b, v)).margin(1e-9));
    }
  }
}

TEST_CASE("ambient metric is exact in the orthonormal charts", "[pullback]") {
  Rng rng(44);
  for (const auto& spec : {gm::ManifoldSpec::euclidean(3), gm::ManifoldSpec::sphere(3)}) {
    const gm::ManifoldPoint y = test_helpers::random_point(rng, spec);
    const MatrixXd G = gp::ambient_metric(y);
    CHECK((G - MatrixXd::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff() < 1e-12);
  }
  // spd at the identity: the scaled symmetric basis is orthonormal there
  const auto spec = gm::ManifoldSpec::spd(2);
  const MatrixXd GI = gp::ambient_metric(gm::canonical_basepoint(spec));
  CHECK((GI - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("spd ambient metric reproduces squared geodesic speed", "[pullback]") {
  Rng rng(45);
  const auto spec = gm::ManifoldSpec::spd(3);
  for (int it = 0; it < 20; ++it) {
    const gm::ManifoldPoint y{spec, test_helpers::random_spd_coords(rng, 3, 0.6)};
    const VectorXd w = test_helpers::random_tangent(rng, spec, 1.0);
    const MatrixXd G = gp::ambient_metric(y);
    const double quad = w.dot(G * w);
    const double t = 1e-4;
    const gm::ManifoldPoint z = gm::exp_map(y, (t * w).eval());
    const double d = gm::distance(y, z);
    CHECK(quad == Catch::Approx(d * d / (t * t)).epsilon(1e-6));
  }
}

TEST_CASE("jacobian posterior mean differentiates the predictive mean", "[pullback]") {
  const gl::LatentModel model = tiny_sphere_model();
  Rng rng(46);
  for (int it = 0; it < 5; ++it) {
    const VectorXd x = model.X.row(it * 2).transpose() + 0.3 * rng.normal_vector(2);
    const gp::JacobianPosterior jp = gp::jacobian_posterior(model, x);
    const double h = 1e-5;
    for (int q = 0; q < 2; ++q) {
      VectorXd xp = x, xm = x;
      xp(q) += h;
      xm(q) -= h;
      const VectorXd fd = (gl::predict(model, xp).mean - gl::predict(model, xm).mean) / (2.0 * h);
      CHECK((jp.mean.col(q) - fd).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
}

TEST_CASE("jacobian posterior covariances have the right limits", "[pullback]") {
  const gl::LatentModel model = tiny_sphere_model();
  VectorXd far(2);
  far << 300.0, 300.0;
  const gp::JacobianPosterior jp = gp::jacobian_posterior(model, far);
  const double th = model.kernel.kx.theta();
  const double s = model.kernel.kx.sigma2() / (th * th);
  CHECK((jp.input_cov - s * MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((jp.task_cov - model.kernel.kf.matrix()).cwiseAbs().maxCoeff() == 0.0);
  // near the data the gradient is pinned down more tightly than the prior
  const VectorXd near = model.X.row(3).transpose();
  const gp::JacobianPosterior jn = gp::jacobian_posterior(model, near);
  CHECK(jn.input_cov.trace() < jp.input_cov.trace());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(jn.input_cov);
  CHECK(es.eigenvalues().minCoeff() > -1e-9);
}

TEST_CASE("expected pullback reduces to the classic form in flat space", "[pullback]") {
  Rng rng(47);
  const auto ds = test_helpers::random_walk_dataset(rng, gm::ManifoldSpec::euclidean(3), 3, 5, 0.3);
  gl::ModelConfig cfg;
  gl::LatentModel model = gl::make_untrained_model(ds, cfg);
  model.kernel.kf.B.setZero();          // kf = I
  model.kernel.kf.log_v.setZero();
  const VectorXd x = 0.4 * rng.normal_vector(2);
  const gp::JacobianPosterior jp = gp::jacobian_posterior(model, x);
  const MatrixXd want = gp::floor_eigenvalues(jp.mean.transpose() * jp.mean +
                                              3.0 * jp.input_cov);
  const MatrixXd got = gp::expected_pullback(model, x);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("expected pullback agrees with monte carlo sampling", "[pullback]") {
  const gl::LatentModel model = tiny_sphere_model();
  VectorXd x(2);
  x << 1.1, 0.7;
  const gl::Posterior post = gl::predict(model, x);
  const MatrixXd Gv = gp::tangent_metric(model.basepoint, post.mean);
  const gp::JacobianPosterior jp = gp::jacobian_posterior(model, x);

  Rng rng(48);
  const int samples = 20000;
  MatrixXd acc = MatrixXd::Zero(2, 2);
  for (int s = 0; s < samples; ++s) {
    const MatrixXd J = gp::sample_jacobian(jp, rng);
    acc += J.transpose() * Gv * J;
  }
  acc /= static_cast<double>(samples);
  const MatrixXd want = jp.mean.transpose() * Gv * jp.mean +
                        Gv.cwiseProduct(jp.task_cov).sum() * jp.input_cov;
  CHECK((acc - want).norm() < 0.05 * want.norm());
  // and the shipped metric is that closed form, floored
  const MatrixXd got = gp::expected_pullback(model, x);
  CHECK((got - gp::floor_eigenvalues(want)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("eigenvalue flooring repairs indefinite metrics", "[pullback]") {
  MatrixXd G(2, 2);
  G << 1.0, 0.0, 0.0, -0.5;
  const MatrixXd F = gp::floor_eigenvalues(G);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(F);
  CHECK(es.eigenvalues().minCoeff() >= 2.4e-11);
  CHECK(es.eigenvalues().maxCoeff() == Catch::Approx(1.0).epsilon(1e-12));
  MatrixXd P(2, 2);
  P << 2.0, 0.3, 0.3, 1.0;
  CHECK((gp::floor_eigenvalues(P) - P).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("magnification is the metric volume density", "[pullback]") {
  MatrixXd G(2, 2);
  G << 4.0, 0.0, 0.0, 9.0;
  CHECK(gp::magnification(G) == Catch::Approx(6.0));
  G(1, 1) = -1.0;
  CHECK(gp::magnification(G) == 0.0);
}

TEST_CASE("density metric follows the hand computation", "[pullback]") {
  MatrixXd X(3, 2);
  X << 0, 0, 1, 0, 0, 2;
  const double sigma = 0.5;
  const gp::KdeMetric kde(X, sigma);
  const double norm = 1.0 / (2.0 * std::numbers::pi * sigma * sigma);
  auto density = [&](double a, double b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double d2 = (X(i, 0) - a) * (X(i, 0) - a) + (X(i, 1) - b) * (X(i, 1) - b);
      s += std::exp(-d2 / (2.0 * sigma * sigma));
    }
    return norm * s;
  };
  double pmax = 0.0;
  for (int i = 0; i < 3; ++i) pmax = std::max(pmax, density(X(i, 0), X(i, 1)));
  CHECK(kde.eps == Catch::Approx(1e-12 * pmax).epsilon(1e-14));
  VectorXd x(2);
  x << 0.3, -0.4;
  const double lambda = 1.0 / (density(0.3, -0.4) + kde.eps);  // power -2/Q with Q = 2
  const MatrixXd G = kde(x);
  CHECK(G(0, 0) == Catch::Approx(lambda).epsilon(1e-12));
  CHECK(G(1, 1) == Catch::Approx(lambda).epsilon(1e-12));
  CHECK(G(0, 1) == 0.0);
  // the metric blows up away from the data
  VectorXd farp(2);
  farp << 40.0, 40.0;
  CHECK(gp::kde_metric_fn(kde)(farp)(0, 0) > 1e6 * G(0, 0));
}

TEST_CASE("metric grids evaluate the metric at lattice nodes", "[pullback]") {
  gp::Bounds2 bounds;
  bounds.x0_min = -1.0;
  bounds.x0_max = 1.0;
  bounds.x1_min = 0.0;
  bounds.x1_max = 2.0;
  const gp::Lattice lat{bounds, 3};
  CHECK(lat.size() == 9);
  CHECK(lat.x0(0) == -1.0);
  CHECK(lat.x0(2) == 1.0);
  CHECK(lat.x1(1) == 1.0);
  const VectorXd node = lat.node(2, 1);
  CHECK(node(0) == 1.0);
  CHECK(node(1) == 1.0);

  MatrixXd X(2, 2);
  X << 0, 0, 0.5, 0.5;
  const gp::KdeMetric kde(X, 0.7);
  const auto grid = gp::compute_metric_grid(gp::kde_metric_fn(kde), lat);
  for (int ix = 0; ix < 3; ++ix)
    for (int iy = 0; iy < 3; ++iy) {
      const MatrixXd want = kde(lat.node(ix, iy));
      CHECK((grid.at(ix, iy) - want).cwiseAbs().maxCoeff() == 0.0);
    }
  const std::string csv = gp::metric_grid_csv(grid);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
  CHECK(csv.rfind("ix,iy,x0,x1,g00,g01,g10,g11,magnification\n", 0) == 0);
}
