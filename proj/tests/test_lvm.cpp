#include <catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "geolvm/kernels.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/manifolds.hpp"
#include "geolvm/rng.hpp"
#include "test_helpers.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace gl = geolvm::lvm;
namespace gk = geolvm::kernels;
namespace gm = geolvm::manifolds;
using geolvm::Rng;

namespace {

// dense multivariate-normal log density at zero mean, independent of the
// factorized path under test
double dense_loglik(const MatrixXd& Kx, const MatrixXd& kf, const VectorXd& noise,
                    const MatrixXd& V) {
  const Eigen::Index n = Kx.rows(), m = kf.rows();
  MatrixXd C = gk::kronecker(kf, Kx);
  for (Eigen::Index j = 0; j < m; ++j)
    C.block(j * n, j * n, n, n).diagonal().array() += noise(j);
  const Eigen::Map<const VectorXd> y(V.data(), n * m);
  Eigen::LLT<MatrixXd> llt(C);
  REQUIRE(llt.info() == Eigen::Success);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n * m; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double quad = y.dot(llt.solve(y));
  return -0.5 * (static_cast<double>(n * m) * gl::kLog2Pi + logdet + quad);
}

gl::Dataset sphere_dataset(int n_traj = 3, int len = 5, std::uint64_t seed = 31) {
  Rng rng(seed);
  return test_helpers::random_walk_dataset(rng, gm::ManifoldSpec::sphere(3), n_traj, len, 0.2);
}

}  // namespace

TEST_CASE("factorized likelihood equals the dense density", "[lvm]") {
  Rng rng(32);
  const int n = 7, m = 3;
  const MatrixXd X = rng.normal_matrix(n, 2);
  gk::SEKernel kx{std::log(0.8), std::log(1.2)};
  MatrixXd Kx = gk::gram(kx, X);
  gk::add_jitter(Kx);
  gk::TaskCovariance tc;
  tc.B = rng.normal_matrix(m, 2);
  tc.log_v = 0.3 * rng.normal_vector(m);
  const MatrixXd kf = tc.matrix();
  const MatrixXd V = rng.normal_matrix(n, m);

  SECTION("shared noise") {
    const VectorXd noise = VectorXd::Constant(m, 0.07);
    const auto kl = gl::kron_loglik(Kx, kf, noise, V, false);
    CHECK(kl.value == Catch::Approx(dense_loglik(Kx, kf, noise, V)).epsilon(1e-10));
  }
  SECTION("per-task noise") {
    VectorXd noise(m);
    noise << 0.02, 0.4, 0.11;
    const auto kl = gl::kron_loglik(Kx, kf, noise, V, false);
    CHECK(kl.value == Catch::Approx(dense_loglik(Kx, kf, noise, V)).epsilon(1e-10));
    // solve check: A = unvec(Sigma^-1 vec V)
    MatrixXd C = gk::kronecker(kf, Kx);
    for (int j = 0; j < m; ++j) C.block(j * n, j * n, n, n).diagonal().array() += noise(j);
    const Eigen::Map<const VectorXd> y(V.data(), n * m);
    const VectorXd a = C.llt().solve(y);
    const Eigen::Map<const MatrixXd> A(a.data(), n, m);
    CHECK((kl.A - A).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("factorized likelihood gradients match finite differences", "[lvm]") {
  Rng rng(33);
  const int n = 6, m = 3;
  const MatrixXd X = rng.normal_matrix(n, 2);
  gk::SEKernel kx{0.0, 0.0};
  MatrixXd Kx = gk::gram(kx, X);
  gk::add_jitter(Kx);
  gk::TaskCovariance tc;
  tc.B = rng.normal_matrix(m, 2);
  tc.log_v = 0.2 * rng.normal_vector(m);
  const MatrixXd kf = tc.matrix();
  const MatrixXd V = rng.normal_matrix(n, m);
  VectorXd noise(m);
  noise << 0.1, 0.25, 0.06;
  const auto kl = gl::kron_loglik(Kx, kf, noise, V, true);
  const double h = 1e-6;

  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      MatrixXd Kp = Kx, Km = Kx;
      Kp(i, j) += h;
      Km(i, j) -= h;
      if (i != j) {
        Kp(j, i) += h;
        Km(j, i) -= h;
      }
      const double fd = (gl::kron_loglik(Kp, kf, noise, V, false).value -
                         gl::kron_loglik(Km, kf, noise, V, false).value) /
                        (2.0 * h);
      const double an = i == j ? kl.G_Kx(i, i) : 2.0 * kl.G_Kx(i, j);
      CHECK(std::abs(fd - an) < 1e-6 * std::max(1.0, std::abs(an)) + 1e-6);
    }

  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      MatrixXd fp = kf, fm = kf;
      fp(i, j) += h;
      fm(i, j) -= h;
      if (i != j) {
        fp(j, i) += h;
        fm(j, i) -= h;
      }
      const double fd = (gl::kron_loglik(Kx, fp, noise, V, false).value -
                         gl::kron_loglik(Kx, fm, noise, V, false).value) /
                        (2.0 * h);
      const double an = i == j ? kl.G_kf(i, i) : 2.0 * kl.G_kf(i, j);
      CHECK(std::abs(fd - an) < 1e-6 * std::max(1.0, std::abs(an)) + 1e-6);
    }

  for (int j = 0; j < m; ++j) {
    VectorXd np = noise, nm = noise;
    np(j) += h;
    nm(j) -= h;
    const double fd = (gl::kron_loglik(Kx, kf, np, V, false).value -
                       gl::kron_loglik(Kx, kf, nm, V, false).value) /
                      (2.0 * h);
    CHECK(std::abs(fd - kl.g_noise(j)) < 1e-6 * std::max(1.0, std::abs(kl.g_noise(j))) + 1e-6);
  }
}

TEST_CASE("map objective gradient matches finite differences", "[lvm]") {
  const gl::Dataset ds = sphere_dataset(2, 5);

  auto check_config = [&](gl::ModelConfig cfg) {
    gl::LatentModel model = gl::make_untrained_model(ds, cfg);
    VectorXd params = gl::pack_params(model);
    // move off the init to a generic position
    Rng prng(34);
    params += 0.05 * prng.normal_vector(static_cast<int>(params.size()));
    VectorXd grad;
    const double val = gl::map_objective(model, params, &grad);
    REQUIRE(std::isfinite(val));
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
      VectorXd pp = params, pm = params;
      pp(i) += h;
      pm(i) -= h;
      const double fd =
          (gl::map_objective(model, pp, nullptr) - gl::map_objective(model, pm, nullptr)) /
          (2.0 * h);
      const double rel = std::abs(fd - grad(i)) / std::max(1.0, std::abs(grad(i)));
      INFO("param " << i << " fd " << fd << " analytic " << grad(i));
      CHECK(rel < 1e-4);
    }
  };

  gl::ModelConfig base;
  base.latent_dim = 2;
  base.seed = 5;

  SECTION("isotropic latent prior") { check_config(base); }
  SECTION("dynamics prior") {
    auto cfg = base;
    cfg.gpdm = true;
    check_config(cfg);
  }
  SECTION("lengthscale hyperprior") {
    auto cfg = base;
    cfg.gamma_lengthscale = true;
    cfg.gpdm = true;
    check_config(cfg);
  }
  SECTION("back constraints") {
    auto cfg = base;
    cfg.back_constraints = true;
    check_config(cfg);
  }
  SECTION("fixed per-task noise and low rank") {
    auto cfg = base;
    cfg.per_task_noise = {0.05, 0.1, 0.02};
    cfg.task_rank = 1;
    check_config(cfg);
  }
}

TEST_CASE("pca initialization is deterministic and unit scale", "[lvm]") {
  Rng rng(35);
  const MatrixXd V = rng.normal_matrix(30, 4);
  const MatrixXd Vc = V.rowwise() - V.colwise().mean();
  const MatrixXd X1 = gl::init_pca(Vc, 2);
  const MatrixXd X2 = gl::init_pca(Vc, 2);
  CHECK((X1 - X2).cwiseAbs().maxCoeff() == 0.0);
  for (int c = 0; c < 2; ++c)
    CHECK(X1.col(c).squaredNorm() / 30.0 == Catch::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(gl::init_pca(MatrixXd::Zero(10, 3), 2), geolvm::Error);
  const MatrixXd rank1 = Vc.col(0) * Eigen::RowVector3d(1.0, 2.0, 3.0);
  CHECK_THROWS_AS(gl::init_pca(rank1, 2), geolvm::Error);
}

TEST_CASE("training is deterministic and improves the objective", "[lvm]") {
  const gl::Dataset ds = sphere_dataset();
  gl::ModelConfig cfg;
  cfg.iterations = 150;
  cfg.seed = 7;
  const gl::LatentModel m1 = gl::train_map(ds, cfg);
  const gl::LatentModel m2 = gl::train_map(ds, cfg);
  CHECK((gl::pack_params(m1) - gl::pack_params(m2)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(m1.objective_trace.size() == 150);
  CHECK(m1.objective_trace.back() > m1.objective_trace.front());
  CHECK(m1.objective_trace == m2.objective_trace);
}

TEST_CASE("stall warning fires when nothing improves", "[lvm]") {
  const gl::Dataset ds = sphere_dataset(2, 4);
  gl::ModelConfig cfg;
  cfg.iterations = 210;
  cfg.learning_rate = 0.0;  // cannot improve
  const gl::LatentModel m = gl::train_map(ds, cfg);
  bool found = false;
  for (const auto& w : m.warnings)
    if (w.find("200 consecutive") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("prediction interpolates targets at low noise and reverts far away", "[lvm]") {
  const gl::Dataset ds = sphere_dataset();
  gl::ModelConfig cfg;
  cfg.per_task_noise = {1e-9, 1e-9, 1e-9};
  gl::LatentModel model = gl::make_untrained_model(ds, cfg);
  // well separated latents keep the gram matrix comfortably conditioned, so
  // the posterior mean must hit each target up to the jitter scale
  for (Eigen::Index i = 0; i < model.n(); ++i)
    model.X.row(i) << 1.5 * static_cast<double>(i % 4), 1.5 * static_cast<double>(i / 4);
  for (Eigen::Index i = 0; i < model.n(); ++i) {
    const auto post = gl::predict(model, model.X.row(i).transpose());
    const VectorXd want = model.V.row(i).transpose() + model.tangent_mean;
    CHECK((post.mean - want).cwiseAbs().maxCoeff() < 1e-5);
  }
  VectorXd far(2);
  far << 500.0, -500.0;
  const auto post = gl::predict(model, far);
  CHECK((post.mean - model.tangent_mean).cwiseAbs().maxCoeff() < 1e-12);
  const MatrixXd want_cov = model.kernel.kx.sigma2() * model.kernel.kf.matrix();
  CHECK((post.cov - want_cov).cwiseAbs().maxCoeff() < 1e-10);
  // decoded far point is the exp of the mean tangent vector
  const auto y = gl::decode(model, far);
  CHECK(gm::project_check(model.spec, y.coords, 1e-9));
}

TEST_CASE("marginal likelihood separates gaussian and correction parts", "[lvm]") {
  const gl::Dataset ds = sphere_dataset();
  gl::ModelConfig cfg;
  const gl::LatentModel model = gl::make_untrained_model(ds, cfg);
  const auto parts = gl::log_marginal_likelihood_parts(model);
  double corr = 0.0;
  const MatrixXd raw = gl::tangent_targets(model.basepoint, ds.points);
  for (Eigen::Index i = 0; i < raw.rows(); ++i)
    corr += gm::cov_log_det(model.basepoint, raw.row(i).transpose());
  CHECK(parts.correction == Catch::Approx(corr).epsilon(1e-14));
  CHECK(parts.value == Catch::Approx(parts.gaussian - parts.correction).epsilon(1e-14));
  CHECK(gl::log_marginal_likelihood(model, ds) == Catch::Approx(parts.value).epsilon(1e-12));
  // the correction is a constant of the data: euclidean specs have none
  Rng rng(36);
  const auto eds = test_helpers::random_walk_dataset(rng, gm::ManifoldSpec::euclidean(3), 2, 5);
  const gl::LatentModel em = gl::make_untrained_model(eds, cfg);
  CHECK(em.cov_correction == 0.0);
}

TEST_CASE("dynamics prior matches a direct per-trajectory computation", "[lvm]") {
  const gl::Dataset ds = sphere_dataset(2, 4, 37);
  gl::ModelConfig cfg;
  cfg.gpdm = true;
  gl::LatentModel model = gl::make_untrained_model(ds, cfg);
  model.gpdm->log_theta = std::log(0.9);
  model.gpdm->log_sigma2 = std::log(1.4);

  double want = 0.0;
  gk::SEKernel kd{model.gpdm->log_theta, model.gpdm->log_sigma2};
  for (const auto& [start, len] : ds.trajectories()) {
    const VectorXd x1 = model.X.row(start).transpose();
    want += -0.5 * x1.squaredNorm() - 0.5 * 2 * gl::kLog2Pi;
    const int t = len - 1;
    const MatrixXd Z = model.X.middleRows(start, t);
    const MatrixXd Tgt = model.X.middleRows(start + 1, t);
    MatrixXd Kd = gk::gram(kd, Z);
    Kd.diagonal().array() += 1e-6 * kd.sigma2();
    const Eigen::LLT<MatrixXd> llt(Kd);
    double logdet = 0.0;
    for (int i = 0; i < t; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    for (int q = 0; q < 2; ++q) {
      const VectorXd y = Tgt.col(q);
      want += -0.5 * (y.dot(llt.solve(y)) + logdet + t * gl::kLog2Pi);
    }
  }
  CHECK(gl::log_prior(model) == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("back-constrained latents stay a function of the weights", "[lvm]") {
  Rng rng(38);
  const auto ds = test_helpers::random_walk_dataset(
      rng, gm::ManifoldSpec::product({gm::ManifoldSpec::euclidean(2), gm::ManifoldSpec::sphere(2)}),
      3, 5, 0.2);
  gl::ModelConfig cfg;
  cfg.back_constraints = true;
  cfg.iterations = 40;
  const gl::LatentModel model = gl::train_map(ds, cfg);
  REQUIRE(model.W.size() > 0);
  const MatrixXd recon = gl::apply_back_constraints(model.bc_kernel_matrix, model.W);
  CHECK((model.X - recon).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("model serialization round-trips exactly", "[lvm]") {
  const gl::Dataset ds = sphere_dataset(2, 5);
  gl::ModelConfig cfg;
  cfg.iterations = 30;
  cfg.gpdm = true;
  const gl::LatentModel model = gl::train_map(ds, cfg);
  const std::string s1 = gl::model_to_string(model);
  const gl::LatentModel copy = gl::model_from_string(s1);
  const std::string s2 = gl::model_to_string(copy);
  CHECK(s1 == s2);
  CHECK((gl::pack_params(model) - gl::pack_params(copy)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((model.V - copy.V).cwiseAbs().maxCoeff() == 0.0);
  CHECK(model.cov_correction == copy.cov_correction);
  // predictions agree bitwise
  VectorXd x(2);
  x << 0.3, -0.2;
  CHECK((gl::predict(model, x).mean - gl::predict(copy, x).mean).cwiseAbs().maxCoeff() == 0.0);

  nlohmann::json dj = ds;
  const gl::Dataset ds2 = dj.get<gl::Dataset>();
  CHECK((ds.points - ds2.points).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ds.trajectory_ids == ds2.trajectory_ids);
}

TEST_CASE("dataset validation rejects malformed input", "[lvm]") {
  gl::Dataset ds;
  ds.spec = gm::ManifoldSpec::sphere(2);
  ds.points = MatrixXd::Zero(3, 3);
  ds.points << 1, 0, 0, 0, 1, 0, 1, 0, 0;
  ds.trajectory_ids = {0, 1, 0};  // non-contiguous
  CHECK_THROWS_AS(ds.validate(), geolvm::Error);
  ds.trajectory_ids = {0, 0, 1};
  CHECK_NOTHROW(ds.validate());
  ds.points(0, 0) = 2.0;  // off the sphere
  CHECK_THROWS_AS(ds.validate(), geolvm::Error);
}
