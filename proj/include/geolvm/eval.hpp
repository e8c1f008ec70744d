#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "geolvm/errors.hpp"
#include "geolvm/geodesics.hpp"
#include "geolvm/io.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/manifolds.hpp"
#include "geolvm/pullback.hpp"
#include "geolvm/synthetic.hpp"

namespace geolvm::eval {

using Eigen::MatrixXd;
using Eigen::VectorXd;

using PointDistance = std::function<double(const VectorXd&, const VectorXd&)>;

// Symmetrized mean of closest-point distances between two point sequences:
//   D(A, B) = mean_b min_a d(a, b) + mean_a min_b d(a, b).
// Each side is averaged so the score does not grow with how densely either
// curve happens to be sampled.
inline double dtwd(const MatrixXd& A, const MatrixXd& B, const PointDistance& dist) {
  require(A.rows() > 0 && B.rows() > 0, ErrorKind::Validation, "dtwd needs nonempty sequences");
  require(A.cols() == B.cols(), ErrorKind::Dimension, "dtwd sequences have different dimension");
  MatrixXd D(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j)
      D(i, j) = dist(A.row(i).transpose(), B.row(j).transpose());
  return D.colwise().minCoeff().mean() + D.rowwise().minCoeff().mean();
}

inline double dtwd_ambient(const MatrixXd& A, const MatrixXd& B) {
  return dtwd(A, B, [](const VectorXd& a, const VectorXd& b) { return (a - b).norm(); });
}

inline double dtwd_manifold(const manifolds::ManifoldSpec& spec, const MatrixXd& A,
                            const MatrixXd& B) {
  return dtwd(A, B, [&spec](const VectorXd& a, const VectorXd& b) {
    return manifolds::distance({spec, a}, {spec, b});
  });
}

inline double on_manifold_fraction(const manifolds::ManifoldSpec& spec, const MatrixXd& points,
                                   double tol = 1e-6) {
  if (points.rows() == 0) return 1.0;
  Eigen::Index ok = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    if (manifolds::project_check(spec, points.row(i).transpose(), tol)) ++ok;
  return static_cast<double>(ok) / static_cast<double>(points.rows());
}

// ---- trajectory interpolation benchmark ----
//
// Every variant reconstructs each held trajectory from its two endpoints
// alone: a latent curve between the endpoint latents is decoded and compared
// to the full trajectory. Flat-space variants measure in ambient coordinates
// (which can only favor them, chords never exceed arcs); wrapped variants
// measure along the manifold.

struct BenchmarkOptions {
  synthetic::Scenario scenario = synthetic::Scenario::PlanarJSphereC;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int trajectories = 6;
  int points_per_trajectory = 16;
  int iterations = 800;
  double learning_rate = 0.025;
  bool gpdm = true;  // all variants get the latent dynamics prior
  int grid_res = 24;
  int curve_samples = 100;
  double grid_pad = 0.1;
  double kde_bandwidth_scale = 0.25;  // relative to the rms latent radius
};

struct VariantStats {
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;        // sample standard deviation across seeds
  double on_manifold = 1.0;   // pooled fraction over all decoded curve points
};

struct BenchmarkReport {
  std::string scenario;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, VariantStats> variants;
  double pullback_vs_straight = 0.0;  // wrapped_pullback mean / wrapped mean
};

inline void to_json(nlohmann::json& j, const VariantStats& s) {
  j = nlohmann::json{{"per_seed", s.per_seed},
                     {"mean", s.mean},
                     {"stddev", s.stddev},
                     {"on_manifold", s.on_manifold}};
}

inline void from_json(const nlohmann::json& j, VariantStats& s) {
  s.per_seed = j.at("per_seed").get<std::vector<double>>();
  s.mean = j.at("mean").get<double>();
  s.stddev = j.at("stddev").get<double>();
  s.on_manifold = j.at("on_manifold").get<double>();
}

inline void to_json(nlohmann::json& j, const BenchmarkReport& r) {
  j = nlohmann::json{{"schema", "geolvm-benchmark-v1"},
                     {"scenario", r.scenario},
                     {"seeds", r.seeds},
                     {"variants", r.variants},
                     {"pullback_vs_straight", r.pullback_vs_straight}};
}

inline void from_json(const nlohmann::json& j, BenchmarkReport& r) {
  r.scenario = j.at("scenario").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.variants = j.at("variants").get<std::map<std::string, VariantStats>>();
  r.pullback_vs_straight = j.at("pullback_vs_straight").get<double>();
}

inline std::string benchmark_markdown(const BenchmarkReport& r) {
  std::string md = "| variant | mean | stddev | on-manifold |\n";
  md += "|---|---|---|---|\n";
  for (const auto& [name, s] : r.variants) {
    md += "| " + name + " | " + io::format_double(s.mean) + " | " + io::format_double(s.stddev) +
          " | " + io::format_double(s.on_manifold) + " |\n";
  }
  md += "\nwrapped_pullback / wrapped mean ratio: " + io::format_double(r.pullback_vs_straight) + "\n";
  return md;
}

namespace detail {

inline MatrixXd straight_line(const VectorXd& a, const VectorXd& b, int samples) {
  MatrixXd pts(samples, a.size());
  for (int i = 0; i < samples; ++i) {
    const double t = static_cast<double>(i) / (samples - 1);
    pts.row(i) = ((1.0 - t) * a + t * b).transpose();
  }
  return pts;
}

inline pullback::Lattice latent_lattice(const MatrixXd& X, int res, double pad) {
  pullback::Bounds2 b;
  b.x0_min = X.col(0).minCoeff();
  b.x0_max = X.col(0).maxCoeff();
  b.x1_min = X.col(1).minCoeff();
  b.x1_max = X.col(1).maxCoeff();
  const double w0 = std::max(b.x0_max - b.x0_min, 1e-6);
  const double w1 = std::max(b.x1_max - b.x1_min, 1e-6);
  b.x0_min -= pad * w0;
  b.x0_max += pad * w0;
  b.x1_min -= pad * w1;
  b.x1_max += pad * w1;
  return pullback::Lattice(b, res);
}

struct SeedAccumulator {
  double sum = 0.0;
  int count = 0;
  Eigen::Index on = 0, total = 0;
};

}  // namespace detail

inline BenchmarkReport run_benchmark(const BenchmarkOptions& opt) {
  require(!opt.seeds.empty(), ErrorKind::Config, "benchmark needs at least one seed");
  const std::vector<std::string> names = {"euclidean", "euclidean_pullback", "wrapped",
                                          "wrapped_pullback", "kde"};
  const manifolds::ManifoldSpec spec = synthetic::scenario_spec(opt.scenario);
  const manifolds::ManifoldSpec flat = manifolds::ManifoldSpec::euclidean(spec.ambient_dim());

  BenchmarkReport report;
  report.scenario = synthetic::scenario_name(opt.scenario);
  report.seeds = opt.seeds;
  std::map<std::string, std::vector<double>> per_seed;
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> manifold_counts;
  for (const auto& n : names) manifold_counts[n] = {0, 0};

  for (const std::uint64_t seed : opt.seeds) {
    synthetic::GenerateOptions gen;
    gen.scenario = opt.scenario;
    gen.seed = seed;
    gen.trajectories = opt.trajectories;
    gen.points_per_trajectory = opt.points_per_trajectory;
    const lvm::Dataset ds = synthetic::generate(gen);

    lvm::ModelConfig cfg;
    cfg.latent_dim = 2;
    cfg.iterations = opt.iterations;
    cfg.learning_rate = opt.learning_rate;
    cfg.gpdm = opt.gpdm;
    cfg.seed = seed;

    lvm::Dataset flat_ds;
    flat_ds.spec = flat;
    flat_ds.points = ds.points;
    flat_ds.trajectory_ids = ds.trajectory_ids;

    auto wrapped = std::make_shared<const lvm::LatentModel>(lvm::train_map(ds, cfg));
    auto flat_model = std::make_shared<const lvm::LatentModel>(lvm::train_map(flat_ds, cfg));

    const pullback::Lattice lat_w =
        detail::latent_lattice(wrapped->X, opt.grid_res, opt.grid_pad);
    const pullback::Lattice lat_f =
        detail::latent_lattice(flat_model->X, opt.grid_res, opt.grid_pad);
    auto grid_w = std::make_shared<const pullback::MetricGrid>(
        pullback::compute_metric_grid(pullback::pullback_metric_fn(wrapped), lat_w));
    auto grid_f = std::make_shared<const pullback::MetricGrid>(
        pullback::compute_metric_grid(pullback::pullback_metric_fn(flat_model), lat_f));
    const pullback::MetricFn metric_w = geodesics::interpolate_metric(grid_w);
    const pullback::MetricFn metric_f = geodesics::interpolate_metric(grid_f);
    const double rms =
        std::sqrt(wrapped->X.squaredNorm() / static_cast<double>(wrapped->X.rows()));
    const pullback::MetricFn metric_kde = pullback::kde_metric_fn(
        pullback::KdeMetric(wrapped->X, opt.kde_bandwidth_scale * rms));

    std::map<std::string, detail::SeedAccumulator> acc;
    for (const auto& [start, len] : ds.trajectories()) {
      const MatrixXd truth = ds.points.middleRows(start, len);
      const VectorXd aw = wrapped->X.row(start).transpose();
      const VectorXd bw = wrapped->X.row(start + len - 1).transpose();
      const VectorXd af = flat_model->X.row(start).transpose();
      const VectorXd bf = flat_model->X.row(start + len - 1).transpose();

      auto score = [&](const std::string& name, const lvm::LatentModel& model,
                       const MatrixXd& latent_curve, bool manifold_distance) {
        const MatrixXd decoded = geodesics::decode_curve(model, latent_curve);
        const double d = manifold_distance ? dtwd_manifold(spec, decoded, truth)
                                           : dtwd_ambient(decoded, truth);
        auto& a = acc[name];
        a.sum += d;
        a.count += 1;
        for (Eigen::Index i = 0; i < decoded.rows(); ++i)
          if (manifolds::project_check(spec, decoded.row(i).transpose(), 1e-6)) ++a.on;
        a.total += decoded.rows();
      };

      score("euclidean", *flat_model, detail::straight_line(af, bf, opt.curve_samples), false);
      score("euclidean_pullback", *flat_model,
            geodesics::graph_geodesic(metric_f, lat_f, af, bf).points, false);
      score("wrapped", *wrapped, detail::straight_line(aw, bw, opt.curve_samples), true);
      score("wrapped_pullback", *wrapped,
            geodesics::graph_geodesic(metric_w, lat_w, aw, bw).points, true);
      score("kde", *wrapped, geodesics::graph_geodesic(metric_kde, lat_w, aw, bw).points, true);
    }

    for (const auto& n : names) {
      const auto& a = acc[n];
      per_seed[n].push_back(a.sum / static_cast<double>(a.count));
      manifold_counts[n].first += a.on;
      manifold_counts[n].second += a.total;
    }
  }

  for (const auto& n : names) {
    VariantStats s;
    s.per_seed = per_seed[n];
    s.mean = std::accumulate(s.per_seed.begin(), s.per_seed.end(), 0.0) /
             static_cast<double>(s.per_seed.size());
    double ss = 0.0;
    for (double v : s.per_seed) ss += (v - s.mean) * (v - s.mean);
    s.stddev = s.per_seed.size() > 1
                   ? std::sqrt(ss / static_cast<double>(s.per_seed.size() - 1))
                   : 0.0;
    s.on_manifold = static_cast<double>(manifold_counts[n].first) /
                    static_cast<double>(manifold_counts[n].second);
    report.variants[n] = s;
  }
  report.pullback_vs_straight =
      report.variants.at("wrapped_pullback").mean / report.variants.at("wrapped").mean;
  return report;
}

}  // namespace geolvm::eval
