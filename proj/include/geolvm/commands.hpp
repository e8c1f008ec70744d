#pragma once

#include <Eigen/Dense>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geolvm/errors.hpp"
#include "geolvm/eval.hpp"
#include "geolvm/geodesics.hpp"
#include "geolvm/io.hpp"
#include "geolvm/lvm.hpp"
#include "geolvm/pullback.hpp"
#include "geolvm/synthetic.hpp"

namespace geolvm::cli {

inline constexpr const char* kVersion = "0.1.0";

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace detail {

inline VectorXd parse_vector(const std::string& text) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(tok, &pos);
      while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
      require(pos == tok.size(), ErrorKind::Validation, "trailing characters in number: " + tok);
      vals.push_back(v);
    } catch (const std::invalid_argument&) {
      fail(ErrorKind::Validation, "not a number: " + tok);
    } catch (const std::out_of_range&) {
      fail(ErrorKind::Validation, "number out of range: " + tok);
    }
  }
  require(!vals.empty(), ErrorKind::Validation, "empty vector literal");
  VectorXd v(static_cast<Eigen::Index>(vals.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = vals[i];
  return v;
}

inline void write_with_manifest(const std::filesystem::path& path, const std::string& content,
                                const std::string& command, const nlohmann::json& parameters) {
  io::atomic_write(path, content);
  nlohmann::json meta = {{"command", command},
                         {"version", kVersion},
                         {"digest", io::hex_digest(content)},
                         {"parameters", parameters}};
  io::atomic_write(path.string() + ".meta.json", meta.dump(2) + "\n");
}

inline lvm::Dataset load_dataset(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Io, "cannot parse dataset json: " + std::string(e.what()));
  }
  return j.get<lvm::Dataset>();
}

inline lvm::LatentModel load_model(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Io, "cannot parse model json: " + std::string(e.what()));
  }
  return j.get<lvm::LatentModel>();
}

inline pullback::MetricFn make_metric(const std::string& name,
                                      std::shared_ptr<const lvm::LatentModel> model,
                                      double kde_bandwidth) {
  if (name == "pullback") return pullback::pullback_metric_fn(model);
  if (name == "kde") return pullback::kde_metric_fn(pullback::KdeMetric(model->X, kde_bandwidth));
  if (name == "identity") return pullback::identity_metric_fn(model->latent_dim);
  fail(ErrorKind::Config, "unknown metric: " + name + " (pullback, kde, identity)");
}

inline pullback::Lattice auto_lattice(const MatrixXd& X, int res, double pad,
                                      const std::vector<VectorXd>& include = {}) {
  pullback::Bounds2 b;
  b.x0_min = X.col(0).minCoeff();
  b.x0_max = X.col(0).maxCoeff();
  b.x1_min = X.col(1).minCoeff();
  b.x1_max = X.col(1).maxCoeff();
  for (const VectorXd& p : include) {
    b.x0_min = std::min(b.x0_min, p(0));
    b.x0_max = std::max(b.x0_max, p(0));
    b.x1_min = std::min(b.x1_min, p(1));
    b.x1_max = std::max(b.x1_max, p(1));
  }
  const double w0 = std::max(b.x0_max - b.x0_min, 1e-6);
  const double w1 = std::max(b.x1_max - b.x1_min, 1e-6);
  b.x0_min -= pad * w0;
  b.x0_max += pad * w0;
  b.x1_min -= pad * w1;
  b.x1_max += pad * w1;
  return pullback::Lattice(b, res);
}

}  // namespace detail

struct GenerateDataArgs {
  std::string scenario = "planar_j_sphere_c";
  std::uint64_t seed = 0;
  int trajectories = 6;
  int points = 16;
  double noise = 0.03;
  std::string out = "data.json";
};

inline void cmd_generate_data(const GenerateDataArgs& args, std::ostream& os = std::cout) {
  synthetic::GenerateOptions opt;
  opt.scenario = synthetic::scenario_from_name(args.scenario);
  opt.seed = args.seed;
  opt.trajectories = args.trajectories;
  opt.points_per_trajectory = args.points;
  opt.noise = args.noise;
  const lvm::Dataset ds = synthetic::generate(opt);
  nlohmann::json j = ds;
  nlohmann::json params = {{"scenario", args.scenario}, {"seed", args.seed},
                           {"trajectories", args.trajectories}, {"points", args.points},
                           {"noise", args.noise}};
  detail::write_with_manifest(args.out, j.dump(2) + "\n", "generate-data", params);
  os << "wrote " << args.out << ": " << ds.n() << " points, " << ds.trajectories().size()
     << " trajectories, ambient dim " << ds.spec.ambient_dim() << "\n";
}

struct TrainArgs {
  std::string data;
  std::string out = "model.json";
  int latent_dim = 2;
  int iterations = 1000;
  double learning_rate = 0.025;
  std::uint64_t seed = 0;
  bool gpdm = false;
  bool gamma_lengthscale = false;
  bool back_constraints = false;
  int task_rank = -1;
  double init_noise = 1e-2;
};

inline void cmd_train(const TrainArgs& args, std::ostream& os = std::cout) {
  require(!args.data.empty(), ErrorKind::Config, "train needs --data");
  const lvm::Dataset ds = detail::load_dataset(args.data);
  lvm::ModelConfig cfg;
  cfg.latent_dim = args.latent_dim;
  cfg.iterations = args.iterations;
  cfg.learning_rate = args.learning_rate;
  cfg.seed = args.seed;
  cfg.gpdm = args.gpdm;
  cfg.gamma_lengthscale = args.gamma_lengthscale;
  cfg.back_constraints = args.back_constraints;
  cfg.task_rank = args.task_rank;
  cfg.init_noise = args.init_noise;
  const lvm::LatentModel model = lvm::train_map(ds, cfg);
  nlohmann::json params = {{"data", args.data}, {"latent_dim", args.latent_dim},
                           {"iterations", args.iterations}, {"learning_rate", args.learning_rate},
                           {"seed", args.seed}, {"gpdm", args.gpdm},
                           {"gamma_lengthscale", args.gamma_lengthscale},
                           {"back_constraints", args.back_constraints},
                           {"task_rank", args.task_rank}, {"init_noise", args.init_noise}};
  detail::write_with_manifest(args.out, lvm::model_to_string(model), "train", params);
  os << "wrote " << args.out << ": objective "
     << io::format_double(model.objective_trace.empty() ? 0.0 : model.objective_trace.back())
     << " after " << model.objective_trace.size() << " iterations\n";
  for (const auto& w : model.warnings) os << "warning: " << w << "\n";
}

struct MetricGridArgs {
  std::string model;
  std::string out = "grid.csv";
  std::string metric = "pullback";
  double kde_bandwidth = 0.25;
  int res = 32;
  double pad = 0.1;
  // overrides for the automatic bounds; NaN means unset
  double x0_min = std::numeric_limits<double>::quiet_NaN();
  double x0_max = std::numeric_limits<double>::quiet_NaN();
  double x1_min = std::numeric_limits<double>::quiet_NaN();
  double x1_max = std::numeric_limits<double>::quiet_NaN();
};

inline void cmd_metric_grid(const MetricGridArgs& args, std::ostream& os = std::cout) {
  require(!args.model.empty(), ErrorKind::Config, "metric-grid needs --model");
  auto model = std::make_shared<const lvm::LatentModel>(detail::load_model(args.model));
  require(model->latent_dim == 2, ErrorKind::Config, "metric grids need a 2d latent space");
  pullback::Lattice lat = detail::auto_lattice(model->X, args.res, args.pad);
  if (!std::isnan(args.x0_min)) lat.bounds.x0_min = args.x0_min;
  if (!std::isnan(args.x0_max)) lat.bounds.x0_max = args.x0_max;
  if (!std::isnan(args.x1_min)) lat.bounds.x1_min = args.x1_min;
  if (!std::isnan(args.x1_max)) lat.bounds.x1_max = args.x1_max;
  lat = pullback::Lattice(lat.bounds, args.res);
  const pullback::MetricFn metric = detail::make_metric(args.metric, model, args.kde_bandwidth);
  const pullback::MetricGrid grid = pullback::compute_metric_grid(metric, lat);
  const std::string csv = pullback::metric_grid_csv(grid);
  nlohmann::json params = {{"model", args.model}, {"metric", args.metric},
                           {"kde_bandwidth", args.kde_bandwidth}, {"res", args.res},
                           {"bounds", lat.bounds}};
  detail::write_with_manifest(args.out, csv, "metric-grid", params);
  os << "wrote " << args.out << ": " << lat.size() << " nodes\n";
}

struct GeodesicArgs {
  std::string model;
  std::string from;  // "x0,x1"
  std::string to;
  std::string out = "curve.csv";
  std::string metric = "pullback";
  std::string solver = "graph";  // graph or spline
  double kde_bandwidth = 0.25;
  int res = 32;
  double pad = 0.1;
  int samples = 100;
  int control_points = 8;
  int iterations = 500;
};

inline void cmd_geodesic(const GeodesicArgs& args, std::ostream& os = std::cout) {
  require(!args.model.empty(), ErrorKind::Config, "geodesic needs --model");
  require(!args.from.empty() && !args.to.empty(), ErrorKind::Config,
          "geodesic needs --from and --to");
  auto model = std::make_shared<const lvm::LatentModel>(detail::load_model(args.model));
  require(model->latent_dim == 2, ErrorKind::Config, "geodesic search needs a 2d latent space");
  const VectorXd a = detail::parse_vector(args.from);
  const VectorXd b = detail::parse_vector(args.to);
  require(a.size() == 2 && b.size() == 2, ErrorKind::Validation,
          "endpoints must be 2d latent points");
  const pullback::MetricFn metric = detail::make_metric(args.metric, model, args.kde_bandwidth);

  geodesics::GeodesicCurve curve;
  if (args.solver == "graph") {
    const pullback::Lattice lat = detail::auto_lattice(model->X, args.res, args.pad, {a, b});
    curve = geodesics::graph_geodesic(metric, lat, a, b);
  } else if (args.solver == "spline") {
    geodesics::SplineOptions sopt;
    sopt.samples = args.samples;
    sopt.control_points = args.control_points;
    sopt.iterations = args.iterations;
    curve = geodesics::spline_geodesic(metric, a, b, sopt);
  } else {
    fail(ErrorKind::Config, "unknown solver: " + args.solver + " (graph, spline)");
  }

  const MatrixXd decoded = geodesics::decode_curve(*model, curve.points);
  std::vector<std::string> header = {"i", "t", "x0", "x1"};
  for (int c = 0; c < model->spec.ambient_dim(); ++c) header.push_back("y" + std::to_string(c));
  io::CsvWriter w(header);
  const Eigen::Index T = curve.points.rows();
  for (Eigen::Index i = 0; i < T; ++i) {
    std::vector<double> row = {static_cast<double>(i),
                               static_cast<double>(i) / static_cast<double>(T - 1),
                               curve.points(i, 0), curve.points(i, 1)};
    for (Eigen::Index c = 0; c < decoded.cols(); ++c) row.push_back(decoded(i, c));
    w.row(row);
  }
  nlohmann::json params = {{"model", args.model}, {"from", args.from}, {"to", args.to},
                           {"metric", args.metric}, {"solver", args.solver},
                           {"length", curve.length}, {"energy", curve.energy}};
  detail::write_with_manifest(args.out, w.str(), "geodesic", params);
  os << "wrote " << args.out << ": length " << io::format_double(curve.length) << ", energy "
     << io::format_double(curve.energy) << "\n";
}

struct DecodeArgs {
  std::string model;
  std::string point;  // "x0,x1"
  std::string out;    // empty: stdout only
};

inline void cmd_decode(const DecodeArgs& args, std::ostream& os = std::cout) {
  require(!args.model.empty(), ErrorKind::Config, "decode needs --model");
  require(!args.point.empty(), ErrorKind::Config, "decode needs --point");
  const lvm::LatentModel model = detail::load_model(args.model);
  const VectorXd x = detail::parse_vector(args.point);
  require(x.size() == model.latent_dim, ErrorKind::Validation,
          "latent point has wrong dimension");
  const lvm::Posterior post = lvm::predict(model, x);
  const manifolds::ManifoldPoint y = manifolds::exp_map(model.basepoint, post.mean);
  nlohmann::json j = {{"latent", std::vector<double>(x.data(), x.data() + x.size())},
                      {"tangent_mean", std::vector<double>(post.mean.data(),
                                                           post.mean.data() + post.mean.size())},
                      {"point", std::vector<double>(y.coords.data(),
                                                    y.coords.data() + y.coords.size())},
                      {"cov_trace", post.cov.trace()}};
  const std::string text = j.dump(2) + "\n";
  if (!args.out.empty()) {
    detail::write_with_manifest(args.out, text, "decode",
                                nlohmann::json{{"model", args.model}, {"point", args.point}});
  }
  os << text;
}

struct BenchmarkArgs {
  std::string scenario = "planar_j_sphere_c";
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int trajectories = 6;
  int points = 16;
  int iterations = 800;
  bool gpdm = true;
  int grid_res = 24;
  std::string out = "report.json";
};

inline void cmd_benchmark(const BenchmarkArgs& args, std::ostream& os = std::cout) {
  eval::BenchmarkOptions opt;
  opt.scenario = synthetic::scenario_from_name(args.scenario);
  opt.seeds = args.seeds;
  opt.trajectories = args.trajectories;
  opt.points_per_trajectory = args.points;
  opt.iterations = args.iterations;
  opt.gpdm = args.gpdm;
  opt.grid_res = args.grid_res;
  const eval::BenchmarkReport report = eval::run_benchmark(opt);
  nlohmann::json j = report;
  nlohmann::json params = {{"scenario", args.scenario}, {"seeds", args.seeds},
                           {"trajectories", args.trajectories}, {"points", args.points},
                           {"iterations", args.iterations}, {"gpdm", args.gpdm},
                           {"grid_res", args.grid_res}};
  detail::write_with_manifest(args.out, j.dump(2) + "\n", "benchmark", params);
  const std::filesystem::path md_path = std::filesystem::path(args.out).replace_extension(".md");
  io::atomic_write(md_path, eval::benchmark_markdown(report));
  os << "wrote " << args.out << " and " << md_path.string() << "\n";
  os << "wrapped_pullback / wrapped ratio: " << io::format_double(report.pullback_vs_straight)
     << "\n";
}

}  // namespace geolvm::cli
