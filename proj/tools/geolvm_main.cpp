#include <CLI11.hpp>

#include <exception>
#include <iostream>

#include "geolvm/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"latent variable models with geometry-aware decoders"};
  app.set_version_flag("--version", geolvm::cli::kVersion);
  app.require_subcommand(1);

  geolvm::cli::GenerateDataArgs gen;
  CLI::App* cgen = app.add_subcommand("generate-data", "write a synthetic trajectory dataset");
  cgen->add_option("--scenario", gen.scenario, "planar_j_sphere_c or planar_c_spd_profile");
  cgen->add_option("--seed", gen.seed, "rng seed");
  cgen->add_option("--trajectories", gen.trajectories, "number of trajectories");
  cgen->add_option("--points", gen.points, "points per trajectory");
  cgen->add_option("--noise", gen.noise, "tangent noise scale");
  cgen->add_option("--out", gen.out, "output dataset json");

  geolvm::cli::TrainArgs train;
  CLI::App* ctrain = app.add_subcommand("train", "fit a latent variable model to a dataset");
  ctrain->add_option("--data", train.data, "dataset json")->required();
  ctrain->add_option("--out", train.out, "output model json");
  ctrain->add_option("--latent-dim", train.latent_dim, "latent dimension");
  ctrain->add_option("--iterations", train.iterations, "optimizer iterations");
  ctrain->add_option("--lr", train.learning_rate, "optimizer step size");
  ctrain->add_option("--seed", train.seed, "rng seed for initialization");
  ctrain->add_flag("--gpdm", train.gpdm, "first-order latent dynamics prior");
  ctrain->add_flag("--gamma-lengthscale", train.gamma_lengthscale,
                   "Gamma(2,2) prior on kernel lengthscales");
  ctrain->add_flag("--back-constraints", train.back_constraints,
                   "parameterize latents through a data-space kernel");
  ctrain->add_option("--task-rank", train.task_rank, "rank of the task covariance (-1: full)");
  ctrain->add_option("--init-noise", train.init_noise, "initial noise variance");

  geolvm::cli::MetricGridArgs grid;
  CLI::App* cgrid = app.add_subcommand("metric-grid", "evaluate a latent metric on a lattice");
  cgrid->add_option("--model", grid.model, "model json")->required();
  cgrid->add_option("--out", grid.out, "output csv");
  cgrid->add_option("--metric", grid.metric, "pullback, kde, or identity");
  cgrid->add_option("--kde-bandwidth", grid.kde_bandwidth, "kde bandwidth");
  cgrid->add_option("--res", grid.res, "lattice resolution");
  cgrid->add_option("--pad", grid.pad, "relative padding around the latents");
  cgrid->add_option("--x0-min", grid.x0_min, "override lattice bound");
  cgrid->add_option("--x0-max", grid.x0_max, "override lattice bound");
  cgrid->add_option("--x1-min", grid.x1_min, "override lattice bound");
  cgrid->add_option("--x1-max", grid.x1_max, "override lattice bound");

  geolvm::cli::GeodesicArgs geo;
  CLI::App* cgeo = app.add_subcommand("geodesic", "shortest curve between two latent points");
  cgeo->add_option("--model", geo.model, "model json")->required();
  cgeo->add_option("--from", geo.from, "start latent point, e.g. -0.5,0.2")->required();
  cgeo->add_option("--to", geo.to, "end latent point")->required();
  cgeo->add_option("--out", geo.out, "output csv");
  cgeo->add_option("--metric", geo.metric, "pullback, kde, or identity");
  cgeo->add_option("--solver", geo.solver, "graph or spline");
  cgeo->add_option("--kde-bandwidth", geo.kde_bandwidth, "kde bandwidth");
  cgeo->add_option("--res", geo.res, "lattice resolution for the graph solver");
  cgeo->add_option("--samples", geo.samples, "curve samples for the spline solver");
  cgeo->add_option("--control-points", geo.control_points, "spline control points");
  cgeo->add_option("--iterations", geo.iterations, "spline optimizer iterations");

  geolvm::cli::DecodeArgs dec;
  CLI::App* cdec = app.add_subcommand("decode", "map a latent point to the data manifold");
  cdec->add_option("--model", dec.model, "model json")->required();
  cdec->add_option("--point", dec.point, "latent point, e.g. 0.1,0.3")->required();
  cdec->add_option("--out", dec.out, "optional output json");

  geolvm::cli::BenchmarkArgs bench;
  CLI::App* cbench = app.add_subcommand("benchmark", "trajectory interpolation comparison");
  cbench->add_option("--scenario", bench.scenario, "planar_j_sphere_c or planar_c_spd_profile");
  cbench->add_option("--seeds", bench.seeds, "dataset seeds")->delimiter(',');
  cbench->add_option("--trajectories", bench.trajectories, "trajectories per dataset");
  cbench->add_option("--points", bench.points, "points per trajectory");
  cbench->add_option("--iterations", bench.iterations, "training iterations per model");
  cbench->add_flag("--gpdm,!--no-gpdm", bench.gpdm, "latent dynamics prior (default on)");
  cbench->add_option("--grid-res", bench.grid_res, "metric lattice resolution");
  cbench->add_option("--out", bench.out, "output report json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cgen->parsed()) geolvm::cli::cmd_generate_data(gen);
    if (ctrain->parsed()) geolvm::cli::cmd_train(train);
    if (cgrid->parsed()) geolvm::cli::cmd_metric_grid(grid);
    if (cgeo->parsed()) geolvm::cli::cmd_geodesic(geo);
    if (cdec->parsed()) geolvm::cli::cmd_decode(dec);
    if (cbench->parsed()) geolvm::cli::cmd_benchmark(bench);
  } catch (const geolvm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return geolvm::exit_code_for(e.kind);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
