#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>

#include "geolvm/commands.hpp"
#include "geolvm/errors.hpp"
#include "geolvm/io.hpp"

namespace fs = std::filesystem;
namespace gio = geolvm::io;
namespace cli = geolvm::cli;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("double formatting round-trips bitwise", "[io]") {
  for (double x : {0.1, 1.0 / 3.0, -0.0, 1e-300, 6.02214076e23, 2.0, -17.25,
                   0.30000000000000004}) {
    const double back = std::stod(gio::format_double(x));
    CHECK(std::memcmp(&back, &x, sizeof x) == 0);
  }
}

TEST_CASE("atomic writes land complete and readable", "[io]") {
  const fs::path dir = fresh_dir("geolvm_io_atomic");
  const fs::path f = dir / "payload.txt";
  gio::atomic_write(f, "first\n");
  CHECK(gio::read_file(f) == "first\n");
  gio::atomic_write(f, "second\n");
  CHECK(gio::read_file(f) == "second\n");
  CHECK_THROWS_AS(gio::read_file(dir / "missing.txt"), geolvm::Error);
  try {
    gio::read_file(dir / "missing.txt");
  } catch (const geolvm::Error& e) {
    CHECK(e.kind == geolvm::ErrorKind::Io);
  }
}

TEST_CASE("content digests are stable", "[io]") {
  CHECK(gio::fnv1a64("abc") == 0xe71fa2190541574bULL);
  CHECK(gio::hex_digest("abc") == "e71fa2190541574b");
  CHECK(gio::hex_digest("") != gio::hex_digest("x"));
}

TEST_CASE("csv writing and parsing round-trip", "[io]") {
  gio::CsvWriter w({"a", "b"});
  w.row({0.1, -2.5});
  w.row({1.0 / 3.0, 4.0});
  const gio::CsvTable t = gio::read_csv(w.str());
  REQUIRE(t.header == std::vector<std::string>{"a", "b"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][0] == 0.1);
  CHECK(t.rows[0][1] == -2.5);
  CHECK(t.rows[1][0] == 1.0 / 3.0);
  CHECK(t.rows[1][1] == 4.0);
}

TEST_CASE("vector parsing accepts lists and rejects junk", "[io]") {
  const Eigen::VectorXd v = cli::detail::parse_vector("1.5,-2,0.25");
  REQUIRE(v.size() == 3);
  CHECK(v(0) == 1.5);
  CHECK(v(1) == -2.0);
  CHECK(v(2) == 0.25);
  CHECK_THROWS_AS(cli::detail::parse_vector("1.5,abc"), geolvm::Error);
  CHECK_THROWS_AS(cli::detail::parse_vector(""), geolvm::Error);
  CHECK_THROWS_AS(cli::detail::parse_vector("1.5x,2"), geolvm::Error);
}

TEST_CASE("error kinds map to distinct exit codes", "[io]") {
  CHECK(geolvm::exit_code_for(geolvm::ErrorKind::Numerical) == 3);
  CHECK(geolvm::exit_code_for(geolvm::ErrorKind::Config) == 2);
  CHECK(geolvm::exit_code_for(geolvm::ErrorKind::Io) == 2);
  CHECK(geolvm::exit_code_for(geolvm::ErrorKind::Domain) == 2);
}

TEST_CASE("command pipeline writes artifacts with verifiable manifests", "[io][slow]") {
  const fs::path dir = fresh_dir("geolvm_io_pipeline");
  std::ostringstream log;

  cli::GenerateDataArgs gen;
  gen.scenario = "planar_j_sphere_c";
  gen.seed = 5;
  gen.trajectories = 3;
  gen.points = 6;
  gen.out = (dir / "data.json").string();
  cli::cmd_generate_data(gen, log);
  REQUIRE(fs::exists(dir / "data.json"));

  // every artifact carries a sidecar manifest whose digest matches the bytes
  auto check_manifest = [&](const fs::path& p, const std::string& command) {
    const fs::path meta = p.string() + ".meta.json";
    REQUIRE(fs::exists(meta));
    const nlohmann::json j = nlohmann::json::parse(gio::read_file(meta));
    CHECK(j.at("command").get<std::string>() == command);
    CHECK(j.at("version").get<std::string>() == std::string(cli::kVersion));
    CHECK(j.at("digest").get<std::string>() == gio::hex_digest(gio::read_file(p)));
    CHECK(j.contains("parameters"));
  };
  check_manifest(dir / "data.json", "generate-data");

  cli::TrainArgs train;
  train.data = (dir / "data.json").string();
  train.out = (dir / "model.json").string();
  train.iterations = 40;
  train.seed = 1;
  cli::cmd_train(train, log);
  check_manifest(dir / "model.json", "train");
  const auto model = nlohmann::json::parse(gio::read_file(dir / "model.json"));
  CHECK(model.at("schema").get<std::string>() == "geolvm-model-v1");

  cli::MetricGridArgs grid;
  grid.model = (dir / "model.json").string();
  grid.out = (dir / "grid.csv").string();
  grid.metric = "kde";
  grid.res = 6;
  cli::cmd_metric_grid(grid, log);
  check_manifest(dir / "grid.csv", "metric-grid");
  const gio::CsvTable t = gio::read_csv(gio::read_file(dir / "grid.csv"));
  CHECK(t.header.front() == "ix");
  CHECK(t.header.back() == "magnification");
  CHECK(t.rows.size() == 36);

  cli::GeodesicArgs geo;
  geo.model = (dir / "model.json").string();
  geo.from = "-0.5,-0.5";
  geo.to = "0.5,0.5";
  geo.out = (dir / "curve.csv").string();
  geo.metric = "pullback";
  geo.solver = "graph";
  geo.res = 8;
  cli::cmd_geodesic(geo, log);
  check_manifest(dir / "curve.csv", "geodesic");
  const gio::CsvTable c = gio::read_csv(gio::read_file(dir / "curve.csv"));
  CHECK(c.header.size() == 4 + 5);  // i, t, latent pair, five ambient coords
  CHECK(c.rows.size() >= 2);
  const auto cmeta = nlohmann::json::parse(gio::read_file(dir / "curve.csv.meta.json"));
  CHECK(cmeta.at("parameters").contains("length"));
  CHECK(cmeta.at("parameters").contains("energy"));

  cli::GeodesicArgs spline = geo;
  spline.solver = "spline";
  spline.out = (dir / "spline.csv").string();
  spline.iterations = 30;
  spline.samples = 20;
  cli::cmd_geodesic(spline, log);
  const gio::CsvTable sc = gio::read_csv(gio::read_file(dir / "spline.csv"));
  CHECK(sc.rows.size() == 20);

  cli::DecodeArgs dec;
  dec.model = (dir / "model.json").string();
  dec.point = "0.2,-0.1";
  dec.out = (dir / "decoded.json").string();
  std::ostringstream dec_out;
  cli::cmd_decode(dec, dec_out);
  const auto dj = nlohmann::json::parse(dec_out.str());
  CHECK(dj.at("latent").size() == 2);
  CHECK(dj.at("point").size() == 5);
  CHECK(dj.contains("cov_trace"));
  // stdout and the written file carry the same payload
  const auto fj = nlohmann::json::parse(gio::read_file(dir / "decoded.json"));
  CHECK(fj == dj);

  // unknown metric or solver names fail loudly
  cli::MetricGridArgs bad = grid;
  bad.metric = "banana";
  CHECK_THROWS_AS(cli::cmd_metric_grid(bad, log), geolvm::Error);
  cli::GeodesicArgs bads = geo;
  bads.solver = "banana";
  CHECK_THROWS_AS(cli::cmd_geodesic(bads, log), geolvm::Error);

  fs::remove_all(dir);
}

TEST_CASE("tiny benchmark command writes report and summary", "[io][slow]") {
  const fs::path dir = fresh_dir("geolvm_io_bench");
  std::ostringstream log;
  cli::BenchmarkArgs bench;
  bench.scenario = "planar_c_spd_profile";
  bench.seeds = {0};
  bench.trajectories = 2;
  bench.points = 6;
  bench.iterations = 30;
  bench.grid_res = 6;
  bench.out = (dir / "report.json").string();
  cli::cmd_benchmark(bench, log);
  REQUIRE(fs::exists(dir / "report.json"));
  REQUIRE(fs::exists(dir / "report.md"));
  const auto rj = nlohmann::json::parse(gio::read_file(dir / "report.json"));
  CHECK(rj.at("schema").get<std::string>() == "geolvm-benchmark-v1");
  CHECK(rj.at("variants").size() == 5);
  CHECK(log.str().find("ratio") != std::string::npos);
  fs::remove_all(dir);
}
