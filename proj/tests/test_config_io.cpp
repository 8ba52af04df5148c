#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "difflab/experiment.hpp"
#include "difflab/io.hpp"

using namespace difflab;

namespace {
std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}
const std::filesystem::path kTmp = std::filesystem::temp_directory_path() / "difflab_io_test";
}  // namespace

TEST_CASE("toml subset parsing") {
  const TomlTable t = TomlTable::parse(R"(
# comment
top = 1.5
[schedule]
kind = "edm"   # trailing comment
T = 2.0
eps = 1e-3
flag = true
[data]
points = [[-1.0, 0.5],
          [1.0, -0.5]]
list = [1, 2, 3]
)");
  CHECK(t.get("", "top").as_number() == 1.5);
  CHECK(t.get("schedule", "kind").as_string() == "edm");
  CHECK(t.get("schedule", "eps").as_number() == 1e-3);
  CHECK(t.get("schedule", "flag").as_bool());
  const Mat pts = t.get("data", "points").as_matrix();
  CHECK(pts.rows() == 2);
  CHECK(pts(1, 1) == -0.5);
  CHECK(t.get("data", "list").as_number_list() == std::vector<double>{1, 2, 3});
  CHECK(t.number("schedule", "missing", 7.0) == 7.0);
  CHECK(t.integer("data", "missing", 4) == 4);

  CHECK_THROWS_AS(TomlTable::parse("key 1.0"), config_error);
  CHECK_THROWS_AS(TomlTable::parse("key = \"unterminated"), config_error);
  CHECK_THROWS_AS(TomlTable::parse("key = [1, 2"), config_error);
  CHECK_THROWS_AS(TomlTable::parse("key = 1.0 trailing"), config_error);
  CHECK_THROWS_AS(TomlTable::parse("[unclosed\nkey = 1"), config_error);
  CHECK_THROWS_AS(TomlTable::parse("key = 1.5").get("", "key").as_int(), config_error);
}

TEST_CASE("experiment config builds typed specs") {
  const auto cfg = ExperimentConfig::parse(R"(
[data]
points = [-1.0, 0.0, 1.0]
[schedule]
kind = "edm"
T = 2.0
eps = 0.05
[estimator]
kind = "linear"
features = "gaussian"
x_count = 5
t_count = 2
P = 40
[sampler]
n_steps = 50
n_traj = 10
[ensemble]
n_models = 3
seed = 42
)");
  const MixtureData data = cfg.data();
  CHECK(data.size() == 3);
  CHECK(data.dim() == 1);
  const ForwardSchedule sched = cfg.schedule(1);
  CHECK(sched.end_time() == 2.0);
  CHECK(sched.cutoff() == 0.05);
  const EnsembleSpec spec = cfg.ensemble();
  CHECK(spec.n_models == 3);
  CHECK(spec.seed == 42);
  const auto* lin = std::get_if<LinearEstimatorSpec>(&spec.estimator);
  REQUIRE(lin != nullptr);
  CHECK(lin->sample_count == 40);
  CHECK(lin->features->count() == 10);

  // seed override takes precedence
  CHECK(cfg.ensemble(std::uint64_t{7}).seed == 7);
}

TEST_CASE("config validation errors") {
  CHECK_THROWS_AS(ExperimentConfig::parse("[data]\nsigma0 = 0.1").data(), config_error);
  CHECK_THROWS_AS(ExperimentConfig::parse("[schedule]\nkind = \"warp\"").schedule(1),
                  config_error);
  CHECK_THROWS_AS(
      ExperimentConfig::parse("[schedule]\neps = 2.0\nT = 1.0").schedule(1),
      config_error);
  CHECK_THROWS_AS(
      ExperimentConfig::parse("[schedule]\nkind = \"custom\"\ng_diag = [1.0, 2.0]")
          .schedule(1),
      config_error);
  CHECK_THROWS_AS(ExperimentConfig::parse("[estimator]\nkind = \"magic\"").estimator(
                      ForwardSchedule::edm(1), 1),
                  config_error);
  CHECK_THROWS_AS(ExperimentConfig::parse("[sampler]\nn_steps = 0").sampler(), config_error);
  CHECK_THROWS_AS(ExperimentConfig::parse("[time]\nlo = 0.5\nhi = 0.1")
                      .time_dist(ForwardSchedule::edm(1)),
                  config_error);
  CHECK_THROWS_AS(ExperimentConfig::parse("[weight]\nkind = \"cubic\"")
                      .weight(ForwardSchedule::edm(1)),
                  config_error);
}

TEST_CASE("csv writer emits a pinned byte layout") {
  std::filesystem::create_directories(kTmp);
  const auto path = kTmp / "golden.csv";
  {
    CsvWriter csv(path);
    csv.header({"a", "b"});
    csv.row({1.5, -0.25});
    csv.row({1e-3, 3.0});
    csv.row_with_tag({0.5}, 77);
  }
  CHECK(slurp(path) == "a,b\n1.5,-0.25\n0.001,3\n0.5,77\n");
}

TEST_CASE("pgm writer emits P5 with min-max scaling") {
  std::filesystem::create_directories(kTmp);
  const auto path = kTmp / "img.pgm";
  Mat m(2, 2);
  m << 0.0, 1.0, 0.25, 0.5;
  write_pgm(path, m);
  const std::string bytes = slurp(path);
  CHECK(bytes.substr(0, 9) == "P5\n2 2\n25");  // "P5\n2 2\n255\n"
  REQUIRE(bytes.size() == 11 + 4);
  CHECK(static_cast<unsigned char>(bytes[11]) == 0);
  CHECK(static_cast<unsigned char>(bytes[12]) == 255);
  CHECK(static_cast<unsigned char>(bytes[13]) == 64);
  CHECK(static_cast<unsigned char>(bytes[14]) == 128);
}

TEST_CASE("points csv round trip") {
  std::filesystem::create_directories(kTmp);
  const auto path = kTmp / "points.csv";
  {
    std::ofstream out(path, std::ios::binary);
    out << "-1.0,0.5\n1.0,-0.5\n";
  }
  const Mat pts = read_points_csv(path);
  CHECK(pts.rows() == 2);
  CHECK(pts(0, 1) == 0.5);
  const auto cfg = ExperimentConfig::parse("[data]\nfile = \"" + path.string() + "\"");
  CHECK(cfg.data().dim() == 2);
  CHECK_THROWS_AS(read_points_csv(kTmp / "missing.csv"), config_error);
}

TEST_CASE("format_double round-trips") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double v = std::exp(rng.uniform(-40, 40)) * (rng.uniform() < 0.5 ? -1 : 1);
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("sample runner writes terminals with seeds") {
  const auto cfg = ExperimentConfig::parse(R"(
[data]
points = [-1.0, 1.0]
[schedule]
kind = "edm"
T = 1.0
eps = 0.01
[estimator]
kind = "naive"
kappa = 0.3
[sampler]
n_steps = 60
n_traj = 8
[ensemble]
seed = 9
)");
  const SampleRunResult r = run_sample(cfg.ensemble(), true, 2);
  CHECK(r.terminals.rows() == 8);
  CHECK(r.trajectories.size() == 8);
  const auto dir = kTmp / "samples";
  write_sample_outputs(r, dir, true);
  const std::string head = slurp(dir / "samples.csv").substr(0, 8);
  CHECK(head == "x0,seed\n");
  CHECK(std::filesystem::exists(dir / "trajectory_0.csv"));
  CHECK(slurp(dir / "trajectory_0.csv").substr(0, 8) == "time,x0\n");
}

TEST_CASE("vkernel command writes the pinned schema") {
  const auto cfg = ExperimentConfig::parse(R"(
[data]
points = [-1.0, 0.0, 1.0]
[schedule]
kind = "edm"
T = 1.5
eps = 0.05
[time]
lo = 0.3
hi = 1.5
[estimator]
kind = "linear"
features = "gaussian"
x_lo = -2.0
x_hi = 2.0
x_count = 6
width_x = 0.55
t_count = 0
[vkernel]
kind = "linear"
kappa = 0.1
mc_nodes = 2000
probes = [[0.0, 0.6], [0.5, 1.0]]
[ensemble]
seed = 3
)");
  const auto dir = kTmp / "vk";
  run_vkernel_command(cfg, dir, std::nullopt);
  const std::string content = slurp(dir / "vkernel.csv");
  CHECK(content.substr(0, content.find('\n')) ==
        "xi,ti,xj,tj,block_row,block_col,value,mc_se");
  // 2 probes -> 4 ordered pairs -> 4 rows + header
  CHECK(std::count(content.begin(), content.end(), '\n') == 5);
}
