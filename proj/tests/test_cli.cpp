#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "branch_lln/cli.hpp"

using namespace branch_lln;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const std::string path = "/tmp/branch_lln_test_" + name;
  std::ofstream out(path, std::ios::binary);
  out << text;
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyLln = R"(# tiny lln run
experiment = lln
model = chain
Q = 0
pi = 1
offspring = 2:1
r = 1
x0 = 0
t_end = 1
snapshot_times = 0.5,1
step_dt = 0.5
n_rep = 200
n_mc = 1000
seed = 42
B = -0.5,0.5
Bprime = -0.5,0.5
)";

}  // namespace

TEST_CASE("flat and json configs parse to the same experiment") {
  const auto flat = cli::parse_config_text(kTinyLln);
  CHECK(flat.experiment == "lln");
  CHECK(flat.model == "chain");
  CHECK(flat.offspring.at(2) == 1.0);
  CHECK(flat.snapshot_times == std::vector<double>{0.5, 1.0});
  CHECK(flat.B->lo == -0.5);

  const char* json_text = R"({
    "experiment": "lln", "model": "chain", "Q": [[0]], "pi": [1],
    "offspring": {"2": 1}, "r": 1, "x0": 0, "t_end": 1,
    "snapshot_times": [0.5, 1], "step_dt": 0.5, "n_rep": 200,
    "n_mc": 1000, "seed": 42, "B": "-0.5,0.5", "Bprime": "-0.5,0.5"
  })";
  const auto js = cli::parse_config_text(json_text);
  CHECK(js.experiment == flat.experiment);
  CHECK(js.snapshot_times == flat.snapshot_times);
  CHECK(js.offspring == flat.offspring);
  CHECK(js.B->lo == flat.B->lo);
  CHECK(js.seed == flat.seed);
}

TEST_CASE("unknown keys and malformed configs are rejected") {
  CHECK_THROWS_AS(cli::parse_config_text("experiment = lln\nbogus_key = 1\n"),
                  InvalidConfig);
  CHECK_THROWS_AS(cli::parse_config_text("experiment = warp\n"), InvalidConfig);
  CHECK_THROWS_AS(cli::parse_config_text("experiment = lln\nr 3\n"),
                  InvalidConfig);
  CHECK_THROWS_AS(cli::parse_config_text("experiment = lln\nr = abc\n"),
                  InvalidConfig);
  CHECK_THROWS_AS(
      cli::parse_config_text("experiment = lln\nseed = 1\nseed = 2\n"),
      InvalidConfig);
}

TEST_CASE("x_grid range syntax expands") {
  const auto cfg = cli::parse_config_text(
      "experiment = extinction\nmodel = gw\nrho = -1:0.75,1:0.25\n"
      "offspring = 2:1\nr = 1\nx0 = 1\nT = 4\nx_grid = 0:5\n");
  CHECK(cfg.x_grid == std::vector<double>{0, 1, 2, 3, 4, 5});
  CHECK(cfg.rho.at(-1) == 0.75);
}

TEST_CASE("subcritical offspring exits with code 2 naming I1") {
  const std::string bad = std::string(kTinyLln) + "";
  std::string text = bad;
  const auto pos = text.find("offspring = 2:1");
  text.replace(pos, 15, "offspring = 0:0.5,2:0.5");
  const auto path = write_temp("bad_i1.cfg", text);
  cli::RunOptions opts;
  opts.config_path = path;
  opts.out = "/tmp/branch_lln_test_bad_i1";
  CHECK(cli::run(opts) == 2);
}

TEST_CASE("missing config file exits with code 2") {
  cli::RunOptions opts;
  opts.config_path = "/tmp/does_not_exist_branch_lln.cfg";
  CHECK(cli::run(opts) == 2);
}

TEST_CASE("tiny lln run produces files, echo round-trips, reruns are byte identical") {
  const auto path = write_temp("tiny.cfg", kTinyLln);
  cli::RunOptions opts;
  opts.config_path = path;
  opts.out = "/tmp/branch_lln_test_tiny_a";
  REQUIRE(cli::run(opts) == 0);

  const std::string json_a = slurp("/tmp/branch_lln_test_tiny_a.json");
  const std::string csv_a = slurp("/tmp/branch_lln_test_tiny_a.csv");
  REQUIRE(!json_a.empty());
  REQUIRE(!csv_a.empty());

  // csv schema contract
  CHECK(csv_a.substr(0, csv_a.find('\n')) ==
        "replica_id,t,count_B,count_Bprime,D_t,W_t");

  auto j = nlohmann::json::parse(json_a);
  CHECK(j["experiment"] == "lln");
  CHECK(j["seed"] == 42);
  // chain with h=1, lambda=0, B=Bprime: W estimates hover near 1
  const double w_mean = j["results"]["snapshots"][1]["W"]["mean"];
  CHECK(std::abs(w_mean - 1.0) < 0.2);
  // phi target for m=2: (m2-m1)/(m1-1) = 2
  CHECK(std::abs(double(j["results"]["phi"]["value"]) - 2.0) < 1e-8);

  // config echo reparses to an identical experiment
  std::string echo_flat;
  for (auto it = j["config"].begin(); it != j["config"].end(); ++it)
    echo_flat += it.key() + " = " + std::string(it.value()) + "\n";
  const auto reparsed = cli::parse_config_text(echo_flat);
  const auto original = cli::parse_config_file(path);
  auto raw_with_out = original.raw;
  raw_with_out["out"] = "/tmp/branch_lln_test_tiny_a";
  CHECK(reparsed.raw == raw_with_out);

  // identical rerun: byte-identical outputs
  cli::RunOptions opts_b = opts;
  opts_b.out = "/tmp/branch_lln_test_tiny_b";
  REQUIRE(cli::run(opts_b) == 0);
  std::string json_b = slurp("/tmp/branch_lln_test_tiny_b.json");
  std::string csv_b = slurp("/tmp/branch_lln_test_tiny_b.csv");
  // normalize the out-path difference inside the echo
  const std::string norm_a = nlohmann::json::parse(json_a)["results"].dump();
  const std::string norm_b = nlohmann::json::parse(json_b)["results"].dump();
  CHECK(norm_a == norm_b);
  CHECK(csv_a == csv_b);

  // worker count must not change any output byte
  cli::RunOptions opts_w = opts;
  opts_w.out = "/tmp/branch_lln_test_tiny_w";
  opts_w.workers = 8;
  REQUIRE(cli::run(opts_w) == 0);
  CHECK(slurp("/tmp/branch_lln_test_tiny_w.csv") == csv_a);
  CHECK(nlohmann::json::parse(slurp("/tmp/branch_lln_test_tiny_w.json"))["results"]
            .dump() == norm_a);
}

TEST_CASE("seed override lands in the echo and output") {
  const auto path = write_temp("tiny2.cfg", kTinyLln);
  cli::RunOptions opts;
  opts.config_path = path;
  opts.seed = 777;
  opts.out = "/tmp/branch_lln_test_tiny_seed";
  REQUIRE(cli::run(opts) == 0);
  auto j = nlohmann::json::parse(slurp("/tmp/branch_lln_test_tiny_seed.json"));
  CHECK(j["seed"] == 777);
  CHECK(j["config"]["seed"] == "777");
}

TEST_CASE("runtime errors exit 3: qsd with no survivors") {
  const char* cfg = R"(
experiment = qsd
model = killed_bm
c = 1
offspring = 2:1
r = 1.5
x0 = 0.02
t_end = 12
T = 12
step_dt = 0.01
n_rep = 20
seed = 5
)";
  const auto path = write_temp("nosurv.cfg", cfg);
  cli::RunOptions opts;
  opts.config_path = path;
  opts.out = "/tmp/branch_lln_test_nosurv";
  CHECK(cli::run(opts) == 3);
}

TEST_CASE("majority overflow exits 4") {
  const char* cfg = R"(
experiment = simulate
model = chain
Q = 0
pi = 1
offspring = 2:1
r = 1
x0 = 0
t_end = 8
snapshot_times = 8
n_rep = 30
seed = 9
max_population = 40
)";
  const auto path = write_temp("overflow.cfg", cfg);
  cli::RunOptions opts;
  opts.config_path = path;
  opts.out = "/tmp/branch_lln_test_overflow";
  CHECK(cli::run(opts) == 4);
}
