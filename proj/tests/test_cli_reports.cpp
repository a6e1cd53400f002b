#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "ssmlab/cli_reports.hpp"

using namespace ssmlab;
using nlohmann::json;

TEST_CASE("sha256 known vectors") {
  CHECK(cli::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(cli::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("format_number round-trips doubles") {
  for (double v : {0.0, 1.0, -2.5, 0.1, 1.0 / 3.0, 1e-300, 6.02214076e23}) {
    CHECK(std::strtod(cli::format_number(v).c_str(), nullptr) == v);
  }
  CHECK(cli::format_number(0.1) == "0.1");
  CHECK(cli::format_number(std::nan("")) == "nan");
}

TEST_CASE("overrides set nested keys and parse JSON values") {
  json c = json::object();
  cli::set_override(c, "task.kind=needle");
  cli::set_override(c, "task.seq_len=24");
  cli::set_override(c, "analysis.layers=[1,2]");
  cli::set_override(c, "seed=7");
  CHECK(c["task"]["kind"] == "needle");
  CHECK(c["task"]["seq_len"] == 24);
  CHECK(c["analysis"]["layers"] == json::array({1, 2}));
  CHECK(c["seed"] == 7);
  CHECK_THROWS_AS(cli::set_override(c, "no_equals"), cli::ConfigError);
  CHECK_THROWS_AS(cli::set_override(c, "a..b=1"), cli::ConfigError);
  CHECK_THROWS_AS(cli::set_override(c, "seed.x=1"), cli::ConfigError);
}

TEST_CASE("run config parsing") {
  const json base = {{"command", "analyze"}, {"output_dir", "out"}, {"seed", 3}};
  const auto c = cli::parse_run_config(base, "/tmp/cfg");
  CHECK(c.output_dir == std::filesystem::path("/tmp/cfg/out"));
  CHECK(c.model.seed == 3);
  CHECK(c.task.seed == 4);
  CHECK(c.train.seed == 5);
  CHECK(c.task.vocab_size == c.model.vocab_size);
  CHECK(c.resolved["analysis"]["site"] == "scan_output");

  CHECK(cli::parse_run_config(base, "/tmp", "11").seed == 11);
  CHECK_THROWS_AS(cli::parse_run_config(base, "/tmp", "-1"), cli::ConfigError);

  json unknown = base;
  unknown["analysis"] = {{"tua", 0.1}};
  CHECK_THROWS_AS(cli::parse_run_config(unknown, "/tmp"), cli::ConfigError);
  json bad_site = base;
  bad_site["analysis"] = {{"site", "residual"}};
  CHECK_THROWS_AS(cli::parse_run_config(bad_site, "/tmp"), cli::ConfigError);
  json bad_tau = base;
  bad_tau["analysis"] = {{"tau", 0}};
  CHECK_THROWS_AS(cli::parse_run_config(bad_tau, "/tmp"), cli::ConfigError);
  json bad_model = base;
  bad_model["model"] = {{"d_model", 0}};
  CHECK_THROWS_AS(cli::parse_run_config(bad_model, "/tmp"), cli::ConfigError);
  json compare = {{"command", "compare"}, {"output_dir", "out"}};
  CHECK_THROWS_AS(cli::parse_run_config(compare, "/tmp"), cli::ConfigError);
  json grid = base;
  grid["steer"] = {{"grid", json::array({2.0, -1.0})}};
  CHECK_THROWS_AS(cli::parse_run_config(grid, "/tmp"), cli::ConfigError);
}
