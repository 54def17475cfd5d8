#include <doctest.h>

#include <fstream>

#include "dmlmm/common.hpp"
#include "dmlmm/config.hpp"

using namespace dmlmm;

TEST_SUITE("config") {

TEST_CASE("key-table parsing with comments and overrides") {
  const std::string path = "/tmp/dmlmm_test_config.conf";
  {
    std::ofstream out(path);
    out << "# run settings\n";
    out << "seed = 42\n";
    out << "basis.family = legendre   # trailing comment\n";
    out << "basis.dimension = 7\n";
    out << "fit.iterations = 500\n";
    out << "arch.K = 3,2\n";
    out << "arch.D = 7,3,1\n";
    out << "predict.levels = 0.95, 0.5\n";
  }
  ConfigTable table = parse_config_file(path);
  apply_overrides(table, {"fit.iterations=100", "threads=2"});
  const RunConfig cfg = make_run_config(table);
  CHECK(cfg.seed == 42);
  CHECK(cfg.threads == 2);
  CHECK(cfg.basis.family == BasisFamily::legendre);
  CHECK(cfg.basis.dimension == 7);
  CHECK(cfg.fit.max_iterations == 100);
  CHECK(cfg.arch.layers == 2);
  CHECK(cfg.arch.components == std::vector<int>{3, 2});
  CHECK(cfg.arch.dims == std::vector<int>{7, 3, 1});
  CHECK(cfg.levels == std::vector<double>{0.95, 0.5});
  CHECK(cfg.fit.seed == 42);
}

TEST_CASE("unknown keys fail loudly") {
  ConfigTable table{{"fit.itreations", "100"}};
  CHECK_THROWS_AS(make_run_config(table), ContractViolation);
}

TEST_CASE("composite block grammar") {
  ConfigTable table{{"basis.family", "composite"},
                    {"basis.dimension", "20"},
                    {"basis.blocks", "seasonal_bspline:6:12 + bspline:14"}};
  const RunConfig cfg = make_run_config(table);
  REQUIRE(cfg.basis.blocks.size() == 2);
  CHECK(cfg.basis.blocks[0].family == BasisFamily::seasonal_bspline);
  CHECK(cfg.basis.blocks[0].dimension == 6);
  CHECK(cfg.basis.blocks[0].period == 12.0);
  CHECK(cfg.basis.blocks[1].dimension == 14);
}

TEST_CASE("candidate list grammar") {
  ConfigTable table{{"arch.candidates", "K=6,2;D=10,4,1 | K=4,2;D=10,4,1"}};
  const RunConfig cfg = make_run_config(table);
  REQUIRE(cfg.candidates.size() == 2);
  CHECK(cfg.candidates[0].components == std::vector<int>{6, 2});
  CHECK(cfg.candidates[1].components == std::vector<int>{4, 2});
  CHECK(cfg.candidates[1].dims == std::vector<int>{10, 4, 1});
}

TEST_CASE("malformed lines carry their location") {
  const std::string path = "/tmp/dmlmm_test_config_bad.conf";
  {
    std::ofstream out(path);
    out << "seed = 1\n";
    out << "this line has no equals sign\n";
  }
  try {
    parse_config_file(path);
    FAIL("expected a contract violation");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

}  // TEST_SUITE
