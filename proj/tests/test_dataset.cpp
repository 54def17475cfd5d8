#include <doctest.h>

#include <fstream>

#include "dmlmm/common.hpp"
#include "dmlmm/dataset.hpp"
#include "dmlmm/rng.hpp"

using namespace dmlmm;

TEST_SUITE("dataset") {

TEST_CASE("csv round trip preserves every value") {
  Rng rng(3);
  LongitudinalDataset data;
  for (int i = 0; i < 5; ++i) {
    Subject s;
    s.id = "subj_" + std::to_string(i);
    s.times = rng.normal_vector(4);
    s.values = rng.normal_vector(4);
    s.holdout_times = rng.normal_vector(2).array() + 100.0;
    s.holdout_values = rng.normal_vector(2);
    data.subjects.push_back(std::move(s));
  }
  const std::string path = "/tmp/dmlmm_test_roundtrip.csv";
  write_csv(data, path);
  const LongitudinalDataset back = read_csv(path);
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back.subjects[i].id == data.subjects[i].id);
    CHECK((back.subjects[i].times - data.subjects[i].times)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK((back.subjects[i].holdout_values - data.subjects[i].holdout_values)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("malformed rows are reported with their line number") {
  const std::string path = "/tmp/dmlmm_test_bad.csv";
  {
    std::ofstream out(path);
    out << "subject_id,t,y,holdout_flag\n";
    out << "a,0.1,1.0,0\n";
    out << "a,not_a_number,1.0,0\n";
  }
  try {
    read_csv(path);
    FAIL("expected a contract violation");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("header and flag validation") {
  const std::string path = "/tmp/dmlmm_test_hdr.csv";
  {
    std::ofstream out(path);
    out << "id,time,value\n";
  }
  CHECK_THROWS_AS(read_csv(path), ContractViolation);
  {
    std::ofstream out(path);
    out << "subject_id,t,y,holdout_flag\n";
    out << "a,0.1,1.0,2\n";
  }
  CHECK_THROWS_AS(read_csv(path), ContractViolation);
}

TEST_CASE("held-out times must not collide with observed times") {
  LongitudinalDataset data;
  Subject s;
  s.id = "a";
  s.times = Eigen::VectorXd::Constant(1, 0.5);
  s.values = Eigen::VectorXd::Constant(1, 1.0);
  s.holdout_times = Eigen::VectorXd::Constant(1, 0.5);
  s.holdout_values = Eigen::VectorXd::Constant(1, 2.0);
  data.subjects.push_back(s);
  CHECK_THROWS_AS(validate_dataset(data), ContractViolation);
}

TEST_CASE("empty datasets and empty subjects are rejected") {
  LongitudinalDataset data;
  CHECK_THROWS_AS(validate_dataset(data), ContractViolation);
  Subject s;
  s.id = "a";
  data.subjects.push_back(s);
  CHECK_THROWS_AS(validate_dataset(data), ContractViolation);
}

}  // TEST_SUITE
