#include <doctest.h>

#include <cmath>

#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

using namespace dmlmm;

TEST_SUITE("math") {

TEST_CASE("log_sum_exp matches direct summation in safe ranges") {
  Eigen::VectorXd v(3);
  v << -1.0, 0.5, 2.0;
  const double direct = std::log(std::exp(-1.0) + std::exp(0.5) + std::exp(2.0));
  CHECK(log_sum_exp(v) == doctest::Approx(direct).epsilon(1e-14));
}

TEST_CASE("log_sum_exp survives large magnitudes") {
  Eigen::VectorXd v(2);
  v << -1000.0, -1001.0;
  CHECK(log_sum_exp(v) == doctest::Approx(-1000.0 + std::log(1.0 + std::exp(-1.0))));
}

TEST_CASE("norm_quantile inverts norm_cdf") {
  for (double p : {1e-6, 0.01, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-6}) {
    CHECK(norm_cdf(norm_quantile(p)) == doctest::Approx(p).epsilon(1e-10));
  }
  CHECK(norm_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-9));
}

TEST_CASE("digamma matches lgamma finite differences") {
  for (double x : {0.3, 1.0, 2.5, 7.0, 42.0}) {
    const double h = 1e-6;
    const double fd = (std::lgamma(x + h) - std::lgamma(x - h)) / (2.0 * h);
    CHECK(digamma(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("chi-square quantiles match known values") {
  // Reference values from the usual tables.
  CHECK(chi2_quantile(0.95, 1) == doctest::Approx(3.841458820694124).epsilon(1e-8));
  CHECK(chi2_quantile(0.95, 2) == doctest::Approx(5.991464547107979).epsilon(1e-8));
  CHECK(chi2_quantile(0.5, 4) == doctest::Approx(3.356694).epsilon(1e-5));
}

TEST_CASE("rng determinism and moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(7);
  double sum = 0.0, sumsq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sumsq += z * z;
  }
  CHECK(std::fabs(sum / n) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("categorical respects weights") {
  Rng r(11);
  Eigen::VectorXd w(3);
  w << 0.2, 0.5, 0.3;
  Eigen::Vector3d counts = Eigen::Vector3d::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[r.categorical(w)] += 1.0;
  for (int k = 0; k < 3; ++k) {
    const double se = std::sqrt(w[k] * (1.0 - w[k]) / n);
    CHECK(std::fabs(counts[k] / n - w[k]) < 4.0 * se);
  }
}

}  // TEST_SUITE
