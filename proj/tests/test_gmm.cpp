#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "dmlmm/common.hpp"
#include "dmlmm/gmm.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"
#include "oracles.hpp"

using namespace dmlmm;

namespace {

GaussianMixture scalar_mixture(std::initializer_list<double> ws,
                               std::initializer_list<double> mus,
                               std::initializer_list<double> vars) {
  GaussianMixture g;
  g.weights = Eigen::Map<const Eigen::VectorXd>(std::data(ws), ws.size());
  for (double m : mus) g.means.push_back(Eigen::VectorXd::Constant(1, m));
  for (double v : vars) {
    g.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, v));
  }
  return g;
}

GaussianMixture random_mixture(int k, int d, std::uint64_t seed,
                               double mean_spread = 2.0) {
  Rng rng(seed);
  GaussianMixture g;
  Eigen::VectorXd w(k);
  for (int i = 0; i < k; ++i) w[i] = 0.2 + rng.uniform();
  g.weights = w / w.sum();
  for (int i = 0; i < k; ++i) {
    g.means.push_back(mean_spread * rng.normal_vector(d));
    const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(
        d, d, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
    Eigen::MatrixXd cov = a * a.transpose() / d;
    cov.diagonal().array() += 0.3;
    g.covariances.push_back(cov);
  }
  return g;
}

}  // namespace

TEST_SUITE("gmm") {

TEST_CASE("standard normal log density at the mode") {
  GaussianMixture g;
  g.weights = Eigen::VectorXd::Ones(1);
  g.means.push_back(Eigen::VectorXd::Zero(2));
  g.covariances.push_back(Eigen::MatrixXd::Identity(2, 2));
  CHECK(log_pdf(g, Eigen::VectorXd::Zero(2)) ==
        doctest::Approx(-1.83787706641).epsilon(1e-9));
}

TEST_CASE("degenerate weight reduces to the live component") {
  GaussianMixture g = scalar_mixture({1.0, 0.0}, {0.5, -3.0}, {2.0, 1.0});
  GaussianMixture solo = scalar_mixture({1.0}, {0.5}, {2.0});
  for (double x : {-2.0, 0.0, 1.7}) {
    Eigen::VectorXd xv = Eigen::VectorXd::Constant(1, x);
    CHECK(log_pdf(g, xv) == doctest::Approx(log_pdf(solo, xv)).epsilon(1e-14));
  }
}

TEST_CASE("two-component log density matches a direct scalar summation") {
  GaussianMixture g = scalar_mixture({0.5, 0.5}, {-1.0, 1.0}, {1.0, 1.0});
  const double direct =
      std::log(0.5 * std::exp(oracle::log_normal_pdf(0.0, -1.0, 1.0)) +
               0.5 * std::exp(oracle::log_normal_pdf(0.0, 1.0, 1.0)));
  CHECK(log_pdf(g, Eigen::VectorXd::Zero(1)) ==
        doctest::Approx(direct).epsilon(1e-13));
}

TEST_CASE("log_pdf rejects dimension mismatch") {
  GaussianMixture g = scalar_mixture({1.0}, {0.0}, {1.0});
  CHECK_THROWS_AS(log_pdf(g, Eigen::VectorXd::Zero(2)), ContractViolation);
}

TEST_CASE("density integrates to one in 1-D") {
  const GaussianMixture g =
      scalar_mixture({0.3, 0.7}, {-2.0, 1.5}, {0.5, 2.0});
  const double total = oracle::integrate(
      [&](double x) {
        return std::exp(log_pdf(g, Eigen::VectorXd::Constant(1, x)));
      },
      -40.0, 40.0, 1e-8);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("scalar cdf basics") {
  GaussianMixture std_normal = scalar_mixture({1.0}, {0.0}, {1.0});
  CHECK(cdf_scalar(std_normal, 0.0) == doctest::Approx(0.5).epsilon(1e-12));
  GaussianMixture g = scalar_mixture({0.4, 0.6}, {-1.0, 2.0}, {1.0, 0.5});
  CHECK(cdf_scalar(g, 10.0 * (2.0 + 1.0)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(cdf_scalar(random_mixture(1, 2, 5), 0.0), ContractViolation);
}

TEST_CASE("scalar cdf against quadrature of the density") {
  const GaussianMixture g = scalar_mixture({0.3, 0.7}, {0.0, 2.0}, {1.0, 1.0});
  const double quad = oracle::integrate(
      [&](double x) {
        return std::exp(log_pdf(g, Eigen::VectorXd::Constant(1, x)));
      },
      -30.0, 1.0, 1e-11);
  CHECK(cdf_scalar(g, 1.0) == doctest::Approx(quad).epsilon(1e-8));
}

TEST_CASE("scalar cdf is monotone on random grids") {
  const GaussianMixture g =
      scalar_mixture({0.25, 0.5, 0.25}, {-3.0, 0.0, 4.0}, {0.3, 1.0, 2.0});
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const double x1 = rng.uniform(-10.0, 10.0);
    const double x2 = x1 + rng.uniform(0.0, 5.0);
    CHECK(cdf_scalar(g, x1) <= cdf_scalar(g, x2) + 1e-15);
  }
}

TEST_CASE("moments of a single component") {
  const GaussianMixture g = random_mixture(1, 3, 2);
  const Moments m = moments(g);
  CHECK((m.mean - g.means[0]).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((m.covariance - g.covariances[0]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("moments of a symmetric pair") {
  Eigen::VectorXd a(2);
  a << 1.0, -2.0;
  GaussianMixture g;
  g.weights = Eigen::VectorXd::Constant(2, 0.5);
  g.means = {a, -a};
  g.covariances = {Eigen::MatrixXd::Identity(2, 2),
                   Eigen::MatrixXd::Identity(2, 2)};
  const Moments m = moments(g);
  CHECK(m.mean.cwiseAbs().maxCoeff() < 1e-15);
  const Eigen::MatrixXd expected =
      Eigen::MatrixXd::Identity(2, 2) + a * a.transpose();
  CHECK((m.covariance - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("moments against a sampling oracle") {
  const GaussianMixture g = random_mixture(3, 2, 99);
  const long n = 1000000;
  const Eigen::MatrixXd draws = sample(g, n, 2024);
  const Eigen::VectorXd emean = draws.colwise().mean().transpose();
  const Moments m = moments(g);
  for (int j = 0; j < 2; ++j) {
    const double se = std::sqrt(m.covariance(j, j) / n);
    CHECK(std::fabs(emean[j] - m.mean[j]) < 3.0 * se);
  }
  Eigen::MatrixXd centered = draws.rowwise() - emean.transpose();
  const Eigen::MatrixXd ecov = centered.transpose() * centered / (n - 1.0);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      // Conservative standard error for a covariance entry.
      const double se = 3.0 * std::sqrt(m.covariance(r, r) * m.covariance(c, c) / n);
      CHECK(std::fabs(ecov(r, c) - m.covariance(r, c)) < 3.0 * se);
    }
  }
}

TEST_CASE("conditioning a single Gaussian matches the dense joint oracle") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const GaussianMixture g = random_mixture(1, 4, 100 + rep);
    const Eigen::MatrixXd b_obs = Eigen::MatrixXd::NullaryExpr(
        3, 4, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
    const Eigen::MatrixXd b_pred = Eigen::MatrixXd::NullaryExpr(
        2, 4, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
    const Eigen::VectorXd y = rng.normal_vector(3);
    const double noise = 0.3;
    const GaussianMixture got =
        condition(g, {b_obs, b_pred, noise}, y);
    const GaussianMixture want = oracle::dense_condition(g, b_obs, b_pred, noise, y);
    CHECK((got.means[0] - want.means[0]).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got.covariances[0] - want.covariances[0]).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("disjoint-support observation leaves predictive means unconditioned") {
  // Diagonal covariances and non-overlapping design columns decouple the
  // observed and predicted coordinates.
  GaussianMixture g;
  g.weights = Eigen::VectorXd::Constant(2, 0.5);
  Eigen::VectorXd m1(4), m2(4);
  m1 << 1.0, -1.0, 2.0, 0.5;
  m2 << -2.0, 0.3, 1.0, -0.7;
  g.means = {m1, m2};
  g.covariances = {Eigen::VectorXd::Constant(4, 0.8).asDiagonal(),
                   Eigen::VectorXd::Constant(4, 1.2).asDiagonal()};
  Eigen::MatrixXd b_obs = Eigen::MatrixXd::Zero(2, 4);
  b_obs(0, 0) = 1.0;
  b_obs(1, 1) = 1.0;
  Eigen::MatrixXd b_pred = Eigen::MatrixXd::Zero(2, 4);
  b_pred(0, 2) = 1.0;
  b_pred(1, 3) = 1.0;
  Eigen::VectorXd y(2);
  y << 0.9, -0.8;
  const GaussianMixture post = condition(g, {b_obs, b_pred, 0.5}, y);
  for (int k = 0; k < 2; ++k) {
    CHECK((post.means[k] - b_pred * g.means[k]).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(std::fabs(post.weights.sum() - 1.0) < 1e-12);
  CHECK(post.weights[0] != doctest::Approx(g.weights[0]).epsilon(1e-6));
}

TEST_CASE("mixture conditioning against importance sampling") {
  Rng rng(31);
  const GaussianMixture g = random_mixture(3, 4, 55);
  const Eigen::MatrixXd b_obs = Eigen::MatrixXd::NullaryExpr(
      5, 4, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  const Eigen::MatrixXd b_pred = Eigen::MatrixXd::NullaryExpr(
      4, 4, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  const double noise = 0.4;
  Eigen::VectorXd y = b_obs * g.means[1] + 0.5 * rng.normal_vector(5);
  const GaussianMixture post = condition(g, {b_obs, b_pred, noise}, y);
  CHECK(std::fabs(post.weights.sum() - 1.0) < 1e-12);
  for (int k = 0; k < post.components(); ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(post.covariances[k]);
    CHECK(llt.info() == Eigen::Success);
  }
  const Moments m = moments(post);
  const oracle::IsMean is =
      oracle::is_conditional_mean(g, b_obs, b_pred, noise, y, 1000000, 77);
  for (int j = 0; j < 4; ++j) {
    CHECK(std::fabs(m.mean[j] - is.mean[j]) < 3.0 * is.std_error[j] + 1e-6);
  }
}

TEST_CASE("self-conditioning shrinks toward component means") {
  // Observation and prediction blocks coincide; the oracle provides the
  // reference, and the posterior mean must lie between the data and each
  // component's unconditional mean.
  Rng rng(41);
  const GaussianMixture g = random_mixture(2, 3, 90);
  const Eigen::MatrixXd b = Eigen::MatrixXd::NullaryExpr(
      4, 3, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  const double noise = 0.5;
  const Moments prior = moments(g);
  const Eigen::VectorXd y = b * prior.mean;  // observe the predictive mean
  const GaussianMixture got = condition(g, {b, b, noise}, y);
  const GaussianMixture want = oracle::dense_condition(g, b, b, noise, y);
  for (int k = 0; k < 2; ++k) {
    CHECK((got.means[k] - want.means[k]).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got.covariances[k] - want.covariances[k]).cwiseAbs().maxCoeff() <
          1e-10);
  }
}

TEST_CASE("conditioning on an empty observation block is the identity") {
  const GaussianMixture g = random_mixture(2, 3, 8);
  const GaussianMixture post =
      condition_latent(g, Eigen::MatrixXd::Zero(0, 3), 1.0,
                       Eigen::VectorXd::Zero(0));
  CHECK((post.weights - g.weights).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampling is deterministic and respects a point mass") {
  GaussianMixture g;
  g.weights = Eigen::VectorXd::Ones(1);
  g.means.push_back(Eigen::VectorXd::Constant(2, 3.0));
  g.covariances.push_back(Eigen::MatrixXd::Zero(2, 2));
  const long n = 10000;
  const Eigen::MatrixXd a = sample(g, n, 9);
  const Eigen::MatrixXd b = sample(g, n, 9);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK(std::fabs(a.col(0).mean() - 3.0) < 5.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("sampled component frequencies match the weights") {
  const GaussianMixture g = random_mixture(3, 1, 12);
  std::vector<int> comp;
  const long n = 200000;
  sample(g, n, 123, &comp);
  Eigen::Vector3d counts = Eigen::Vector3d::Zero();
  for (int c : comp) counts[c] += 1.0;
  for (int k = 0; k < 3; ++k) {
    const double w = g.weights[k];
    CHECK(std::fabs(counts[k] / n - w) < 4.0 * std::sqrt(w * (1.0 - w) / n));
  }
}

TEST_CASE("kl estimate of identical mixtures is zero") {
  const GaussianMixture g = random_mixture(2, 2, 21);
  const KlEstimate est = kl_mc(g, g, 20000, 5);
  CHECK(std::fabs(est.value) <= 3.0 * est.std_error + 1e-12);
}

TEST_CASE("kl of single Gaussians matches the closed form") {
  const GaussianMixture p = random_mixture(1, 3, 33);
  const GaussianMixture q = random_mixture(1, 3, 44);
  const double exact = oracle::gaussian_kl(p.means[0], p.covariances[0],
                                           q.means[0], q.covariances[0]);
  const KlEstimate est = kl_mc(p, q, 200000, 6);
  CHECK(std::fabs(est.value - exact) < 3.0 * est.std_error);
}

TEST_CASE("kl dominates for far-separated distributions") {
  GaussianMixture p = scalar_mixture({1.0}, {10.0}, {1.0});
  GaussianMixture q = scalar_mixture({1.0}, {0.0}, {1.0});
  const KlEstimate est = kl_mc(p, q, 5000, 7);
  CHECK(est.value > 10.0);
}

TEST_CASE("kl rejects tiny sample counts") {
  const GaussianMixture g = random_mixture(1, 1, 3);
  CHECK_THROWS_AS(kl_mc(g, g, 10, 1), ContractViolation);
}

TEST_CASE("renormalize basics") {
  const GaussianMixture g = random_mixture(2, 2, 61);
  const GaussianMixture same = renormalize(g, {true, true});
  CHECK((same.weights - g.weights).cwiseAbs().maxCoeff() < 1e-15);

  GaussianMixture two = scalar_mixture({0.25, 0.75}, {0.0, 2.0}, {1.0, 1.0});
  const GaussianMixture one = renormalize(two, {true, false});
  CHECK(one.components() == 1);
  CHECK(one.weights[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(renormalize(two, {false, false}), ContractViolation);
}

TEST_CASE("renormalize preserves densities up to the kept mass") {
  const GaussianMixture g =
      scalar_mixture({0.2, 0.5, 0.3}, {-2.0, 0.0, 3.0}, {1.0, 0.5, 2.0});
  const GaussianMixture cut = renormalize(g, {true, false, true});
  const double kept = 0.5;  // mass removed
  for (double x : {-3.0, -1.0, 0.4, 2.0, 5.0}) {
    Eigen::VectorXd xv = Eigen::VectorXd::Constant(1, x);
    const double restricted =
        0.2 * std::exp(oracle::log_normal_pdf(x, -2.0, 1.0)) +
        0.3 * std::exp(oracle::log_normal_pdf(x, 3.0, 2.0));
    CHECK(std::exp(log_pdf(cut, xv)) ==
          doctest::Approx(restricted / kept).epsilon(1e-10));
  }
  // Surviving ratios are exact.
  CHECK(cut.weights[0] / cut.weights[1] == doctest::Approx(0.2 / 0.3).epsilon(1e-14));
}

TEST_CASE("json round trip is lossless") {
  const GaussianMixture g = random_mixture(3, 2, 71);
  const GaussianMixture back = mixture_from_json(to_json(g));
  CHECK((back.weights - g.weights).cwiseAbs().maxCoeff() == 0.0);
  for (int k = 0; k < 3; ++k) {
    CHECK((back.means[k] - g.means[k]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.covariances[k] - g.covariances[k]).cwiseAbs().maxCoeff() == 0.0);
  }
  // Textual round trip too (string -> parse -> string).
  const std::string s1 = to_json(g).dump();
  const std::string s2 = to_json(mixture_from_json(nlohmann::json::parse(s1))).dump();
  CHECK(s1 == s2);
}

TEST_CASE("invariant violations are rejected") {
  GaussianMixture g = scalar_mixture({0.5, 0.6}, {0.0, 1.0}, {1.0, 1.0});
  CHECK_THROWS_AS(validate_mixture(g), ContractViolation);
  GaussianMixture asym = random_mixture(1, 2, 81);
  asym.covariances[0](0, 1) += 1e-3;
  CHECK_THROWS_AS(validate_mixture(asym), ContractViolation);
  GaussianMixture indefinite = random_mixture(1, 2, 82);
  indefinite.covariances[0] << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS(validate_mixture(indefinite), ContractViolation);
}

}  // TEST_SUITE
