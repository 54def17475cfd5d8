#include <doctest.h>

#include <cmath>

#include "dmlmm/common.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/predict.hpp"
#include "dmlmm/rng.hpp"
#include "oracles.hpp"

using namespace dmlmm;

namespace {

PluginParams demo_plugin(int k, std::uint64_t seed, double sigma2 = 0.05) {
  Rng rng(seed);
  PluginParams p;
  p.basis.family = BasisFamily::legendre;
  p.basis.dimension = 4;
  p.basis.t_min = 0.0;
  p.basis.t_max = 1.0;
  GaussianMixture g;
  Eigen::VectorXd w(k);
  for (int i = 0; i < k; ++i) w[i] = 0.5 + rng.uniform();
  g.weights = w / w.sum();
  for (int i = 0; i < k; ++i) {
    g.means.push_back(2.0 * rng.normal_vector(4));
    const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(
        4, 4, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
    Eigen::MatrixXd cov = 0.2 * a * a.transpose();
    cov.diagonal().array() += 0.1;
    g.covariances.push_back(cov);
  }
  p.beta_prior = g;
  p.sigma2 = sigma2;
  return p;
}

}  // namespace

TEST_SUITE("predict") {

TEST_CASE("conditioning on nothing yields the marginal exactly") {
  const PluginParams plugin = demo_plugin(3, 1);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(5, 0.1, 0.9);
  const PredictiveResult a =
      predictive(plugin, Eigen::VectorXd(0), Eigen::VectorXd(0), grid);
  const PredictiveResult b = marginal_predictive(plugin, grid);
  CHECK(to_json(a.mixture).dump() == to_json(b.mixture).dump());
  CHECK(a.provenance == "marginal");
}

TEST_CASE("single-component predictive equals the dense joint oracle") {
  const PluginParams plugin = demo_plugin(1, 2);
  Rng rng(3);
  const Eigen::VectorXd t_obs = Eigen::VectorXd::LinSpaced(6, 0.05, 0.8);
  Eigen::VectorXd y(6);
  for (int i = 0; i < 6; ++i) y[i] = rng.normal();
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(4, 0.2, 1.0);
  const PredictiveResult got = predictive(plugin, t_obs, y, grid);
  const Eigen::MatrixXd b_obs = evaluate_basis(plugin.basis, t_obs).values;
  const Eigen::MatrixXd b_pred = evaluate_basis(plugin.basis, grid).values;
  const GaussianMixture want = oracle::dense_condition(
      plugin.beta_prior, b_obs, b_pred, plugin.sigma2, y);
  CHECK((got.mixture.means[0] - want.means[0]).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((got.mixture.covariances[0] - want.covariances[0])
            .cwiseAbs()
            .maxCoeff() < 1e-10);
}

TEST_CASE("dense low-noise observation pins the predictive mean") {
  PluginParams plugin = demo_plugin(2, 4, 1e-6);
  Rng rng(5);
  const Eigen::VectorXd t_obs = Eigen::VectorXd::LinSpaced(30, 0.0, 1.0);
  const Eigen::MatrixXd b_obs = evaluate_basis(plugin.basis, t_obs).values;
  const Eigen::VectorXd beta = plugin.beta_prior.means[0];
  const Eigen::VectorXd y = b_obs * beta;
  const PredictiveResult got = predictive(plugin, t_obs, y, t_obs);
  const Moments m = moments(got.mixture);
  for (int j = 0; j < 30; ++j) {
    const double sd = std::sqrt(m.covariance(j, j));
    CHECK(std::fabs(m.mean[j] - y[j]) < 3.0 * sd + 1e-9);
  }
  (void)rng;
}

TEST_CASE("marginal of one grid point is the scalar pushforward") {
  const PluginParams plugin = demo_plugin(1, 6);
  Eigen::VectorXd grid(1);
  grid << 0.4;
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const Eigen::MatrixXd b = evaluate_basis(plugin.basis, grid).values;
  const double want_var =
      (b * plugin.beta_prior.covariances[0] * b.transpose())(0, 0) +
      plugin.sigma2;
  CHECK(r.mixture.covariances[0](0, 0) == doctest::Approx(want_var).epsilon(1e-12));
  CHECK(r.mixture.means[0][0] ==
        doctest::Approx((b * plugin.beta_prior.means[0])(0)).epsilon(1e-12));
}

TEST_CASE("marginal moments equal the pushforward of the prior moments") {
  const PluginParams plugin = demo_plugin(3, 7);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(6, 0.0, 1.0);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const Moments got = moments(r.mixture);
  const Moments prior = moments(plugin.beta_prior);
  const Eigen::MatrixXd b = evaluate_basis(plugin.basis, grid).values;
  const Eigen::VectorXd want_mean = b * prior.mean;
  Eigen::MatrixXd want_cov = b * prior.covariance * b.transpose();
  want_cov.diagonal().array() += plugin.sigma2;
  CHECK((got.mean - want_mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((got.covariance - want_cov).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mixture mean curve is linear in the component means") {
  // All component mean curves decreasing implies a decreasing mixture mean.
  PluginParams plugin = demo_plugin(2, 8);
  for (int k = 0; k < 2; ++k) {
    plugin.beta_prior.means[k].setZero();
    plugin.beta_prior.means[k][1] = -(1.0 + k);  // slope only
  }
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(10, 0.0, 1.0);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const Moments m = moments(r.mixture);
  for (int j = 1; j < 10; ++j) CHECK(m.mean[j] <= m.mean[j - 1] + 1e-12);
}

TEST_CASE("bands collapse to normal quantiles for one component") {
  const PluginParams plugin = demo_plugin(1, 9);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(4, 0.1, 0.9);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const auto [lower, upper] = pointwise_band(r, 0.95);
  for (int j = 0; j < 4; ++j) {
    const double mean = r.mixture.means[0][j];
    const double sd = std::sqrt(r.mixture.covariances[0](j, j));
    CHECK(lower[j] == doctest::Approx(mean + sd * norm_quantile(0.025)).epsilon(1e-6));
    CHECK(upper[j] == doctest::Approx(mean + sd * norm_quantile(0.975)).epsilon(1e-6));
  }
}

TEST_CASE("bands are nested and continuous in the level") {
  const PluginParams plugin = demo_plugin(3, 10);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(5, 0.0, 1.0);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const auto [l50, u50] = pointwise_band(r, 0.5);
  const auto [l95, u95] = pointwise_band(r, 0.95);
  const auto [l95b, u95b] = pointwise_band(r, 0.95 + 1e-4);
  for (int j = 0; j < 5; ++j) {
    CHECK(l95[j] <= l50[j]);
    CHECK(u50[j] <= u95[j]);
    CHECK(std::fabs(l95b[j] - l95[j]) < 1e-2);
    CHECK(std::fabs(u95b[j] - u95[j]) < 1e-2);
  }
}

TEST_CASE("median band brackets the sampled componentwise median") {
  const PluginParams plugin = demo_plugin(2, 11);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(3, 0.2, 0.8);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const auto [lo, hi] = pointwise_band(r, 0.5);
  const long n = 400000;
  const Eigen::MatrixXd draws = sample(r.mixture, n, 321);
  for (int j = 0; j < 3; ++j) {
    std::vector<double> col(draws.col(j).data(), draws.col(j).data() + n);
    std::nth_element(col.begin(), col.begin() + n / 2, col.end());
    const double med = col[n / 2];
    CHECK(med >= lo[j] - 1e-2);
    CHECK(med <= hi[j] + 1e-2);
  }
}

TEST_CASE("threshold risk matches tails and sampling") {
  const PluginParams plugin = demo_plugin(2, 12);
  Eigen::VectorXd grid(2);
  grid << 0.3, 0.7;
  const PredictiveResult r = marginal_predictive(plugin, grid);
  CHECK(threshold_risk(r, 0, -1e9) == doctest::Approx(0.0));

  // Symmetric single component: risk at the mean is one half.
  PluginParams single = demo_plugin(1, 13);
  const PredictiveResult rs = marginal_predictive(single, grid);
  CHECK(threshold_risk(rs, 1, rs.mixture.means[0][1]) ==
        doctest::Approx(0.5).epsilon(1e-12));

  const double thr = moments(r.mixture).mean[0];
  const long n = 1000000;
  const Eigen::MatrixXd draws = sample(r.mixture, n, 55);
  const double frac =
      (draws.col(0).array() < thr).cast<double>().sum() / static_cast<double>(n);
  const double p = threshold_risk(r, 0, thr);
  CHECK(std::fabs(frac - p) < 4.0 * std::sqrt(p * (1.0 - p) / n));
}

TEST_CASE("cluster assignment") {
  const PluginParams plugin = demo_plugin(1, 14);
  Eigen::VectorXd t(3), y(3);
  t << 0.1, 0.5, 0.9;
  y << 0.0, 0.1, -0.2;
  const auto [idx, resp] = cluster_assign(plugin, t, y);
  CHECK(idx == 0);
  CHECK(resp.size() == 1);
  CHECK(resp[0] == doctest::Approx(1.0));

  // Well-separated components resolve decisively.
  PluginParams two = demo_plugin(2, 15, 0.01);
  two.beta_prior.means[0] = Eigen::VectorXd::Zero(4);
  two.beta_prior.means[1] = Eigen::VectorXd::Constant(4, 30.0);
  two.beta_prior.covariances[0] = 0.2 * Eigen::MatrixXd::Identity(4, 4);
  two.beta_prior.covariances[1] = 0.2 * Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd b = evaluate_basis(two.basis, t).values;
  const Eigen::VectorXd y1 = b * two.beta_prior.means[1];
  const auto [idx1, resp1] = cluster_assign(two, t, y1);
  CHECK(idx1 == 1);
  CHECK(resp1[1] > 0.99);
  CHECK(std::fabs(resp1.sum() - 1.0) < 1e-12);
}

TEST_CASE("assignment responsibilities equal the predictive weights") {
  const PluginParams plugin = demo_plugin(3, 16);
  Rng rng(17);
  Eigen::VectorXd t(5), y(5);
  for (int i = 0; i < 5; ++i) {
    t[i] = rng.uniform();
    y[i] = rng.normal();
  }
  std::sort(t.data(), t.data() + 5);
  const auto [idx, resp] = cluster_assign(plugin, t, y);
  const PredictiveResult pred =
      predictive(plugin, t, y, Eigen::VectorXd::LinSpaced(3, 0.0, 1.0));
  CHECK((resp - pred.tilde_weights).cwiseAbs().maxCoeff() < 1e-12);
  (void)idx;
}

TEST_CASE("the component mean lies inside every density region") {
  const PluginParams plugin = demo_plugin(1, 18);
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(3, 0.1, 0.9);
  const PredictiveResult r = marginal_predictive(plugin, grid);
  for (double level : {0.1, 0.5, 0.9, 0.99}) {
    CHECK(elliptical_coverage(r, r.mixture.means[0], level));
  }
}

TEST_CASE("single-component density regions match the chi-square ellipsoid") {
  const PluginParams plugin = demo_plugin(1, 19);
  Eigen::VectorXd grid(2);
  grid << 0.25, 0.75;
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const Eigen::MatrixXd cov = r.mixture.covariances[0];
  const Eigen::MatrixXd prec = cov.inverse();
  const double q90 = chi2_quantile(0.9, 2);
  Rng rng(20);
  int agree = 0;
  const int n = 400;
  const Eigen::MatrixXd draws = sample(r.mixture, n, 21);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = draws.row(i).transpose();
    const Eigen::VectorXd d = x - r.mixture.means[0];
    const bool in_ellipse = d.dot(prec * d) <= q90;
    const bool in_hdr = elliptical_coverage(r, x, 0.9, 777);
    agree += (in_ellipse == in_hdr);
  }
  CHECK(agree >= 396);  // >= 99 percent agreement
  (void)rng;
}

TEST_CASE("density-region coverage self-calibrates") {
  const PluginParams plugin = demo_plugin(2, 22);
  Eigen::VectorXd grid(3);
  grid << 0.1, 0.5, 0.9;
  const PredictiveResult r = marginal_predictive(plugin, grid);
  const double level = 0.8;
  const Eigen::VectorXd thr = hdr_log_density_thresholds(r, {level}, 99);
  const long n = 4000;
  const Eigen::MatrixXd draws = sample(r.mixture, n, 23);
  long covered = 0;
  for (long i = 0; i < n; ++i) {
    covered += (log_pdf(r.mixture, draws.row(i).transpose()) >= thr[0]);
  }
  const double freq = static_cast<double>(covered) / n;
  CHECK(std::fabs(freq - level) < 4.0 * std::sqrt(level * (1.0 - level) / n));
}

TEST_CASE("sequential conditioning equals joint conditioning") {
  const PluginParams plugin = demo_plugin(3, 24);
  Rng rng(25);
  Eigen::VectorXd t(6), y(6);
  for (int i = 0; i < 6; ++i) {
    t[i] = (i + 0.5) / 6.0;
    y[i] = rng.normal();
  }
  const Eigen::MatrixXd b = evaluate_basis(plugin.basis, t).values;
  const GaussianMixture joint =
      condition_latent(plugin.beta_prior, b, plugin.sigma2, y);
  const GaussianMixture first =
      condition_latent(plugin.beta_prior, b.topRows(3), plugin.sigma2, y.head(3));
  const GaussianMixture second =
      condition_latent(first, b.bottomRows(3), plugin.sigma2, y.tail(3));
  CHECK((joint.weights - second.weights).cwiseAbs().maxCoeff() < 1e-8);
  for (int k = 0; k < joint.components(); ++k) {
    CHECK((joint.means[k] - second.means[k]).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((joint.covariances[k] - second.covariances[k]).cwiseAbs().maxCoeff() <
          1e-8);
  }
}

TEST_CASE("an extreme series is flagged as conflicting") {
  const PluginParams plugin = demo_plugin(2, 26, 0.1);
  const Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(8, 0.05, 0.95);
  const PredictiveResult marg = marginal_predictive(plugin, t);
  const Moments m = moments(marg.mixture);
  Eigen::VectorXd shifted(8);
  for (int i = 0; i < 8; ++i) {
    shifted[i] = m.mean[i] + 10.0 * std::sqrt(m.covariance(i, i));
  }
  const ConflictResult res =
      conflict_tail_probability(plugin, t, shifted, 4, 150, 1500, 31);
  CHECK(res.p < 0.01);
  CHECK(res.g_observed > 0.0);
}

TEST_CASE("conflict check validates its arguments") {
  const PluginParams plugin = demo_plugin(1, 27);
  const Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(5, 0.1, 0.9);
  const Eigen::VectorXd y = Eigen::VectorXd::Zero(5);
  CHECK_THROWS_AS(conflict_tail_probability(plugin, t, y, 0, 150, 1500, 1),
                  ContractViolation);
  CHECK_THROWS_AS(conflict_tail_probability(plugin, t, y, 5, 150, 1500, 1),
                  ContractViolation);
  CHECK_THROWS_AS(conflict_tail_probability(plugin, t, y, 2, 50, 1500, 1),
                  ContractViolation);
}

TEST_CASE("plugin json round trip") {
  const PluginParams plugin = demo_plugin(2, 28);
  const PluginParams back = plugin_from_json(to_json(plugin));
  CHECK(back.sigma2 == plugin.sigma2);
  CHECK((back.beta_prior.weights - plugin.beta_prior.weights)
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

}  // TEST_SUITE
