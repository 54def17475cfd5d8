#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmlmm/basis.hpp"
#include "dmlmm/gmm.hpp"

namespace dmlmm {

// Point estimate of the fitted model: mixture prior over basis coefficients,
// observation noise variance, and the basis that maps coefficients to
// trajectories.
struct PluginParams {
  GaussianMixture beta_prior;
  double sigma2 = 1.0;
  BasisSpec basis;
};

void validate_plugin(const PluginParams& plugin);

struct PredictiveResult {
  GaussianMixture mixture;       // over predictions at grid, dimension T
  Eigen::VectorXd grid;          // strictly increasing prediction times
  Eigen::VectorXd tilde_weights; // posterior component weights
  std::string provenance;        // subject id or "marginal"
};

// Conditional predictive at t_grid given observations (t_obs, y_obs).
// n = 0 falls back to the marginal predictive.
PredictiveResult predictive(const PluginParams& plugin,
                            const Eigen::VectorXd& t_obs,
                            const Eigen::VectorXd& y_obs,
                            const Eigen::VectorXd& t_grid,
                            const std::string& provenance = "");

// Predictive for a subject with no observed data.
PredictiveResult marginal_predictive(const PluginParams& plugin,
                                     const Eigen::VectorXd& t_grid);

// 1-D marginal of the predictive at one grid index.
GaussianMixture scalar_marginal(const PredictiveResult& result,
                                Eigen::Index grid_index);

// Pointwise equal-tailed band: per grid point the (alpha/2, 1 - alpha/2)
// mixture quantiles found by bisection on the scalar CDF.
std::pair<Eigen::VectorXd, Eigen::VectorXd> pointwise_band(
    const PredictiveResult& result, double level);

// Quantile of a 1-D mixture by bisection (1e-8 absolute tolerance in x).
double mixture_quantile(const GaussianMixture& scalar_gmm, double p);

// P(prediction at grid_index <= threshold).
double threshold_risk(const PredictiveResult& result, Eigen::Index grid_index,
                      double threshold);

// Posterior path probabilities for a subject and the argmax component
// (lowest index wins ties).
std::pair<int, Eigen::VectorXd> cluster_assign(const PluginParams& plugin,
                                               const Eigen::VectorXd& t_obs,
                                               const Eigen::VectorXd& y_obs);

// Highest-density-region membership: log-density thresholds estimated from
// draws of the mixture itself (quantile 1 - level of the log-density law).
Eigen::VectorXd hdr_log_density_thresholds(const PredictiveResult& result,
                                           const std::vector<double>& levels,
                                           std::uint64_t seed = 2024,
                                           long n_draws = 100000);

bool elliptical_coverage(const PredictiveResult& result,
                         const Eigen::VectorXd& y_true, double level,
                         std::uint64_t seed = 2024);

struct ConflictResult {
  double p = 1.0;
  double g_observed = 0.0;
  double kl_se = 0.0;
  long n_prior_draws = 0;
};

// Prior-data conflict tail probability: compares the prefix-to-posterior KL
// divergence of the observed split against its distribution under prefixes
// drawn from the marginal predictive.
ConflictResult conflict_tail_probability(const PluginParams& plugin,
                                         const Eigen::VectorXd& t_obs,
                                         const Eigen::VectorXd& y_obs,
                                         Eigen::Index split_index,
                                         long n_prior_draws, long n_kl_samples,
                                         std::uint64_t seed);

nlohmann::json to_json(const PredictiveResult& result);
nlohmann::json to_json(const PluginParams& plugin);
PluginParams plugin_from_json(const nlohmann::json& j);

}  // namespace dmlmm
