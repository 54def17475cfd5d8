#include "dmlmm/predict.hpp"

#include <algorithm>
#include <cmath>

#include "dmlmm/common.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

namespace dmlmm {

void validate_plugin(const PluginParams& plugin) {
  validate_mixture(plugin.beta_prior);
  validate_spec(plugin.basis);
  if (plugin.beta_prior.dim() != plugin.basis.dimension) {
    throw ContractViolation("plugin: mixture dimension != basis dimension");
  }
  if (!(plugin.sigma2 > 0.0)) {
    throw ContractViolation("plugin: sigma2 must be positive");
  }
}

namespace {

void check_grid(const Eigen::VectorXd& grid) {
  if (grid.size() < 1) throw ContractViolation("predictive: empty grid");
  for (Eigen::Index i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) {
      throw ContractViolation("predictive: grid must be strictly increasing");
    }
  }
}

}  // namespace

PredictiveResult marginal_predictive(const PluginParams& plugin,
                                     const Eigen::VectorXd& t_grid) {
  validate_plugin(plugin);
  check_grid(t_grid);
  const Eigen::MatrixXd bp = evaluate_basis(plugin.basis, t_grid).values;
  GaussianMixture out;
  out.weights = plugin.beta_prior.weights;
  for (int k = 0; k < plugin.beta_prior.components(); ++k) {
    out.means.push_back(bp * plugin.beta_prior.means[k]);
    Eigen::MatrixXd c = bp * plugin.beta_prior.covariances[k] * bp.transpose();
    c.diagonal().array() += plugin.sigma2;
    out.covariances.push_back(0.5 * (c + c.transpose()));
  }
  return {std::move(out), t_grid, plugin.beta_prior.weights, "marginal"};
}

PredictiveResult predictive(const PluginParams& plugin,
                            const Eigen::VectorXd& t_obs,
                            const Eigen::VectorXd& y_obs,
                            const Eigen::VectorXd& t_grid,
                            const std::string& provenance) {
  validate_plugin(plugin);
  check_grid(t_grid);
  if (t_obs.size() != y_obs.size()) {
    throw ContractViolation("predictive: t_obs and y_obs length mismatch");
  }
  if (t_obs.size() == 0) {
    PredictiveResult r = marginal_predictive(plugin, t_grid);
    if (!provenance.empty()) r.provenance = provenance;
    return r;
  }
  LinearObservationMap map;
  map.obs_matrix = evaluate_basis(plugin.basis, t_obs).values;
  map.pred_matrix = evaluate_basis(plugin.basis, t_grid).values;
  map.noise_variance = plugin.sigma2;
  GaussianMixture mix = condition(plugin.beta_prior, map, y_obs);
  Eigen::VectorXd w = mix.weights;
  return {std::move(mix), t_grid, std::move(w),
          provenance.empty() ? "subject" : provenance};
}

GaussianMixture scalar_marginal(const PredictiveResult& result,
                                Eigen::Index grid_index) {
  if (grid_index < 0 || grid_index >= result.grid.size()) {
    throw ContractViolation("scalar_marginal: grid index out of range");
  }
  GaussianMixture out;
  out.weights = result.mixture.weights;
  for (int k = 0; k < result.mixture.components(); ++k) {
    Eigen::VectorXd m(1);
    m[0] = result.mixture.means[k][grid_index];
    Eigen::MatrixXd c(1, 1);
    c(0, 0) = result.mixture.covariances[k](grid_index, grid_index);
    out.means.push_back(std::move(m));
    out.covariances.push_back(std::move(c));
  }
  return out;
}

double mixture_quantile(const GaussianMixture& scalar_gmm, double p) {
  if (scalar_gmm.dim() != 1) {
    throw ContractViolation("mixture_quantile: mixture must be 1-D");
  }
  if (!(p > 0.0 && p < 1.0)) {
    throw ContractViolation("mixture_quantile: p must lie in (0,1)");
  }
  const Moments mom = moments(scalar_gmm);
  const double sd = std::sqrt(std::max(mom.covariance(0, 0), 1e-300));
  double lo = mom.mean[0] - 12.0 * sd;
  double hi = mom.mean[0] + 12.0 * sd;
  for (int attempt = 0; attempt < 60 && cdf_scalar(scalar_gmm, lo) > p; ++attempt) {
    lo -= (hi - lo);
  }
  for (int attempt = 0; attempt < 60 && cdf_scalar(scalar_gmm, hi) < p; ++attempt) {
    hi += (hi - lo);
  }
  if (cdf_scalar(scalar_gmm, lo) > p || cdf_scalar(scalar_gmm, hi) < p) {
    throw NumericalError("mixture_quantile: failed to bracket quantile");
  }
  while (hi - lo > 1e-8) {
    const double mid = 0.5 * (lo + hi);
    if (cdf_scalar(scalar_gmm, mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> pointwise_band(
    const PredictiveResult& result, double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw ContractViolation("pointwise_band: level must lie in (0,1)");
  }
  const Eigen::Index t = result.grid.size();
  Eigen::VectorXd lower(t), upper(t);
  const double alpha = 1.0 - level;
  for (Eigen::Index i = 0; i < t; ++i) {
    const GaussianMixture sm = scalar_marginal(result, i);
    lower[i] = mixture_quantile(sm, 0.5 * alpha);
    upper[i] = mixture_quantile(sm, 1.0 - 0.5 * alpha);
  }
  return {lower, upper};
}

double threshold_risk(const PredictiveResult& result, Eigen::Index grid_index,
                      double threshold) {
  return cdf_scalar(scalar_marginal(result, grid_index), threshold);
}

std::pair<int, Eigen::VectorXd> cluster_assign(const PluginParams& plugin,
                                               const Eigen::VectorXd& t_obs,
                                               const Eigen::VectorXd& y_obs) {
  if (t_obs.size() < 1) {
    throw ContractViolation("cluster_assign: needs at least one observation");
  }
  validate_plugin(plugin);
  const Eigen::MatrixXd bo = evaluate_basis(plugin.basis, t_obs).values;
  const GaussianMixture post =
      condition_latent(plugin.beta_prior, bo, plugin.sigma2, y_obs);
  int best = 0;
  for (int k = 1; k < post.components(); ++k) {
    if (post.weights[k] > post.weights[best]) best = k;
  }
  return {best, post.weights};
}

Eigen::VectorXd hdr_log_density_thresholds(const PredictiveResult& result,
                                           const std::vector<double>& levels,
                                           std::uint64_t seed, long n_draws) {
  const Eigen::MatrixXd draws = sample(result.mixture, n_draws, seed);
  std::vector<double> logs(n_draws);
  for (long i = 0; i < n_draws; ++i) {
    logs[i] = log_pdf(result.mixture, draws.row(i).transpose());
  }
  std::sort(logs.begin(), logs.end());
  Eigen::VectorXd out(levels.size());
  for (std::size_t j = 0; j < levels.size(); ++j) {
    const double level = levels[j];
    if (!(level > 0.0 && level < 1.0)) {
      throw ContractViolation("hdr: level must lie in (0,1)");
    }
    // Points with log density above the (1 - level) quantile form the HDR.
    const double q = 1.0 - level;
    const long idx = std::min<long>(
        n_draws - 1, static_cast<long>(std::floor(q * (n_draws - 1))));
    out[j] = logs[idx];
  }
  return out;
}

bool elliptical_coverage(const PredictiveResult& result,
                         const Eigen::VectorXd& y_true, double level,
                         std::uint64_t seed) {
  if (y_true.size() != result.mixture.dim()) {
    throw ContractViolation("elliptical_coverage: dimension mismatch");
  }
  const Eigen::VectorXd thr =
      hdr_log_density_thresholds(result, {level}, seed);
  return log_pdf(result.mixture, y_true) >= thr[0];
}

ConflictResult conflict_tail_probability(const PluginParams& plugin,
                                         const Eigen::VectorXd& t_obs,
                                         const Eigen::VectorXd& y_obs,
                                         Eigen::Index split_index,
                                         long n_prior_draws, long n_kl_samples,
                                         std::uint64_t seed) {
  validate_plugin(plugin);
  const Eigen::Index n = t_obs.size();
  if (split_index < 1 || split_index >= n) {
    throw ContractViolation("conflict: split index must satisfy 1 <= t < n");
  }
  if (n_prior_draws < 100) {
    throw ContractViolation("conflict: need at least 100 prior draws");
  }
  const Eigen::VectorXd t_pre = t_obs.head(split_index);
  const Eigen::VectorXd t_suf = t_obs.tail(n - split_index);

  const PredictiveResult marg = marginal_predictive(plugin, t_suf);
  const PredictiveResult marg_pre = marginal_predictive(plugin, t_pre);

  auto divergence = [&](const Eigen::VectorXd& prefix,
                        std::uint64_t kl_seed) -> KlEstimate {
    const PredictiveResult cond =
        predictive(plugin, t_pre, prefix, t_suf, "conflict");
    return kl_mc(cond.mixture, marg.mixture, n_kl_samples, kl_seed);
  };

  const KlEstimate obs = divergence(y_obs.head(split_index), derive_seed(seed, 0));
  long exceed = 0;
  for (long r = 0; r < n_prior_draws; ++r) {
    const Eigen::MatrixXd draw =
        sample(marg_pre.mixture, 1, derive_seed(seed, 2 * r + 1));
    const KlEstimate g =
        divergence(draw.row(0).transpose(), derive_seed(seed, 2 * r + 2));
    if (g.value >= obs.value) ++exceed;
  }
  ConflictResult out;
  // Add-one Monte Carlo tail probability: uniform on its grid under the null.
  out.p = static_cast<double>(exceed + 1) / static_cast<double>(n_prior_draws + 1);
  out.g_observed = obs.value;
  out.kl_se = obs.std_error;
  out.n_prior_draws = n_prior_draws;
  return out;
}

nlohmann::json to_json(const PredictiveResult& result) {
  nlohmann::json j;
  j["mixture"] = to_json(result.mixture);
  j["grid"] = std::vector<double>(result.grid.begin(), result.grid.end());
  j["tilde_weights"] = std::vector<double>(result.tilde_weights.begin(),
                                           result.tilde_weights.end());
  j["provenance"] = result.provenance;
  return j;
}

nlohmann::json to_json(const PluginParams& plugin) {
  nlohmann::json j;
  j["beta_prior"] = to_json(plugin.beta_prior);
  j["sigma2"] = plugin.sigma2;
  j["basis"] = to_json(plugin.basis);
  return j;
}

PluginParams plugin_from_json(const nlohmann::json& j) {
  PluginParams p;
  p.beta_prior = mixture_from_json(j.at("beta_prior"));
  p.sigma2 = j.at("sigma2").get<double>();
  p.basis = basis_from_json(j.at("basis"));
  validate_plugin(p);
  return p;
}

}  // namespace dmlmm
