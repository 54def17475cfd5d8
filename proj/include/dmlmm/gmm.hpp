#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmlmm {

// Finite Gaussian mixture: the common currency for priors, marginal
// likelihoods and predictive distributions. Invariants (checked by
// make_mixture / validate_mixture):
//   - weights nonnegative, summing to 1 within 1e-12
//   - covariances symmetric within 1e-10 and PSD (attempted factorization)
//   - all components share one dimension
struct GaussianMixture {
  Eigen::VectorXd weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covariances;

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
};

// Linear-Gaussian observation scheme: y = obs_matrix * x + N(0, noise * I),
// predictions at pred_matrix * x plus independent noise of the same variance.
struct LinearObservationMap {
  Eigen::MatrixXd obs_matrix;   // n x D
  Eigen::MatrixXd pred_matrix;  // T x D
  double noise_variance = 1.0;
};

void validate_mixture(const GaussianMixture& gmm);
GaussianMixture make_mixture(Eigen::VectorXd weights,
                             std::vector<Eigen::VectorXd> means,
                             std::vector<Eigen::MatrixXd> covariances);

// log sum_k w_k phi(x; mu_k, Sigma_k), evaluated with log-sum-exp.
double log_pdf(const GaussianMixture& gmm, const Eigen::VectorXd& x);

// CDF of a one-dimensional mixture.
double cdf_scalar(const GaussianMixture& gmm, double x);

// Exact mixture mean and covariance (law of total variance).
struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};
Moments moments(const GaussianMixture& gmm);

// Posterior over the latent x given y ~ N(obs * x, noise * I); weights are
// reweighted by each component's marginal likelihood of y.
GaussianMixture condition_latent(const GaussianMixture& gmm,
                                 const Eigen::MatrixXd& obs_matrix,
                                 double noise_variance,
                                 const Eigen::VectorXd& y_obs);

// Conditional distribution of pred_matrix * x + noise given observed y.
// Equivalent to condition_latent followed by the affine pushforward with
// independent predictive noise.
GaussianMixture condition(const GaussianMixture& gmm,
                          const LinearObservationMap& map,
                          const Eigen::VectorXd& y_obs);

// Ancestral sampling; deterministic for a fixed seed. If component_out is
// non-null it receives the chosen component index per draw.
Eigen::MatrixXd sample(const GaussianMixture& gmm, long count,
                       std::uint64_t seed,
                       std::vector<int>* component_out = nullptr);

struct KlEstimate {
  double value = 0.0;
  double std_error = 0.0;
  long clamped = 0;  // samples where log q hit the configured floor
};

// Monte Carlo estimate of KL(p || q) from n_samples draws of p.
KlEstimate kl_mc(const GaussianMixture& p, const GaussianMixture& q,
                 long n_samples, std::uint64_t seed,
                 double log_floor = -745.0);

// Drop components where keep is false and rescale surviving weights.
GaussianMixture renormalize(const GaussianMixture& gmm,
                            const std::vector<bool>& keep);

nlohmann::json to_json(const GaussianMixture& gmm);
GaussianMixture mixture_from_json(const nlohmann::json& j);

namespace detail {

// Cholesky with the standard jitter ladder: 1e-9 * tr/D, then 1e-6 * tr/D,
// then a NumericalError naming the offending component.
struct CholFactor {
  Eigen::MatrixXd lower;
  double log_det = 0.0;  // log det of the (jittered) covariance
};
CholFactor chol_psd(const Eigen::MatrixXd& cov, const std::string& context,
                    int component);

double log_mvn_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                   const CholFactor& chol);

}  // namespace detail

}  // namespace dmlmm
