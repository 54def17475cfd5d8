#pragma once

// Independent reference implementations used to check the library. These
// deliberately avoid the library's own computational paths: plain formulas,
// naive recursions, dense constructions, quadrature and Monte Carlo.

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "dmlmm/dmfa.hpp"
#include "dmlmm/gmm.hpp"

namespace oracle {

double log_normal_pdf(double x, double mean, double var);

// Adaptive Simpson integration.
double integrate(const std::function<double(double)>& f, double a, double b,
                 double tol = 1e-10, int max_depth = 40);

// Dense joint-Gaussian conditioning: builds the (n+T)-dimensional joint of
// each component explicitly and conditions with generic linear algebra.
dmlmm::GaussianMixture dense_condition(const dmlmm::GaussianMixture& prior,
                                       const Eigen::MatrixXd& b_obs,
                                       const Eigen::MatrixXd& b_pred,
                                       double noise, const Eigen::VectorXd& y);

// Self-normalized importance sampling estimate of E[pred | y]: draws from
// the prior mixture and weights by the observation likelihood.
struct IsMean {
  Eigen::VectorXd mean;
  Eigen::VectorXd std_error;
};
IsMean is_conditional_mean(const dmlmm::GaussianMixture& prior,
                           const Eigen::MatrixXd& b_obs,
                           const Eigen::MatrixXd& b_pred, double noise,
                           const Eigen::VectorXd& y, long n_samples,
                           std::uint64_t seed);

// Textbook closed-form KL between two Gaussians.
double gaussian_kl(const Eigen::VectorXd& mp, const Eigen::MatrixXd& cp,
                   const Eigen::VectorXd& mq, const Eigen::MatrixXd& cq);

// Naive recursive Cox-de Boor B-spline value N_{i,p}(t).
double naive_bspline(const std::vector<double>& knots, int i, int p, double t);

// Direct per-path marginalization of a DMFA by forward composition from the
// top layer.
struct PathGaussian {
  double weight;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
std::vector<PathGaussian> enumerate_marginals(const dmlmm::DmfaParams& params);
double enum_log_pdf(const std::vector<PathGaussian>& paths,
                    const Eigen::VectorXd& x);

// Marginal log-evidence of the single-layer, single-component model
//   y_i = B_i beta_i + eps,  beta_i ~ N(mu, b b^T + diag(delta)),
// with the hierarchical scale priors, estimated by defensive importance
// sampling (deterministic seed). mu is integrated analytically.
struct Evidence {
  double log_evidence;
  double std_error;  // on the log scale
};
Evidence tiny_model_evidence(const std::vector<Eigen::MatrixXd>& designs,
                             const std::vector<Eigen::VectorXd>& ys,
                             double mean_cauchy_scale, double halfcauchy_a,
                             double horseshoe_scale, long n_samples,
                             std::uint64_t seed);

}  // namespace oracle
