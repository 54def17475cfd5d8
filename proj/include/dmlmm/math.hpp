#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace dmlmm {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Weights below this value are treated as exactly zero in density sums.
inline constexpr double kWeightFloor = 1e-300;

// Default clamp for log densities in Monte Carlo KL estimation.
inline constexpr double kLogFloor = -745.0;

double log_sum_exp(const Eigen::VectorXd& v);

// Standard normal CDF and its inverse (Acklam's rational approximation,
// refined with one Halley step; |relative error| < 1e-13 over (0,1)).
double norm_cdf(double x);
double norm_quantile(double p);

double digamma(double x);

// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);

// Quantile of the chi-square distribution with d degrees of freedom.
double chi2_quantile(double p, double dof);

}  // namespace dmlmm
