#pragma once

#include <Eigen/Dense>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmlmm {

enum class BasisFamily { legendre, bspline, seasonal_bspline, composite };

std::string family_name(BasisFamily f);
BasisFamily family_from_name(const std::string& name);

// Describes a basis expansion B(t). For splines an empty knot vector
// means uniform interior knots with degree-fold boundary replication over
// the domain. A NaN domain endpoint is inferred from data before use
// (see infer_domain).
struct BasisSpec {
  BasisFamily family = BasisFamily::bspline;
  int dimension = 0;
  double t_min = std::numeric_limits<double>::quiet_NaN();
  double t_max = std::numeric_limits<double>::quiet_NaN();
  int degree = 3;                 // spline families
  std::vector<double> knots;      // optional explicit knot vector (bspline)
  double period = 0.0;            // seasonal family
  std::vector<BasisSpec> blocks;  // composite family
};

struct DesignMatrix {
  Eigen::MatrixXd values;  // n x d
  Eigen::VectorXd times;   // n
};

void validate_spec(const BasisSpec& spec);

// Clamped uniform knot vector for a bspline spec (dimension + degree + 1 knots).
std::vector<double> default_knots(const BasisSpec& spec);

DesignMatrix eval_legendre(const BasisSpec& spec, const Eigen::VectorXd& times);
DesignMatrix eval_bspline(const BasisSpec& spec, const Eigen::VectorXd& times);
DesignMatrix eval_seasonal(const BasisSpec& spec, const Eigen::VectorXd& times);
DesignMatrix eval_composite(const BasisSpec& spec, const Eigen::VectorXd& times);

// Dispatch on spec.family.
DesignMatrix evaluate_basis(const BasisSpec& spec, const Eigen::VectorXd& times);

// Fill NaN domain endpoints from observed times, expanded by a 1e-6
// relative margin.
BasisSpec infer_domain(BasisSpec spec, double data_min, double data_max);

nlohmann::json to_json(const BasisSpec& spec);
BasisSpec basis_from_json(const nlohmann::json& j);

}  // namespace dmlmm
