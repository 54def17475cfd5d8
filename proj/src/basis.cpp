#include "dmlmm/basis.hpp"

#include <algorithm>
#include <cmath>

#include "dmlmm/common.hpp"

namespace dmlmm {

std::string family_name(BasisFamily f) {
  switch (f) {
    case BasisFamily::legendre: return "legendre";
    case BasisFamily::bspline: return "bspline";
    case BasisFamily::seasonal_bspline: return "seasonal_bspline";
    case BasisFamily::composite: return "composite";
  }
  return "?";
}

BasisFamily family_from_name(const std::string& name) {
  if (name == "legendre") return BasisFamily::legendre;
  if (name == "bspline") return BasisFamily::bspline;
  if (name == "seasonal_bspline") return BasisFamily::seasonal_bspline;
  if (name == "composite") return BasisFamily::composite;
  throw ContractViolation("unknown basis family: " + name);
}

namespace {

constexpr double kDomainTol = 1e-9;

void require_domain(const BasisSpec& spec) {
  if (!std::isfinite(spec.t_min) || !std::isfinite(spec.t_max) ||
      !(spec.t_min < spec.t_max)) {
    throw ContractViolation("basis: degenerate or unset domain");
  }
}

void check_in_domain(const BasisSpec& spec, const Eigen::VectorXd& times) {
  const double span = spec.t_max - spec.t_min;
  const double tol = kDomainTol * std::max(1.0, std::fabs(span));
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    if (times[i] < spec.t_min - tol || times[i] > spec.t_max + tol) {
      throw ContractViolation("basis: time at index " + std::to_string(i) +
                              " outside domain [" + std::to_string(spec.t_min) +
                              ", " + std::to_string(spec.t_max) + "]");
    }
  }
}

// Nonzero B-spline values at t on knot vector T: the degree+1 functions
// N_{span-degree..span}. Standard Cox-de Boor triangle.
void bspline_nonzeros(const std::vector<double>& knots, int degree, double t,
                      int span, double* out) {
  std::vector<double> left(degree + 1), right(degree + 1);
  out[0] = 1.0;
  for (int j = 1; j <= degree; ++j) {
    left[j] = t - knots[span + 1 - j];
    right[j] = knots[span + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double tmp = denom > 0.0 ? out[r] / denom : 0.0;
      out[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    out[j] = saved;
  }
}

int find_span(const std::vector<double>& knots, int degree, int dim, double t) {
  // Valid spans are [degree, dim - 1]; clamp t to the closed domain.
  const double lo = knots[degree];
  const double hi = knots[dim];
  if (t >= hi) return dim - 1;
  if (t <= lo) return degree;
  int a = degree, b = dim;
  while (b - a > 1) {
    const int mid = (a + b) / 2;
    if (t < knots[mid]) {
      b = mid;
    } else {
      a = mid;
    }
  }
  return a;
}

}  // namespace

void validate_spec(const BasisSpec& spec) {
  if (spec.dimension < 1) throw ContractViolation("basis: dimension must be >= 1");
  switch (spec.family) {
    case BasisFamily::legendre:
      require_domain(spec);
      break;
    case BasisFamily::bspline: {
      require_domain(spec);
      if (spec.degree < 0) throw ContractViolation("basis: negative degree");
      if (spec.dimension < spec.degree + 1) {
        throw ContractViolation("basis: bspline needs dimension >= degree + 1");
      }
      const auto& k = spec.knots.empty() ? default_knots(spec) : spec.knots;
      if (static_cast<int>(k.size()) != spec.dimension + spec.degree + 1) {
        throw ContractViolation("basis: knot vector must have dimension + degree + 1 entries");
      }
      if (!std::is_sorted(k.begin(), k.end())) {
        throw ContractViolation("basis: knot vector must be nondecreasing");
      }
      break;
    }
    case BasisFamily::seasonal_bspline:
      if (!(spec.period > 0.0)) {
        throw ContractViolation("basis: seasonal period must be positive");
      }
      if (spec.degree < 0) throw ContractViolation("basis: negative degree");
      break;
    case BasisFamily::composite: {
      if (spec.blocks.empty()) {
        throw ContractViolation("basis: composite needs at least one block");
      }
      int total = 0;
      for (const auto& b : spec.blocks) {
        validate_spec(b);
        total += b.dimension;
      }
      if (total != spec.dimension) {
        throw ContractViolation("basis: composite block dimensions must sum to dimension");
      }
      break;
    }
  }
}

std::vector<double> default_knots(const BasisSpec& spec) {
  const int d = spec.dimension;
  const int p = spec.degree;
  const int interior = d - p - 1;
  std::vector<double> knots;
  knots.reserve(d + p + 1);
  for (int i = 0; i <= p; ++i) knots.push_back(spec.t_min);
  for (int i = 1; i <= interior; ++i) {
    knots.push_back(spec.t_min +
                    (spec.t_max - spec.t_min) * i / (interior + 1.0));
  }
  for (int i = 0; i <= p; ++i) knots.push_back(spec.t_max);
  return knots;
}

DesignMatrix eval_legendre(const BasisSpec& spec, const Eigen::VectorXd& times) {
  if (spec.family != BasisFamily::legendre) {
    throw ContractViolation("eval_legendre: wrong family");
  }
  validate_spec(spec);
  check_in_domain(spec, times);
  const int d = spec.dimension;
  Eigen::MatrixXd values(times.size(), d);
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    double u = 2.0 * (times[i] - spec.t_min) / (spec.t_max - spec.t_min) - 1.0;
    u = std::min(1.0, std::max(-1.0, u));
    double pm1 = 1.0, pm2 = 0.0;
    values(i, 0) = 1.0;
    for (int j = 1; j < d; ++j) {
      // Bonnet recurrence: j P_j = (2j-1) u P_{j-1} - (j-1) P_{j-2}.
      const double pj = ((2.0 * j - 1.0) * u * pm1 - (j - 1.0) * pm2) / j;
      values(i, j) = pj;
      pm2 = pm1;
      pm1 = pj;
    }
  }
  return {std::move(values), times};
}

DesignMatrix eval_bspline(const BasisSpec& spec, const Eigen::VectorXd& times) {
  if (spec.family != BasisFamily::bspline) {
    throw ContractViolation("eval_bspline: wrong family");
  }
  validate_spec(spec);
  check_in_domain(spec, times);
  const int d = spec.dimension;
  const int p = spec.degree;
  const std::vector<double> knots =
      spec.knots.empty() ? default_knots(spec) : spec.knots;
  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(times.size(), d);
  std::vector<double> nz(p + 1);
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    const double t = std::min(spec.t_max, std::max(spec.t_min, times[i]));
    const int span = find_span(knots, p, d, t);
    bspline_nonzeros(knots, p, t, span, nz.data());
    for (int r = 0; r <= p; ++r) values(i, span - p + r) = nz[r];
  }
  return {std::move(values), times};
}

DesignMatrix eval_seasonal(const BasisSpec& spec, const Eigen::VectorXd& times) {
  if (spec.family != BasisFamily::seasonal_bspline) {
    throw ContractViolation("eval_seasonal: wrong family");
  }
  validate_spec(spec);
  const int d = spec.dimension;
  const int p = spec.degree;
  const double period = spec.period;
  const double h = period / d;
  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(times.size(), d);
  std::vector<double> nz(p + 1);
  std::vector<double> local_knots(2 * p + 2);
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    double tau = std::fmod(times[i], period);
    if (tau < 0.0) tau += period;
    // Uniform B-splines on the infinite knot grid k*h, columns wrapped mod d.
    int cell = static_cast<int>(std::floor(tau / h));
    if (cell >= d) cell = d - 1;
    for (int j = 0; j < 2 * p + 2; ++j) {
      local_knots[j] = (cell - p + j) * h;
    }
    bspline_nonzeros(local_knots, p, tau, p, nz.data());
    for (int r = 0; r <= p; ++r) {
      int col = (cell - p + r) % d;
      if (col < 0) col += d;
      values(i, col) += nz[r];
    }
  }
  return {std::move(values), times};
}

DesignMatrix eval_composite(const BasisSpec& spec, const Eigen::VectorXd& times) {
  if (spec.family != BasisFamily::composite) {
    throw ContractViolation("eval_composite: wrong family");
  }
  validate_spec(spec);
  Eigen::MatrixXd values(times.size(), spec.dimension);
  int offset = 0;
  for (const auto& block : spec.blocks) {
    const DesignMatrix sub = evaluate_basis(block, times);
    values.middleCols(offset, block.dimension) = sub.values;
    offset += block.dimension;
  }
  return {std::move(values), times};
}

DesignMatrix evaluate_basis(const BasisSpec& spec, const Eigen::VectorXd& times) {
  switch (spec.family) {
    case BasisFamily::legendre: return eval_legendre(spec, times);
    case BasisFamily::bspline: return eval_bspline(spec, times);
    case BasisFamily::seasonal_bspline: return eval_seasonal(spec, times);
    case BasisFamily::composite: return eval_composite(spec, times);
  }
  throw ContractViolation("evaluate_basis: unknown family");
}

BasisSpec infer_domain(BasisSpec spec, double data_min, double data_max) {
  const double span = std::max(data_max - data_min, 1e-12);
  if (!std::isfinite(spec.t_min)) spec.t_min = data_min - 1e-6 * span;
  if (!std::isfinite(spec.t_max)) spec.t_max = data_max + 1e-6 * span;
  for (auto& b : spec.blocks) b = infer_domain(std::move(b), data_min, data_max);
  return spec;
}

nlohmann::json to_json(const BasisSpec& spec) {
  nlohmann::json j;
  j["family"] = family_name(spec.family);
  j["dimension"] = spec.dimension;
  j["t_min"] = spec.t_min;
  j["t_max"] = spec.t_max;
  j["degree"] = spec.degree;
  if (!spec.knots.empty()) {
    j["knots"] = spec.knots;
  } else if (spec.family == BasisFamily::bspline && std::isfinite(spec.t_min) &&
             std::isfinite(spec.t_max)) {
    j["knots"] = default_knots(spec);
  }
  if (spec.period > 0.0) j["period"] = spec.period;
  if (!spec.blocks.empty()) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : spec.blocks) blocks.push_back(to_json(b));
    j["blocks"] = blocks;
  }
  return j;
}

BasisSpec basis_from_json(const nlohmann::json& j) {
  BasisSpec spec;
  spec.family = family_from_name(j.at("family").get<std::string>());
  spec.dimension = j.at("dimension").get<int>();
  if (j.contains("t_min") && !j["t_min"].is_null()) spec.t_min = j["t_min"].get<double>();
  if (j.contains("t_max") && !j["t_max"].is_null()) spec.t_max = j["t_max"].get<double>();
  if (j.contains("degree")) spec.degree = j["degree"].get<int>();
  if (j.contains("knots")) spec.knots = j["knots"].get<std::vector<double>>();
  if (j.contains("period")) spec.period = j["period"].get<double>();
  if (j.contains("blocks")) {
    for (const auto& b : j["blocks"]) spec.blocks.push_back(basis_from_json(b));
  }
  return spec;
}

}  // namespace dmlmm
