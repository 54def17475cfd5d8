#include "dmlmm/dmfa.hpp"

#include <cmath>

#include "dmlmm/common.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

namespace dmlmm {

std::uint64_t DmfaArchitecture::total_paths() const {
  std::uint64_t total = 1;
  for (int k : components) {
    if (k > 0 && total > (1ULL << 62) / static_cast<std::uint64_t>(k)) {
      throw ContractViolation("architecture: path count overflows");
    }
    total *= static_cast<std::uint64_t>(k);
  }
  return total;
}

ArchValidation validate(const DmfaArchitecture& arch) {
  ArchValidation v;
  auto fail = [&v](const std::string& msg) {
    v.ok = false;
    v.violations.push_back(msg);
  };
  if (arch.layers < 1) fail("layers must be >= 1");
  if (static_cast<int>(arch.components.size()) != arch.layers) {
    fail("components must list one entry per layer");
  }
  if (static_cast<int>(arch.dims.size()) != arch.layers + 1) {
    fail("dims must have layers + 1 entries");
  }
  if (!v.ok) return v;
  for (int l = 0; l < arch.layers; ++l) {
    if (arch.components[l] < 1) {
      fail("layer " + std::to_string(l + 1) + ": components must be >= 1");
    }
  }
  if (arch.dims.back() < 1) fail("top-layer dimension must be >= 1");
  for (int l = 0; l < arch.layers; ++l) {
    // Anderson-Rubin condition for factor-model identifiability.
    if (2 * arch.dims[l + 1] > arch.dims[l] - 1) {
      fail("layer " + std::to_string(l + 1) + ": dimension " +
           std::to_string(arch.dims[l + 1]) + " exceeds (" +
           std::to_string(arch.dims[l]) + " - 1) / 2");
    }
  }
  if (v.ok) {
    try {
      arch.total_paths();
    } catch (const ContractViolation& e) {
      fail(e.what());
    }
  }
  return v;
}

void require_valid(const DmfaArchitecture& arch) {
  const ArchValidation v = validate(arch);
  if (!v.ok) {
    std::string msg = "invalid architecture:";
    for (const auto& s : v.violations) msg += " " + s + ";";
    throw ContractViolation(msg);
  }
}

std::vector<std::vector<int>> enumerate_paths(const DmfaArchitecture& arch) {
  require_valid(arch);
  const std::uint64_t total = arch.total_paths();
  std::vector<std::vector<int>> paths;
  paths.reserve(total);
  std::vector<int> cur(arch.layers, 0);
  for (std::uint64_t i = 0; i < total; ++i) {
    paths.push_back(cur);
    for (int l = arch.layers - 1; l >= 0; --l) {
      if (++cur[l] < arch.components[l]) break;
      cur[l] = 0;
    }
  }
  return paths;
}

void validate_params(const DmfaParams& params) {
  require_valid(params.arch);
  const auto& arch = params.arch;
  if (static_cast<int>(params.layers.size()) != arch.layers) {
    throw ContractViolation("params: layer count mismatch");
  }
  for (int l = 0; l < arch.layers; ++l) {
    const auto& lay = params.layers[l];
    const int k = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    if (lay.weights.size() != k || static_cast<int>(lay.means.size()) != k ||
        static_cast<int>(lay.loadings.size()) != k ||
        static_cast<int>(lay.noise.size()) != k) {
      throw ContractViolation("params: component count mismatch at layer " +
                              std::to_string(l + 1));
    }
    if (std::fabs(lay.weights.sum() - 1.0) > 1e-12 ||
        (lay.weights.array() < 0.0).any()) {
      throw ContractViolation("params: layer " + std::to_string(l + 1) +
                              " weights are not a probability vector");
    }
    for (int c = 0; c < k; ++c) {
      if (lay.means[c].size() != dprev || lay.noise[c].size() != dprev ||
          lay.loadings[c].rows() != dprev || lay.loadings[c].cols() != dnext) {
        throw ContractViolation("params: shape mismatch at layer " +
                                std::to_string(l + 1) + " component " +
                                std::to_string(c));
      }
      if ((lay.noise[c].array() <= 0.0).any()) {
        throw ContractViolation("params: nonpositive noise scale at layer " +
                                std::to_string(l + 1));
      }
      for (int r = 0; r < dprev; ++r) {
        for (int s = r + 1; s < dnext; ++s) {
          if (lay.loadings[c](r, s) != 0.0) {
            throw ContractViolation("params: loading not lower triangular at layer " +
                                    std::to_string(l + 1));
          }
        }
      }
    }
  }
}

Eigen::MatrixXd lower_triangular(Eigen::MatrixXd m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = r + 1; c < m.cols(); ++c) m(r, c) = 0.0;
  }
  return m;
}

GaussianMixture collapse(const DmfaParams& params) {
  validate_params(params);
  const auto& arch = params.arch;
  const auto paths = enumerate_paths(arch);
  GaussianMixture out;
  out.weights.resize(paths.size());
  out.means.reserve(paths.size());
  out.covariances.reserve(paths.size());
  for (std::size_t p = 0; p < paths.size(); ++p) {
    const auto& path = paths[p];
    double w = 1.0;
    Eigen::VectorXd mean = params.layers[0].means[path[0]];
    Eigen::MatrixXd cov =
        Eigen::MatrixXd(params.layers[0].noise[path[0]].asDiagonal());
    // Running product of loadings down to the current layer.
    Eigen::MatrixXd prod = params.layers[0].loadings[path[0]];
    w *= params.layers[0].weights[path[0]];
    for (int l = 1; l < arch.layers; ++l) {
      const auto& lay = params.layers[l];
      const int c = path[l];
      w *= lay.weights[c];
      mean += prod * lay.means[c];
      cov += prod * lay.noise[c].asDiagonal() * prod.transpose();
      prod = (prod * lay.loadings[c]).eval();
    }
    // Top-layer factor is standard normal.
    cov += prod * prod.transpose();
    out.weights[p] = w;
    out.means.push_back(std::move(mean));
    out.covariances.push_back(0.5 * (cov + cov.transpose()));
  }
  // Guard against accumulated round-off in the weight products.
  out.weights /= out.weights.sum();
  validate_mixture(out);
  return out;
}

Eigen::MatrixXd sample_beta(const DmfaParams& params, long count,
                            std::uint64_t seed, std::vector<long>* path_out) {
  validate_params(params);
  if (count < 1) throw ContractViolation("sample_beta: count must be >= 1");
  const auto& arch = params.arch;
  Rng rng(seed);
  Eigen::MatrixXd out(count, arch.dims[0]);
  if (path_out) path_out->resize(count);
  for (long i = 0; i < count; ++i) {
    Eigen::VectorXd x = rng.normal_vector(arch.dims.back());
    long flat = 0;
    for (int l = arch.layers - 1; l >= 0; --l) {
      const auto& lay = params.layers[l];
      const int c = static_cast<int>(rng.categorical(lay.weights));
      flat += c * [&] {
        long stride = 1;
        for (int m = l + 1; m < arch.layers; ++m) stride *= arch.components[m];
        return stride;
      }();
      Eigen::VectorXd eps = rng.normal_vector(arch.dims[l]);
      x = (lay.means[c] + lay.loadings[c] * x +
           lay.noise[c].cwiseSqrt().cwiseProduct(eps))
              .eval();
    }
    out.row(i) = x.transpose();
    if (path_out) (*path_out)[i] = flat;
  }
  return out;
}

double PriorHyper::dirichlet_for_layer(int layer, int k_components) const {
  if (layer < static_cast<int>(dirichlet_concentration.size())) {
    return dirichlet_concentration[layer];
  }
  return 1.0 / static_cast<double>(k_components);
}

DmfaAuxScales unit_aux_scales(const DmfaArchitecture& arch) {
  DmfaAuxScales aux;
  aux.noise_psi.resize(arch.layers);
  aux.loading_lambda2.resize(arch.layers);
  aux.loading_nu.resize(arch.layers);
  aux.loading_tau2.resize(arch.layers);
  aux.loading_xi.resize(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    const int k = arch.components[l];
    aux.noise_psi[l].assign(k, Eigen::VectorXd::Ones(arch.dims[l]));
    aux.loading_lambda2[l].assign(
        k, Eigen::MatrixXd::Ones(arch.dims[l], arch.dims[l + 1]));
    aux.loading_nu[l].assign(
        k, Eigen::MatrixXd::Ones(arch.dims[l], arch.dims[l + 1]));
    aux.loading_tau2[l] = Eigen::VectorXd::Ones(k);
    aux.loading_xi[l] = Eigen::VectorXd::Ones(k);
  }
  return aux;
}

namespace {

double log_cauchy(double x, double scale) {
  return std::log(scale / M_PI) - std::log(scale * scale + x * x);
}

// log IG(x; shape, rate) with density rate^shape / Gamma(shape) *
// x^{-shape-1} exp(-rate / x).
double log_invgamma(double x, double shape, double rate) {
  if (!(x > 0.0)) throw ContractViolation("log_invgamma: x must be positive");
  return shape * std::log(rate) - std::lgamma(shape) -
         (shape + 1.0) * std::log(x) - rate / x;
}

double log_dirichlet(const Eigen::VectorXd& w, double conc) {
  const int k = static_cast<int>(w.size());
  double sum = std::lgamma(conc * k) - k * std::lgamma(conc);
  for (int i = 0; i < k; ++i) sum += (conc - 1.0) * std::log(w[i]);
  return sum;
}

}  // namespace

double log_prior(const DmfaParams& params, const PriorHyper& hyper,
                 const DmfaAuxScales& aux) {
  validate_params(params);
  if (!(hyper.mean_cauchy_scale > 0.0) || !(hyper.scale_halfcauchy_a > 0.0) ||
      !(hyper.horseshoe_global_scale > 0.0)) {
    throw ContractViolation("log_prior: hyper scales must be positive");
  }
  const auto& arch = params.arch;
  double total = 0.0;
  const double a2 = hyper.scale_halfcauchy_a * hyper.scale_halfcauchy_a;
  const double hs2 =
      hyper.horseshoe_global_scale * hyper.horseshoe_global_scale;
  for (int l = 0; l < arch.layers; ++l) {
    const auto& lay = params.layers[l];
    const int k = arch.components[l];
    if (k > 1) {
      total += log_dirichlet(lay.weights, hyper.dirichlet_for_layer(l, k));
    }
    for (int c = 0; c < k; ++c) {
      for (Eigen::Index j = 0; j < lay.means[c].size(); ++j) {
        total += log_cauchy(lay.means[c][j], hyper.mean_cauchy_scale);
      }
      for (Eigen::Index j = 0; j < lay.noise[c].size(); ++j) {
        const double psi = aux.noise_psi[l][c][j];
        if (!(psi > 0.0)) throw ContractViolation("log_prior: nonpositive psi");
        total += log_invgamma(lay.noise[c][j], 0.5, 1.0 / psi);
        total += log_invgamma(psi, 0.5, 1.0 / a2);
      }
      const double tau2 = aux.loading_tau2[l][c];
      const double xi = aux.loading_xi[l][c];
      if (!(tau2 > 0.0) || !(xi > 0.0)) {
        throw ContractViolation("log_prior: nonpositive horseshoe scale");
      }
      total += log_invgamma(tau2, 0.5, 1.0 / xi);
      total += log_invgamma(xi, 0.5, 1.0 / hs2);
      const auto& load = lay.loadings[c];
      for (Eigen::Index r = 0; r < load.rows(); ++r) {
        for (Eigen::Index s = 0; s <= std::min<Eigen::Index>(r, load.cols() - 1);
             ++s) {
          const double lam2 = aux.loading_lambda2[l][c](r, s);
          const double nu = aux.loading_nu[l][c](r, s);
          if (!(lam2 > 0.0) || !(nu > 0.0)) {
            throw ContractViolation("log_prior: nonpositive horseshoe scale");
          }
          const double var = lam2 * tau2;
          total += -0.5 * (kLog2Pi + std::log(var)) -
                   0.5 * load(r, s) * load(r, s) / var;
          total += log_invgamma(lam2, 0.5, 1.0 / nu);
          total += log_invgamma(nu, 0.5, 1.0);
        }
      }
    }
  }
  return total;
}

nlohmann::json to_json(const DmfaArchitecture& arch) {
  nlohmann::json j;
  j["layers"] = arch.layers;
  j["components"] = arch.components;
  j["dims"] = arch.dims;
  return j;
}

DmfaArchitecture arch_from_json(const nlohmann::json& j) {
  DmfaArchitecture arch;
  arch.layers = j.at("layers").get<int>();
  arch.components = j.at("components").get<std::vector<int>>();
  arch.dims = j.at("dims").get<std::vector<int>>();
  return arch;
}

nlohmann::json to_json(const DmfaParams& params) {
  nlohmann::json j;
  j["architecture"] = to_json(params.arch);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& lay : params.layers) {
    nlohmann::json jl;
    jl["weights"] = std::vector<double>(lay.weights.begin(), lay.weights.end());
    nlohmann::json means = nlohmann::json::array();
    nlohmann::json loadings = nlohmann::json::array();
    nlohmann::json noise = nlohmann::json::array();
    for (std::size_t c = 0; c < lay.means.size(); ++c) {
      means.push_back(
          std::vector<double>(lay.means[c].begin(), lay.means[c].end()));
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index r = 0; r < lay.loadings[c].rows(); ++r) {
        std::vector<double> row(lay.loadings[c].cols());
        for (Eigen::Index s = 0; s < lay.loadings[c].cols(); ++s) {
          row[s] = lay.loadings[c](r, s);
        }
        rows.push_back(row);
      }
      loadings.push_back(rows);
      noise.push_back(
          std::vector<double>(lay.noise[c].begin(), lay.noise[c].end()));
    }
    jl["means"] = means;
    jl["loadings"] = loadings;
    jl["noise"] = noise;
    layers.push_back(jl);
  }
  j["layers"] = layers;
  return j;
}

}  // namespace dmlmm
