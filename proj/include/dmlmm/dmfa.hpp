#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmlmm/gmm.hpp"

namespace dmlmm {

// Layer sizes of a deep mixture-of-factor-analyzers prior. dims has L+1
// entries, dims[0] being the random-effect dimension d. Valid architectures
// satisfy the Anderson-Rubin condition dims[l+1] <= (dims[l] - 1) / 2.
struct DmfaArchitecture {
  int layers = 0;
  std::vector<int> components;  // K per layer, length L
  std::vector<int> dims;        // D(0)..D(L), length L + 1

  std::uint64_t total_paths() const;
};

struct ArchValidation {
  bool ok = true;
  std::vector<std::string> violations;
};

ArchValidation validate(const DmfaArchitecture& arch);
void require_valid(const DmfaArchitecture& arch);

// Lexicographically ordered component tuples (k_1, ..., k_L), 0-based.
std::vector<std::vector<int>> enumerate_paths(const DmfaArchitecture& arch);

// All parameters of one layer's factor analyzers.
struct DmfaLayerParams {
  Eigen::VectorXd weights;                // K(l)
  std::vector<Eigen::VectorXd> means;     // K(l) x D(l-1)
  std::vector<Eigen::MatrixXd> loadings;  // K(l) x D(l-1) x D(l), lower triangular
  std::vector<Eigen::VectorXd> noise;     // K(l) x D(l-1), diagonal variances
};

struct DmfaParams {
  DmfaArchitecture arch;
  std::vector<DmfaLayerParams> layers;
};

void validate_params(const DmfaParams& params);

// Zero out entries above the diagonal; applied on every loading write.
Eigen::MatrixXd lower_triangular(Eigen::MatrixXd m);

// Exact finite-mixture representation over the bottom layer. Per path:
// weight is the product of layer weights, mean accumulates loadings applied
// to the layer means, and covariance accumulates loadings applied to the
// diagonal noise plus the identity variance of the top-layer factor.
GaussianMixture collapse(const DmfaParams& params);

// Top-down ancestral draws; deterministic under seed. path_out, when given,
// receives the flattened path index of each draw (lexicographic order).
Eigen::MatrixXd sample_beta(const DmfaParams& params, long count,
                            std::uint64_t seed,
                            std::vector<long>* path_out = nullptr);

// Hyperprior scales. Dirichlet concentrations default to 1/K per layer when
// the vector is empty.
struct PriorHyper {
  double mean_cauchy_scale = 1.0;
  double scale_halfcauchy_a = 1.0;
  double horseshoe_global_scale = 1.0;
  std::vector<double> dirichlet_concentration;

  double dirichlet_for_layer(int layer, int k_components) const;
};

// Auxiliary scale variables for the hierarchical prior representation:
// inverse-gamma mixing scales for the half-Cauchy noise terms and the
// horseshoe local/global chain for the loadings.
struct DmfaAuxScales {
  // Per layer l, component k, coordinate j: psi for the noise scale chain.
  std::vector<std::vector<Eigen::VectorXd>> noise_psi;
  // Per layer, component: local horseshoe scales (lambda^2, nu) per loading
  // entry (stored dense, only lower-triangle entries are read).
  std::vector<std::vector<Eigen::MatrixXd>> loading_lambda2;
  std::vector<std::vector<Eigen::MatrixXd>> loading_nu;
  // Per layer, component: global horseshoe scale chain (tau^2, xi).
  std::vector<Eigen::VectorXd> loading_tau2;
  std::vector<Eigen::VectorXd> loading_xi;
};

DmfaAuxScales unit_aux_scales(const DmfaArchitecture& arch);

// Log density of the parameters under the hierarchical prior: Cauchy on
// means, half-Cauchy noise scales via their inverse-gamma chain evaluated at
// the supplied auxiliaries, horseshoe loadings, Dirichlet weights.
double log_prior(const DmfaParams& params, const PriorHyper& hyper,
                 const DmfaAuxScales& aux);

nlohmann::json to_json(const DmfaParams& params);
nlohmann::json to_json(const DmfaArchitecture& arch);
DmfaArchitecture arch_from_json(const nlohmann::json& j);

}  // namespace dmlmm
