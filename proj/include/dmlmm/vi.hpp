#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmlmm/basis.hpp"
#include "dmlmm/dataset.hpp"
#include "dmlmm/dmfa.hpp"
#include "dmlmm/predict.hpp"

namespace dmlmm {

// ---- Variational factors -------------------------------------------------

// Gaussian with independent marginals.
struct DiagGauss {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Full-covariance Gaussian (used for the small per-layer latents and for
// loading rows).
struct FullGauss {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Inverse-gamma factor in (shape, rate) form.
struct IgFactor {
  double shape = 1.0;
  double rate = 1.0;
  double e_inv() const { return shape / rate; }
  double e_log() const;   // E[log x]
  double entropy() const;
  double mean() const;    // posterior mean, harmonic fallback if shape <= 1
};

struct IgVec {
  Eigen::VectorXd shape;
  Eigen::VectorXd rate;
  IgFactor at(Eigen::Index j) const { return {shape[j], rate[j]}; }
};

// Global factors of one DMFA layer.
struct LayerGlobals {
  Eigen::VectorXd dir_alpha;  // Dirichlet over the layer weights
  // Per component:
  std::vector<DiagGauss> mu;                        // component means
  std::vector<std::vector<FullGauss>> load_rows;    // loading rows (free entries)
  std::vector<IgVec> delta;                         // noise variances
  std::vector<IgVec> psi_delta;                     // their half-Cauchy auxiliaries
  std::vector<IgVec> mean_aux;                      // Cauchy mixing scales for mu
  std::vector<Eigen::MatrixXd> hs_lambda_shape, hs_lambda_rate;  // local horseshoe
  std::vector<Eigen::MatrixXd> hs_nu_shape, hs_nu_rate;
  std::vector<IgFactor> tau2;  // global horseshoe scale per loading matrix
  std::vector<IgFactor> xi;
};

// Local factors of one subject.
struct LocalFactors {
  DiagGauss beta;
  std::vector<FullGauss> z;  // one per layer
  Eigen::VectorXd resp;      // joint path responsibilities, length K_total
};

struct VariationalState {
  DmfaArchitecture arch;
  std::vector<LayerGlobals> layers;
  IgFactor sigma2;
  IgFactor psi_sigma;
  std::vector<LocalFactors> locals;
};

// ---- Configuration and results --------------------------------------------

struct FitConfig {
  BasisSpec basis;
  int minibatch_size = 64;
  int max_iterations = 1000;
  double step_s = 1.0;      // a_m = s * (m + tau)^(-kappa)
  double step_tau = 10.0;
  double step_kappa = 0.75;
  double local_tolerance = 1e-9;
  int local_max_sweeps = 30;
  std::uint64_t seed = 0;
  double prune_threshold = 1e-3;
  PriorHyper hyper;
  int threads = 1;

  double step_size(int m) const {
    return step_s * std::pow(static_cast<double>(m) + step_tau, -step_kappa);
  }
};

struct PruneReport {
  struct Entry {
    long path = 0;
    double weight = 0.0;
    double responsibility_mass = 0.0;
    bool kept = true;
  };
  std::vector<Entry> entries;
  int kept = 0;
};

struct FitResult {
  VariationalState state;
  std::vector<double> elbo_trace;
  PluginParams plugin;
  PruneReport pruning;
  int iterations = 0;
  double wall_seconds = 0.0;
};

// ---- Operations ------------------------------------------------------------

// Ridge-seeded, layerwise k-means initialization.
VariationalState init_state(const LongitudinalDataset& data,
                            const DmfaArchitecture& arch,
                            const FitConfig& config);

// Closed-form evidence lower bound. With a subset, per-subject terms are
// rescaled by n/|subset| (unbiased minibatch estimate).
double elbo(const VariationalState& state, const LongitudinalDataset& data,
            const FitConfig& config,
            const std::optional<std::vector<int>>& subset = std::nullopt);

// Coordinate-ascent sweeps over the listed subjects' local factors.
void optimize_local(VariationalState& state, const LongitudinalDataset& data,
                    const std::vector<int>& subject_indices,
                    const FitConfig& config);

// Natural-gradient step on every global factor: convex combination of the
// current natural parameters with the full-conditional estimate from the
// rescaled minibatch, at rate a_m.
void step_global(VariationalState& state, const LongitudinalDataset& data,
                 const std::vector<int>& minibatch, const FitConfig& config,
                 int iteration);

// Posterior-mean collapse with empty-component pruning.
std::pair<PluginParams, PruneReport> prune_and_plugin(
    const VariationalState& state, const FitConfig& config);

// resume_from, when given, continues from a checkpointed state instead of
// running the initializer.
FitResult fit(const LongitudinalDataset& data, const DmfaArchitecture& arch,
              const FitConfig& config,
              const VariationalState* resume_from = nullptr);

// Short runs over the candidates; returns the index of the winner by the
// smoothed tail of the ELBO trace (ties break to the earliest candidate).
int select_architecture(const LongitudinalDataset& data,
                        const std::vector<DmfaArchitecture>& candidates,
                        int short_iters, const FitConfig& config);

// Serialization of the full state (checkpoint/resume).
nlohmann::json to_json(const VariationalState& state);
VariationalState state_from_json(const nlohmann::json& j);

// Per-path responsibility mass summed over subjects.
Eigen::VectorXd responsibility_mass(const VariationalState& state);

// Posterior-mean DMFA parameters implied by the global factors.
DmfaParams posterior_mean_params(const VariationalState& state);

}  // namespace dmlmm
