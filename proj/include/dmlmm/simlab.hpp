#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmlmm/dataset.hpp"
#include "dmlmm/gmm.hpp"

namespace dmlmm {

// ---- Data generating processes ---------------------------------------------

struct Dgp1Options {
  int n_subjects = 600;
  int n_points = 10;
  // Extra per-subject held-out points carrying the noise-free signal value,
  // for predictive evaluation. 0 reproduces the plain generator.
  int n_holdout = 0;
  // Alternatively, move this many of the subject's own (noisy) points to the
  // held-out set, mirroring the removal design of the third generator.
  int n_remove = 0;
};

// Two-group sinusoidal means with a truncated functional error expansion.
LongitudinalDataset gen_dgp1(const Dgp1Options& opts, std::uint64_t seed);
LongitudinalDataset gen_dgp1(std::uint64_t seed);

struct Dgp2Options {
  int n_subjects = 100;
  int n_holdout = 0;    // extra held-out sample times per subject
  double em_step = 5e-4;
  double diffusion = 0.5;
  std::optional<double> fixed_theta;  // overrides the log-uniform draw
  int* resampled_out = nullptr;       // blow-up resample counter
};

// Stochastic Van der Pol oscillator paths sampled on [10, 20].
LongitudinalDataset gen_dgp2(const Dgp2Options& opts, std::uint64_t seed);
LongitudinalDataset gen_dgp2(std::uint64_t seed);

struct Dgp3Options {
  int n_rows = 120;
};

// 40-point cosine/sine grid rows with 15-20 entries moved to the held-out
// set; 36 possible label combinations.
LongitudinalDataset gen_dgp3(const Dgp3Options& opts, std::uint64_t seed);
LongitudinalDataset gen_dgp3(std::uint64_t seed);

// Deterministic solver used by tests and the harness: one noise-free Van der
// Pol trajectory (f, g) integrated to t with small fixed steps.
std::pair<double, double> vdp_reference(double theta, double t, double step);

// ---- Black-box simulator interface ------------------------------------------

struct SimulatorSample {
  Eigen::VectorXd series;
  nlohmann::json params;
};

using SeriesGenerator = std::function<SimulatorSample(std::uint64_t seed)>;
using RejectionPredicate = std::function<bool(const Eigen::VectorXd& series)>;

// Draw count accepted samples; the optional predicate rejects draws (true =
// reject). Aborts when fewer than 0.1% of attempts are accepted.
std::vector<SimulatorSample> simulate_blackbox(
    const SeriesGenerator& generator, long count, std::uint64_t seed,
    const RejectionPredicate& reject = nullptr);

// Toy stand-in for an epidemic-count simulator: log-scale series with a
// yearly seasonal component, a random trend, and Gaussian noise on the log
// scale. Length 64, monthly grid.
SeriesGenerator toy_seasonal_generator();

// Rejection rule for count-type series on the log scale: reject when the
// original-scale series never exceeds the threshold.
RejectionPredicate min_count_rejection(double threshold);

// ---- ABC baseline ------------------------------------------------------------

struct AbcPrediction {
  Eigen::MatrixXd suffixes;  // k x (T - t) nearest-neighbor continuations
  Eigen::VectorXd mean;
  Eigen::VectorXd quantile(double p) const;
  // Equal-weight Gaussian kernel mixture over the ensemble (Silverman's
  // bandwidth per coordinate), for log-score evaluation.
  GaussianMixture kernel_mixture() const;
};

AbcPrediction abc_predict(const std::vector<SimulatorSample>& train,
                          const Eigen::VectorXd& prefix, int k_neighbors);

// ---- Metrics ---------------------------------------------------------------

struct SubjectEval {
  Eigen::VectorXd predictive_mean;
  Eigen::VectorXd truth;
  // Optional density for the log-score and bands for coverage.
  std::optional<GaussianMixture> predictive;  // dimension = truth size
  std::map<double, std::pair<Eigen::VectorXd, Eigen::VectorXd>> bands;
};

struct ReplicateMetrics {
  double log_rmse = 0.0;        // mean over subjects of log per-subject RMSE
  double neg_log_score = 0.0;   // mean over subjects of -log p(truth)
  std::map<double, double> pointwise_coverage;
  std::vector<std::pair<double, double>> elliptical_curve;
};

ReplicateMetrics evaluate(const std::vector<SubjectEval>& subjects,
                          const std::vector<double>& levels);

struct MetricsReport {
  std::vector<ReplicateMetrics> replicates;
  double mean_log_rmse() const;
  double sd_log_rmse() const;
  double mean_neg_log_score() const;
  double sd_neg_log_score() const;
};

nlohmann::json to_json(const MetricsReport& report);
void write_metrics_csv(const MetricsReport& report, const std::string& path);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace dmlmm
