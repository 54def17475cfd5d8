#include "dmlmm/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dmlmm/common.hpp"
#include "dmlmm/dataset.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

namespace dmlmm {

namespace {

Eigen::VectorXd sorted_uniform(Rng& rng, int n, double lo, double hi) {
  Eigen::VectorXd t(n);
  for (int i = 0; i < n; ++i) t[i] = rng.uniform(lo, hi);
  std::sort(t.data(), t.data() + n);
  return t;
}

}  // namespace

LongitudinalDataset gen_dgp1(const Dgp1Options& opts, std::uint64_t seed) {
  static const double xi_sd[4] = {0.1, 0.045, 0.01, 0.001};
  LongitudinalDataset data;
  for (int i = 0; i < opts.n_subjects; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const double g = rng.uniform() < 0.5 ? -1.0 : 1.0;
    double xi[4];
    for (int k = 0; k < 4; ++k) xi[k] = xi_sd[k] * rng.normal();
    auto signal = [&](double t) {
      double v = g * std::sin(4.0 * M_PI * t);
      for (int k = 0; k < 4; ++k) {
        v += std::sqrt(2.0) * xi[k] * std::sin((k + 1) * M_PI * t);
      }
      return v;
    };
    Subject s;
    s.id = "s" + std::to_string(i);
    s.times = sorted_uniform(rng, opts.n_points, 0.0, 1.0);
    s.values.resize(opts.n_points);
    for (int j = 0; j < opts.n_points; ++j) {
      s.values[j] = signal(s.times[j]) + 0.3 * rng.normal();
    }
    if (opts.n_holdout > 0) {
      s.holdout_times = sorted_uniform(rng, opts.n_holdout, 0.0, 1.0);
      s.holdout_values.resize(opts.n_holdout);
      for (int j = 0; j < opts.n_holdout; ++j) {
        s.holdout_values[j] = signal(s.holdout_times[j]);
      }
    }
    if (opts.n_remove > 0 && opts.n_remove < opts.n_points) {
      std::vector<int> idx(opts.n_points);
      std::iota(idx.begin(), idx.end(), 0);
      for (int j = 0; j < opts.n_remove; ++j) {
        const long pick = rng.uniform_int(j, opts.n_points - 1);
        std::swap(idx[j], idx[pick]);
      }
      std::vector<int> removed(idx.begin(), idx.begin() + opts.n_remove);
      std::sort(removed.begin(), removed.end());
      std::vector<double> ot, oy, ht, hy;
      for (int j = 0; j < opts.n_points; ++j) {
        if (std::binary_search(removed.begin(), removed.end(), j)) {
          ht.push_back(s.times[j]);
          hy.push_back(s.values[j]);
        } else {
          ot.push_back(s.times[j]);
          oy.push_back(s.values[j]);
        }
      }
      s.times = Eigen::Map<const Eigen::VectorXd>(ot.data(), ot.size());
      s.values = Eigen::Map<const Eigen::VectorXd>(oy.data(), oy.size());
      s.holdout_times = Eigen::Map<const Eigen::VectorXd>(ht.data(), ht.size());
      s.holdout_values = Eigen::Map<const Eigen::VectorXd>(hy.data(), hy.size());
    }
    data.subjects.push_back(std::move(s));
    data.labels.push_back(g > 0 ? 1 : 0);
  }
  validate_dataset(data);
  return data;
}

LongitudinalDataset gen_dgp1(std::uint64_t seed) {
  return gen_dgp1(Dgp1Options{}, seed);
}

namespace {

// One Euler-Maruyama path of the stochastic Van der Pol system from t=0,
// recording f at the requested (sorted) times. Returns false on blow-up.
bool vdp_path(double theta, double diffusion, double step,
              const Eigen::VectorXd& sorted_times, Rng& rng,
              Eigen::VectorXd* values) {
  double f = 1.0, g = 0.1;
  const double sqrt_step = std::sqrt(step);
  const double t_end = sorted_times.size() > 0
                           ? sorted_times[sorted_times.size() - 1]
                           : 0.0;
  double t = 0.0;
  Eigen::Index next = 0;
  values->resize(sorted_times.size());
  while (next < sorted_times.size()) {
    const double f_prev = f;
    const double t_next = t + step;
    const double df = g;
    const double dg = theta * (1.0 - f * f) * g - f;
    f += df * step + diffusion * sqrt_step * rng.normal();
    g += dg * step + diffusion * sqrt_step * rng.normal();
    if (!(std::fabs(f) < 1e6) || !(std::fabs(g) < 1e6)) return false;
    while (next < sorted_times.size() && sorted_times[next] <= t_next) {
      const double w = (sorted_times[next] - t) / step;
      (*values)[next] = (1.0 - w) * f_prev + w * f;
      ++next;
    }
    t = t_next;
    if (t > t_end + step) break;
  }
  return true;
}

}  // namespace

LongitudinalDataset gen_dgp2(const Dgp2Options& opts, std::uint64_t seed) {
  LongitudinalDataset data;
  int resampled = 0;
  for (int i = 0; i < opts.n_subjects; ++i) {
    for (int attempt = 0;; ++attempt) {
      Rng rng(derive_seed(seed, (static_cast<std::uint64_t>(i) << 16) +
                                    static_cast<std::uint64_t>(attempt)));
      const double theta = opts.fixed_theta
                               ? *opts.fixed_theta
                               : std::exp(rng.uniform(1.0, 5.0));
      const int n_i = static_cast<int>(rng.uniform_int(15, 25));
      Eigen::VectorXd times = sorted_uniform(rng, n_i, 10.0, 20.0);
      Eigen::VectorXd holdout;
      if (opts.n_holdout > 0) {
        holdout = sorted_uniform(rng, opts.n_holdout, 10.0, 20.0);
      }
      // Merge observed and held-out times for one path evaluation.
      Eigen::VectorXd all(n_i + holdout.size());
      all << times, holdout;
      std::sort(all.data(), all.data() + all.size());
      Eigen::VectorXd vals;
      if (!vdp_path(theta, opts.diffusion, opts.em_step, all, rng, &vals)) {
        ++resampled;
        continue;
      }
      auto value_at = [&](double t) {
        for (Eigen::Index j = 0; j < all.size(); ++j) {
          if (all[j] == t) return vals[j];
        }
        throw NumericalError("gen_dgp2: lost a sample time");
      };
      Subject s;
      s.id = "s" + std::to_string(i);
      s.times = times;
      s.values.resize(n_i);
      for (int j = 0; j < n_i; ++j) s.values[j] = value_at(times[j]);
      if (holdout.size() > 0) {
        // Drop held-out times that collide with an observed time (ties are
        // measure-zero but must not violate dataset invariants).
        std::vector<double> ht, hy;
        for (Eigen::Index j = 0; j < holdout.size(); ++j) {
          bool dup = false;
          for (int m = 0; m < n_i; ++m) {
            if (times[m] == holdout[j]) dup = true;
          }
          if (!dup) {
            ht.push_back(holdout[j]);
            hy.push_back(value_at(holdout[j]));
          }
        }
        s.holdout_times =
            Eigen::Map<const Eigen::VectorXd>(ht.data(), ht.size());
        s.holdout_values =
            Eigen::Map<const Eigen::VectorXd>(hy.data(), hy.size());
      }
      data.subjects.push_back(std::move(s));
      break;
    }
  }
  if (opts.resampled_out) *opts.resampled_out = resampled;
  validate_dataset(data);
  return data;
}

LongitudinalDataset gen_dgp2(std::uint64_t seed) {
  return gen_dgp2(Dgp2Options{}, seed);
}

std::pair<double, double> vdp_reference(double theta, double t, double step) {
  // Classic fourth-order Runge-Kutta on the noise-free system.
  double f = 1.0, g = 0.1;
  auto df = [](double /*fv*/, double gv) { return gv; };
  auto dg = [theta](double fv, double gv) {
    return theta * (1.0 - fv * fv) * gv - fv;
  };
  const long steps = static_cast<long>(std::ceil(t / step));
  const double h = t / static_cast<double>(steps);
  for (long i = 0; i < steps; ++i) {
    const double k1f = df(f, g), k1g = dg(f, g);
    const double k2f = df(f + 0.5 * h * k1f, g + 0.5 * h * k1g);
    const double k2g = dg(f + 0.5 * h * k1f, g + 0.5 * h * k1g);
    const double k3f = df(f + 0.5 * h * k2f, g + 0.5 * h * k2g);
    const double k3g = dg(f + 0.5 * h * k2f, g + 0.5 * h * k2g);
    const double k4f = df(f + h * k3f, g + h * k3g);
    const double k4g = dg(f + h * k3f, g + h * k3g);
    f += h / 6.0 * (k1f + 2.0 * k2f + 2.0 * k3f + k4f);
    g += h / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g);
  }
  return {f, g};
}

LongitudinalDataset gen_dgp3(const Dgp3Options& opts, std::uint64_t seed) {
  LongitudinalDataset data;
  for (int i = 0; i < opts.n_rows; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const double beta1 = rng.uniform() < 0.5 ? 1.0 : 0.1;
    const double beta2 = rng.uniform() < 0.5 ? 1.0 : 0.1;
    const int w1 = static_cast<int>(rng.uniform_int(1, 3));
    const int w2 = static_cast<int>(rng.uniform_int(7, 9));
    Eigen::VectorXd y(40);
    for (int j = 0; j < 40; ++j) {
      const double t = j + 1.0;
      const double u = (t - 1.0) / 39.0;
      y[j] = beta1 * std::cos(w1 * M_PI * u) + beta2 * std::sin(w2 * M_PI * u) +
             0.1 * rng.normal();
    }
    const int n_remove = static_cast<int>(rng.uniform_int(15, 20));
    std::vector<int> idx(40);
    std::iota(idx.begin(), idx.end(), 0);
    for (int j = 0; j < n_remove; ++j) {
      const long pick = rng.uniform_int(j, 39);
      std::swap(idx[j], idx[pick]);
    }
    std::vector<int> removed(idx.begin(), idx.begin() + n_remove);
    std::sort(removed.begin(), removed.end());
    Subject s;
    s.id = "r" + std::to_string(i);
    std::vector<double> ot, oy, ht, hy;
    for (int j = 0; j < 40; ++j) {
      const bool held =
          std::binary_search(removed.begin(), removed.end(), j);
      if (held) {
        ht.push_back(j + 1.0);
        hy.push_back(y[j]);
      } else {
        ot.push_back(j + 1.0);
        oy.push_back(y[j]);
      }
    }
    s.times = Eigen::Map<const Eigen::VectorXd>(ot.data(), ot.size());
    s.values = Eigen::Map<const Eigen::VectorXd>(oy.data(), oy.size());
    s.holdout_times = Eigen::Map<const Eigen::VectorXd>(ht.data(), ht.size());
    s.holdout_values = Eigen::Map<const Eigen::VectorXd>(hy.data(), hy.size());
    data.subjects.push_back(std::move(s));
    // Label encodes the (beta1, beta2, w1, w2) combination: 36 possibilities.
    const int label = (beta1 > 0.5 ? 1 : 0) * 18 + (beta2 > 0.5 ? 1 : 0) * 9 +
                      (w1 - 1) * 3 + (w2 - 7);
    data.labels.push_back(label);
  }
  validate_dataset(data);
  return data;
}

LongitudinalDataset gen_dgp3(std::uint64_t seed) {
  return gen_dgp3(Dgp3Options{}, seed);
}

std::vector<SimulatorSample> simulate_blackbox(const SeriesGenerator& generator,
                                               long count, std::uint64_t seed,
                                               const RejectionPredicate& reject) {
  std::vector<SimulatorSample> out;
  out.reserve(count);
  long attempts = 0;
  std::uint64_t stream = 0;
  while (static_cast<long>(out.size()) < count) {
    ++attempts;
    SimulatorSample s = generator(derive_seed(seed, stream++));
    if (!reject || !reject(s.series)) {
      out.push_back(std::move(s));
    }
    if (attempts >= 100000 &&
        static_cast<double>(out.size()) < 1e-3 * static_cast<double>(attempts)) {
      throw NumericalError("simulate_blackbox: acceptance rate below 1e-3");
    }
  }
  return out;
}

SeriesGenerator toy_seasonal_generator() {
  return [](std::uint64_t seed) {
    Rng rng(seed);
    const int t_len = 64;
    const double log_a = std::log(500.0) + 0.5 * rng.normal();
    const double trend = 0.3 * rng.normal();
    const double amp = rng.uniform(0.2, 1.2);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    SimulatorSample s;
    s.series.resize(t_len);
    for (int j = 0; j < t_len; ++j) {
      s.series[j] = log_a + trend * (j / 12.0) +
                    amp * std::sin(2.0 * M_PI * j / 12.0 + phase) +
                    0.15 * rng.normal();
    }
    s.params = {{"log_a", log_a}, {"trend", trend}, {"amp", amp},
                {"phase", phase}};
    return s;
  };
}

RejectionPredicate min_count_rejection(double threshold) {
  return [threshold](const Eigen::VectorXd& series) {
    return series.array().exp().maxCoeff() <= threshold;
  };
}

Eigen::VectorXd AbcPrediction::quantile(double p) const {
  const Eigen::Index t = suffixes.cols();
  Eigen::VectorXd q(t);
  std::vector<double> col(suffixes.rows());
  for (Eigen::Index j = 0; j < t; ++j) {
    for (Eigen::Index i = 0; i < suffixes.rows(); ++i) col[i] = suffixes(i, j);
    std::sort(col.begin(), col.end());
    const double pos = p * (col.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(col.size() - 1, lo + 1);
    const double w = pos - static_cast<double>(lo);
    q[j] = (1.0 - w) * col[lo] + w * col[hi];
  }
  return q;
}

GaussianMixture AbcPrediction::kernel_mixture() const {
  const Eigen::Index k = suffixes.rows();
  const Eigen::Index t = suffixes.cols();
  // Silverman's rule per coordinate, floored to keep kernels proper.
  Eigen::VectorXd bw(t);
  std::vector<double> col(k);
  for (Eigen::Index j = 0; j < t; ++j) {
    for (Eigen::Index i = 0; i < k; ++i) col[i] = suffixes(i, j);
    std::sort(col.begin(), col.end());
    const double mean = suffixes.col(j).mean();
    const double sd = std::sqrt(
        (suffixes.col(j).array() - mean).square().sum() / std::max<long>(1, k - 1));
    const double iqr = col[static_cast<std::size_t>(0.75 * (k - 1))] -
                       col[static_cast<std::size_t>(0.25 * (k - 1))];
    double spread = sd;
    if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
    bw[j] = std::max(1e-6, 0.9 * spread * std::pow(static_cast<double>(k), -0.2));
  }
  GaussianMixture mix;
  mix.weights = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  const Eigen::MatrixXd cov = bw.array().square().matrix().asDiagonal();
  for (Eigen::Index i = 0; i < k; ++i) {
    mix.means.push_back(suffixes.row(i).transpose());
    mix.covariances.push_back(cov);
  }
  return mix;
}

AbcPrediction abc_predict(const std::vector<SimulatorSample>& train,
                          const Eigen::VectorXd& prefix, int k_neighbors) {
  if (train.empty()) throw ContractViolation("abc_predict: empty training set");
  if (k_neighbors < 1 || k_neighbors > static_cast<int>(train.size())) {
    throw ContractViolation("abc_predict: k_neighbors out of range");
  }
  const Eigen::Index t = prefix.size();
  const Eigen::Index total = train.front().series.size();
  if (t >= total) throw ContractViolation("abc_predict: prefix spans the series");
  std::vector<std::pair<double, int>> dist(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train[i].series.size() != total) {
      throw ContractViolation("abc_predict: ragged training series");
    }
    dist[i] = {(train[i].series.head(t) - prefix).squaredNorm(),
               static_cast<int>(i)};
  }
  std::stable_sort(dist.begin(), dist.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  AbcPrediction pred;
  pred.suffixes.resize(k_neighbors, total - t);
  for (int i = 0; i < k_neighbors; ++i) {
    pred.suffixes.row(i) = train[dist[i].second].series.tail(total - t).transpose();
  }
  pred.mean = pred.suffixes.colwise().mean().transpose();
  return pred;
}

ReplicateMetrics evaluate(const std::vector<SubjectEval>& subjects,
                          const std::vector<double>& levels) {
  if (subjects.empty()) throw ContractViolation("evaluate: no subjects");
  ReplicateMetrics out;
  double sum_log_rmse = 0.0, sum_nls = 0.0;
  long n_score = 0;
  std::map<double, std::pair<long, long>> cov;  // level -> (inside, total)
  for (const auto& s : subjects) {
    if (s.predictive_mean.size() != s.truth.size()) {
      throw ContractViolation("evaluate: prediction/truth dimension mismatch");
    }
    const double rmse = std::sqrt(
        (s.predictive_mean - s.truth).squaredNorm() /
        static_cast<double>(s.truth.size()));
    sum_log_rmse += std::log(std::max(rmse, 1e-12));
    if (s.predictive) {
      sum_nls += -log_pdf(*s.predictive, s.truth);
      ++n_score;
    }
    for (const auto& [level, band] : s.bands) {
      auto& [inside, total] = cov[level];
      for (Eigen::Index j = 0; j < s.truth.size(); ++j) {
        total += 1;
        if (s.truth[j] >= band.first[j] && s.truth[j] <= band.second[j]) {
          inside += 1;
        }
      }
    }
  }
  out.log_rmse = sum_log_rmse / static_cast<double>(subjects.size());
  out.neg_log_score =
      n_score > 0 ? sum_nls / static_cast<double>(n_score) : 0.0;
  for (const auto& [level, counts] : cov) {
    out.pointwise_coverage[level] =
        static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  // levels is advisory: coverage is keyed by the bands actually supplied.
  (void)levels;
  return out;
}

namespace {

double mean_of(const std::vector<ReplicateMetrics>& reps,
               double ReplicateMetrics::*field) {
  double s = 0.0;
  for (const auto& r : reps) s += r.*field;
  return reps.empty() ? 0.0 : s / static_cast<double>(reps.size());
}

double sd_of(const std::vector<ReplicateMetrics>& reps,
             double ReplicateMetrics::*field) {
  if (reps.size() < 2) return 0.0;
  const double m = mean_of(reps, field);
  double s = 0.0;
  for (const auto& r : reps) s += (r.*field - m) * (r.*field - m);
  return std::sqrt(s / static_cast<double>(reps.size() - 1));
}

}  // namespace

double MetricsReport::mean_log_rmse() const {
  return mean_of(replicates, &ReplicateMetrics::log_rmse);
}
double MetricsReport::sd_log_rmse() const {
  return sd_of(replicates, &ReplicateMetrics::log_rmse);
}
double MetricsReport::mean_neg_log_score() const {
  return mean_of(replicates, &ReplicateMetrics::neg_log_score);
}
double MetricsReport::sd_neg_log_score() const {
  return sd_of(replicates, &ReplicateMetrics::neg_log_score);
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : report.replicates) {
    nlohmann::json jr;
    jr["log_rmse"] = r.log_rmse;
    jr["neg_log_score"] = r.neg_log_score;
    nlohmann::json cov;
    for (const auto& [level, c] : r.pointwise_coverage) {
      cov[format_double(level)] = c;
    }
    jr["pointwise_coverage"] = cov;
    if (!r.elliptical_curve.empty()) {
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& [level, c] : r.elliptical_curve) {
        curve.push_back({{"level", level}, {"coverage", c}});
      }
      jr["elliptical_curve"] = curve;
    }
    reps.push_back(jr);
  }
  j["replicates"] = reps;
  j["mean_log_rmse"] = report.mean_log_rmse();
  j["mean_neg_log_score"] = report.mean_neg_log_score();
  if (report.replicates.size() > 1) {
    j["sd_log_rmse"] = report.sd_log_rmse();
    j["sd_neg_log_score"] = report.sd_neg_log_score();
  }
  return j;
}

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ContractViolation("cannot open for writing: " + path);
  // Column set fixed by the first replicate.
  std::vector<double> levels;
  if (!report.replicates.empty()) {
    for (const auto& [level, c] : report.replicates.front().pointwise_coverage) {
      levels.push_back(level);
    }
  }
  out << "replicate,log_rmse,neg_log_score";
  for (double level : levels) out << ",coverage_" << format_double(level);
  out << "\n";
  for (std::size_t i = 0; i < report.replicates.size(); ++i) {
    const auto& r = report.replicates[i];
    out << i << ',' << format_double(r.log_rmse) << ','
        << format_double(r.neg_log_score);
    for (double level : levels) {
      const auto it = r.pointwise_coverage.find(level);
      out << ','
          << format_double(it == r.pointwise_coverage.end() ? 0.0 : it->second);
    }
    out << "\n";
  }
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ContractViolation("adjusted_rand_index: label vectors must match");
  }
  std::map<int, std::map<int, long>> table;
  std::map<int, long> row_sum, col_sum;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i]][b[i]] += 1;
    row_sum[a[i]] += 1;
    col_sum[b[i]] += 1;
  }
  auto choose2 = [](long n) {
    return 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  };
  double sum_nij = 0.0, sum_ai = 0.0, sum_bj = 0.0;
  for (const auto& [r, cols] : table) {
    for (const auto& [c, n] : cols) sum_nij += choose2(n);
  }
  for (const auto& [r, n] : row_sum) sum_ai += choose2(n);
  for (const auto& [c, n] : col_sum) sum_bj += choose2(n);
  const double total = choose2(static_cast<long>(a.size()));
  const double expected = sum_ai * sum_bj / total;
  const double max_index = 0.5 * (sum_ai + sum_bj);
  if (max_index == expected) return 1.0;
  return (sum_nij - expected) / (max_index - expected);
}

}  // namespace dmlmm
