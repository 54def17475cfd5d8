#include "dmlmm/gmm.hpp"

#include <cmath>
#include <limits>

#include "dmlmm/common.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

namespace dmlmm {

namespace detail {

CholFactor chol_psd(const Eigen::MatrixXd& cov, const std::string& context,
                    int component) {
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  const double unit = std::max(sym.trace() / static_cast<double>(d), 1e-12);
  // Clean attempt first, then the jitter ladder.
  for (double scale : {0.0, 1e-9, 1e-6}) {
    Eigen::MatrixXd jittered = sym;
    jittered.diagonal().array() += scale * unit;
    Eigen::LLT<Eigen::MatrixXd> llt(jittered);
    if (llt.info() == Eigen::Success &&
        llt.matrixLLT().diagonal().minCoeff() > 0.0) {
      CholFactor f;
      f.lower = llt.matrixL();
      f.log_det = 2.0 * f.lower.diagonal().array().log().sum();
      return f;
    }
  }
  throw NumericalError(context + ": covariance of component " +
                       std::to_string(component) +
                       " is not positive definite after jitter");
}

double log_mvn_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                   const CholFactor& chol) {
  const Eigen::VectorXd u =
      chol.lower.triangularView<Eigen::Lower>().solve(x - mean);
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + chol.log_det +
                 u.squaredNorm());
}

}  // namespace detail

void validate_mixture(const GaussianMixture& gmm) {
  const int k = gmm.components();
  if (k < 1) throw ContractViolation("mixture: needs at least one component");
  if (static_cast<int>(gmm.means.size()) != k ||
      static_cast<int>(gmm.covariances.size()) != k) {
    throw ContractViolation("mixture: weights/means/covariances length mismatch");
  }
  if ((gmm.weights.array() < 0.0).any()) {
    throw ContractViolation("mixture: negative weight");
  }
  if (std::fabs(gmm.weights.sum() - 1.0) > 1e-12) {
    throw ContractViolation("mixture: weights do not sum to 1");
  }
  const Eigen::Index d = gmm.means[0].size();
  for (int i = 0; i < k; ++i) {
    if (gmm.means[i].size() != d) {
      throw ContractViolation("mixture: mean dimension mismatch at component " +
                              std::to_string(i));
    }
    const Eigen::MatrixXd& c = gmm.covariances[i];
    if (c.rows() != d || c.cols() != d) {
      throw ContractViolation(
          "mixture: covariance dimension mismatch at component " +
          std::to_string(i));
    }
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
      throw ContractViolation("mixture: covariance not symmetric at component " +
                              std::to_string(i));
    }
    try {
      detail::chol_psd(c, "validate_mixture", i);  // PSD via factorization
    } catch (const NumericalError& e) {
      throw ContractViolation(e.what());
    }
  }
}

GaussianMixture make_mixture(Eigen::VectorXd weights,
                             std::vector<Eigen::VectorXd> means,
                             std::vector<Eigen::MatrixXd> covariances) {
  GaussianMixture gmm{std::move(weights), std::move(means),
                      std::move(covariances)};
  validate_mixture(gmm);
  return gmm;
}

double log_pdf(const GaussianMixture& gmm, const Eigen::VectorXd& x) {
  if (x.size() != gmm.dim()) {
    throw ContractViolation("log_pdf: point dimension mismatch");
  }
  Eigen::VectorXd terms(gmm.components());
  Eigen::Index used = 0;
  for (int k = 0; k < gmm.components(); ++k) {
    const double w = gmm.weights[k];
    if (w < kWeightFloor) continue;
    const auto chol = detail::chol_psd(gmm.covariances[k], "log_pdf", k);
    terms[used++] = std::log(w) + detail::log_mvn_pdf(x, gmm.means[k], chol);
  }
  return log_sum_exp(terms.head(used));
}

double cdf_scalar(const GaussianMixture& gmm, double x) {
  if (gmm.dim() != 1) throw ContractViolation("cdf_scalar: mixture must be 1-D");
  double acc = 0.0;
  for (int k = 0; k < gmm.components(); ++k) {
    const double w = gmm.weights[k];
    if (w < kWeightFloor) continue;
    const double sd = std::sqrt(std::max(gmm.covariances[k](0, 0), 0.0));
    if (sd == 0.0) {
      acc += w * (x >= gmm.means[k][0] ? 1.0 : 0.0);
    } else {
      acc += w * norm_cdf((x - gmm.means[k][0]) / sd);
    }
  }
  return std::min(1.0, std::max(0.0, acc));
}

Moments moments(const GaussianMixture& gmm) {
  const int d = gmm.dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (int k = 0; k < gmm.components(); ++k) {
    mean += gmm.weights[k] * gmm.means[k];
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (int k = 0; k < gmm.components(); ++k) {
    cov += gmm.weights[k] *
           (gmm.covariances[k] + gmm.means[k] * gmm.means[k].transpose());
  }
  cov -= mean * mean.transpose();
  cov = 0.5 * (cov + cov.transpose()).eval();
  return {std::move(mean), std::move(cov)};
}

GaussianMixture condition_latent(const GaussianMixture& gmm,
                                 const Eigen::MatrixXd& obs_matrix,
                                 double noise_variance,
                                 const Eigen::VectorXd& y_obs) {
  const int d = gmm.dim();
  if (obs_matrix.cols() != d) {
    throw ContractViolation("condition: obs_matrix column count != mixture dim");
  }
  if (!(noise_variance > 0.0)) {
    throw ContractViolation("condition: noise_variance must be positive");
  }
  if (y_obs.size() != obs_matrix.rows()) {
    throw ContractViolation("condition: y_obs length != obs_matrix rows");
  }
  const Eigen::Index n = obs_matrix.rows();
  const int kc = gmm.components();

  if (n == 0) return gmm;  // conditioning on nothing

  Eigen::VectorXd log_w(kc);
  std::vector<Eigen::VectorXd> post_means(kc);
  std::vector<Eigen::MatrixXd> post_covs(kc);
  for (int k = 0; k < kc; ++k) {
    const Eigen::MatrixXd cross = gmm.covariances[k] * obs_matrix.transpose();
    Eigen::MatrixXd s = obs_matrix * cross;
    s.diagonal().array() += noise_variance;
    const auto chol = detail::chol_psd(s, "condition", k);
    const Eigen::VectorXd resid = y_obs - obs_matrix * gmm.means[k];
    const double lw = (gmm.weights[k] < kWeightFloor)
                          ? -std::numeric_limits<double>::infinity()
                          : std::log(gmm.weights[k]) +
                                detail::log_mvn_pdf(y_obs,
                                                    obs_matrix * gmm.means[k],
                                                    chol);
    log_w[k] = lw;
    // Solve S^{-1} once through the factor for both mean and covariance.
    const Eigen::MatrixXd sinv_crosst =
        chol.lower.triangularView<Eigen::Lower>().transpose().solve(
            chol.lower.triangularView<Eigen::Lower>().solve(
                cross.transpose()));
    post_means[k] = gmm.means[k] + sinv_crosst.transpose() * resid;
    Eigen::MatrixXd pc = gmm.covariances[k] - cross * sinv_crosst;
    post_covs[k] = 0.5 * (pc + pc.transpose());
  }
  const double lz = log_sum_exp(log_w);
  if (!std::isfinite(lz)) {
    throw NumericalError("condition: all component weights underflowed");
  }
  Eigen::VectorXd w(kc);
  for (int k = 0; k < kc; ++k) {
    const double v = std::exp(log_w[k] - lz);
    w[k] = (v < kWeightFloor) ? 0.0 : v;
  }
  w /= w.sum();
  return GaussianMixture{std::move(w), std::move(post_means),
                         std::move(post_covs)};
}

GaussianMixture condition(const GaussianMixture& gmm,
                          const LinearObservationMap& map,
                          const Eigen::VectorXd& y_obs) {
  if (map.pred_matrix.cols() != gmm.dim()) {
    throw ContractViolation("condition: pred_matrix column count != mixture dim");
  }
  const GaussianMixture post =
      condition_latent(gmm, map.obs_matrix, map.noise_variance, y_obs);
  GaussianMixture out;
  out.weights = post.weights;
  out.means.reserve(post.components());
  out.covariances.reserve(post.components());
  for (int k = 0; k < post.components(); ++k) {
    out.means.push_back(map.pred_matrix * post.means[k]);
    Eigen::MatrixXd c =
        map.pred_matrix * post.covariances[k] * map.pred_matrix.transpose();
    c.diagonal().array() += map.noise_variance;
    out.covariances.push_back(0.5 * (c + c.transpose()));
  }
  return out;
}

Eigen::MatrixXd sample(const GaussianMixture& gmm, long count,
                       std::uint64_t seed, std::vector<int>* component_out) {
  if (count < 1) throw ContractViolation("sample: count must be >= 1");
  const int d = gmm.dim();
  std::vector<Eigen::MatrixXd> lowers;
  lowers.reserve(gmm.components());
  for (int k = 0; k < gmm.components(); ++k) {
    lowers.push_back(detail::chol_psd(gmm.covariances[k], "sample", k).lower);
  }
  Rng rng(seed);
  Eigen::MatrixXd out(count, d);
  if (component_out) component_out->resize(count);
  for (long i = 0; i < count; ++i) {
    const int k = static_cast<int>(rng.categorical(gmm.weights));
    if (component_out) (*component_out)[i] = k;
    out.row(i) = (gmm.means[k] + lowers[k] * rng.normal_vector(d)).transpose();
  }
  return out;
}

KlEstimate kl_mc(const GaussianMixture& p, const GaussianMixture& q,
                 long n_samples, std::uint64_t seed, double log_floor) {
  if (p.dim() != q.dim()) throw ContractViolation("kl_mc: dimension mismatch");
  if (n_samples < 1000) throw ContractViolation("kl_mc: n_samples must be >= 1000");
  const Eigen::MatrixXd draws = sample(p, n_samples, seed);
  KlEstimate est;
  double sum = 0.0, sumsq = 0.0;
  for (long i = 0; i < n_samples; ++i) {
    const Eigen::VectorXd x = draws.row(i).transpose();
    const double lp = log_pdf(p, x);
    double lq = log_pdf(q, x);
    if (lq < log_floor) {
      lq = log_floor;
      ++est.clamped;
    }
    const double v = lp - lq;
    sum += v;
    sumsq += v * v;
  }
  const double n = static_cast<double>(n_samples);
  est.value = sum / n;
  const double var = std::max(0.0, sumsq / n - est.value * est.value);
  est.std_error = std::sqrt(var / n);
  return est;
}

GaussianMixture renormalize(const GaussianMixture& gmm,
                            const std::vector<bool>& keep) {
  if (static_cast<int>(keep.size()) != gmm.components()) {
    throw ContractViolation("renormalize: mask length mismatch");
  }
  GaussianMixture out;
  double mass = 0.0;
  std::vector<double> w;
  for (int k = 0; k < gmm.components(); ++k) {
    if (!keep[k]) continue;
    w.push_back(gmm.weights[k]);
    out.means.push_back(gmm.means[k]);
    out.covariances.push_back(gmm.covariances[k]);
    mass += gmm.weights[k];
  }
  if (w.empty()) throw ContractViolation("renormalize: all components dropped");
  if (!(mass > 0.0)) {
    throw ContractViolation("renormalize: kept components carry zero mass");
  }
  out.weights = Eigen::Map<Eigen::VectorXd>(w.data(), w.size()) / mass;
  return out;
}

nlohmann::json to_json(const GaussianMixture& gmm) {
  nlohmann::json j;
  j["weights"] = std::vector<double>(gmm.weights.begin(), gmm.weights.end());
  nlohmann::json means = nlohmann::json::array();
  nlohmann::json covs = nlohmann::json::array();
  for (int k = 0; k < gmm.components(); ++k) {
    means.push_back(
        std::vector<double>(gmm.means[k].begin(), gmm.means[k].end()));
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < gmm.covariances[k].rows(); ++r) {
      std::vector<double> row(gmm.covariances[k].cols());
      for (Eigen::Index c = 0; c < gmm.covariances[k].cols(); ++c) {
        row[c] = gmm.covariances[k](r, c);
      }
      rows.push_back(row);
    }
    covs.push_back(rows);
  }
  j["means"] = means;
  j["covariances"] = covs;
  return j;
}

GaussianMixture mixture_from_json(const nlohmann::json& j) {
  GaussianMixture gmm;
  const auto& w = j.at("weights");
  gmm.weights.resize(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) gmm.weights[k] = w[k].get<double>();
  for (const auto& m : j.at("means")) {
    Eigen::VectorXd v(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i].get<double>();
    gmm.means.push_back(std::move(v));
  }
  for (const auto& cm : j.at("covariances")) {
    Eigen::MatrixXd c(cm.size(), cm.empty() ? 0 : cm[0].size());
    for (std::size_t r = 0; r < cm.size(); ++r) {
      for (std::size_t s = 0; s < cm[r].size(); ++s) {
        c(r, s) = cm[r][s].get<double>();
      }
    }
    gmm.covariances.push_back(std::move(c));
  }
  validate_mixture(gmm);
  return gmm;
}

}  // namespace dmlmm
