#include "dmlmm/vi.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <thread>

#include "dmlmm/common.hpp"
#include "dmlmm/math.hpp"
#include "dmlmm/rng.hpp"

namespace dmlmm {

double IgFactor::e_log() const { return std::log(rate) - digamma(shape); }

double IgFactor::entropy() const {
  return shape + std::log(rate) + std::lgamma(shape) -
         (1.0 + shape) * digamma(shape);
}

double IgFactor::mean() const {
  return shape > 2.0 ? rate / (shape - 1.0) : rate / shape;
}

namespace {

constexpr double kVarFloor = 1e-10;
constexpr double kPrecCap = 1e10;
constexpr double kRateFloor = 1e-12;

struct SubjectDesign {
  Eigen::MatrixXd B;
  Eigen::MatrixXd BtB;
  Eigen::VectorXd Bty;
  double yty = 0.0;
};

struct FitContext {
  std::vector<SubjectDesign> designs;
  std::vector<std::vector<int>> paths;
  long total_paths = 0;
};

BasisSpec resolved_basis(const BasisSpec& spec, const LongitudinalDataset& data) {
  double lo, hi;
  data.time_range(&lo, &hi);
  BasisSpec out = infer_domain(spec, lo, hi);
  validate_spec(out);
  return out;
}

FitContext make_context(const LongitudinalDataset& data, const BasisSpec& basis,
                        const DmfaArchitecture& arch) {
  FitContext ctx;
  ctx.designs.reserve(data.size());
  for (const auto& s : data.subjects) {
    SubjectDesign d;
    d.B = evaluate_basis(basis, s.times).values;
    d.BtB = d.B.transpose() * d.B;
    d.Bty = d.B.transpose() * s.values;
    d.yty = s.values.squaredNorm();
    ctx.designs.push_back(std::move(d));
  }
  ctx.paths = enumerate_paths(arch);
  ctx.total_paths = static_cast<long>(ctx.paths.size());
  return ctx;
}

// Cached moments of one layer component's global factors.
struct CompCache {
  double e_log_w = 0.0;
  Eigen::VectorXd m_mu, v_mu, e_mu2;
  Eigen::VectorXd e_inv_delta, e_log_delta;
  Eigen::MatrixXd mb;                  // mean loading matrix, zero-padded
  std::vector<Eigen::MatrixXd> e_bbt;  // per row, zero-padded to D(l) x D(l)
  Eigen::MatrixXd sum_ed_bbt;          // sum_j E[1/delta_j] E[b_j b_j^T]
};

using LayerCache = std::vector<CompCache>;

int row_free(int row, int dnext) { return std::min(row + 1, dnext); }

std::vector<LayerCache> build_cache(const VariationalState& state) {
  const auto& arch = state.arch;
  std::vector<LayerCache> cache(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    const auto& lay = state.layers[l];
    const int kc = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    const double alpha0 = lay.dir_alpha.sum();
    cache[l].resize(kc);
    for (int k = 0; k < kc; ++k) {
      CompCache& cc = cache[l][k];
      cc.e_log_w =
          kc == 1 ? 0.0 : digamma(lay.dir_alpha[k]) - digamma(alpha0);
      cc.m_mu = lay.mu[k].mean;
      cc.v_mu = lay.mu[k].var;
      cc.e_mu2 = cc.m_mu.array().square() + cc.v_mu.array();
      cc.e_inv_delta.resize(dprev);
      cc.e_log_delta.resize(dprev);
      for (int j = 0; j < dprev; ++j) {
        const IgFactor f = lay.delta[k].at(j);
        cc.e_inv_delta[j] = f.e_inv();
        cc.e_log_delta[j] = f.e_log();
      }
      cc.mb = Eigen::MatrixXd::Zero(dprev, dnext);
      cc.e_bbt.assign(dprev, Eigen::MatrixXd::Zero(dnext, dnext));
      cc.sum_ed_bbt = Eigen::MatrixXd::Zero(dnext, dnext);
      for (int j = 0; j < dprev; ++j) {
        const int nf = row_free(j, dnext);
        const auto& row = lay.load_rows[k][j];
        cc.mb.row(j).head(nf) = row.mean.transpose();
        cc.e_bbt[j].topLeftCorner(nf, nf) =
            row.mean * row.mean.transpose() + row.cov;
        cc.sum_ed_bbt += cc.e_inv_delta[j] * cc.e_bbt[j];
      }
    }
  }
  return cache;
}

// Marginal responsibilities per layer from the joint path vector.
std::vector<Eigen::VectorXd> layer_marginals(const Eigen::VectorXd& resp,
                                             const FitContext& ctx,
                                             const DmfaArchitecture& arch) {
  std::vector<Eigen::VectorXd> s(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    s[l] = Eigen::VectorXd::Zero(arch.components[l]);
  }
  for (long p = 0; p < ctx.total_paths; ++p) {
    for (int l = 0; l < arch.layers; ++l) {
      s[l][ctx.paths[p][l]] += resp[p];
    }
  }
  return s;
}

// Expected squared residual of layer l's regression for target coordinate j.
double layer_sq_residual(const CompCache& cc, int j, double x_mean,
                         double x_var, const Eigen::VectorXd& z_mean,
                         const Eigen::MatrixXd& e_zzt) {
  const double bz = cc.mb.row(j).dot(z_mean);
  const double e = x_mean - cc.m_mu[j] - bz;
  return e * e + x_var + cc.v_mu[j] + (cc.e_bbt[j] * e_zzt).trace() - bz * bz;
}

// Per-layer log potentials for the responsibility update / ELBO.
Eigen::VectorXd layer_potentials(const VariationalState& state,
                                 const std::vector<LayerCache>& cache,
                                 const LocalFactors& loc, int l) {
  const auto& arch = state.arch;
  const int kc = arch.components[l];
  const int dprev = arch.dims[l];
  const Eigen::VectorXd& x_mean = (l == 0) ? loc.beta.mean : loc.z[l - 1].mean;
  const Eigen::VectorXd x_var =
      (l == 0) ? loc.beta.var
               : loc.z[l - 1].cov.diagonal();
  const Eigen::VectorXd& z_mean = loc.z[l].mean;
  const Eigen::MatrixXd e_zzt =
      loc.z[l].mean * loc.z[l].mean.transpose() + loc.z[l].cov;
  Eigen::VectorXd a(kc);
  for (int k = 0; k < kc; ++k) {
    const CompCache& cc = cache[l][k];
    double acc = cc.e_log_w;
    for (int j = 0; j < dprev; ++j) {
      acc -= 0.5 * (kLog2Pi + cc.e_log_delta[j] +
                    cc.e_inv_delta[j] *
                        layer_sq_residual(cc, j, x_mean[j], x_var[j], z_mean,
                                          e_zzt));
    }
    a[k] = acc;
  }
  return a;
}

void update_responsibilities(const VariationalState& state,
                             const std::vector<LayerCache>& cache,
                             const FitContext& ctx, LocalFactors& loc) {
  const auto& arch = state.arch;
  std::vector<Eigen::VectorXd> log_rho(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    Eigen::VectorXd a = layer_potentials(state, cache, loc, l);
    log_rho[l] = a.array() - log_sum_exp(a);
  }
  for (long p = 0; p < ctx.total_paths; ++p) {
    double lr = 0.0;
    for (int l = 0; l < arch.layers; ++l) lr += log_rho[l][ctx.paths[p][l]];
    loc.resp[p] = std::exp(lr);
  }
  loc.resp /= loc.resp.sum();
}

void update_beta(const VariationalState& state,
                 const std::vector<LayerCache>& cache, const FitContext& ctx,
                 const SubjectDesign& d, LocalFactors& loc) {
  const auto& arch = state.arch;
  const int dim = arch.dims[0];
  const auto s = layer_marginals(loc.resp, ctx, arch);
  const double e_inv_sig = state.sigma2.e_inv();
  Eigen::MatrixXd prec = e_inv_sig * d.BtB;
  Eigen::VectorXd rhs = e_inv_sig * d.Bty;
  for (int k = 0; k < arch.components[0]; ++k) {
    const CompCache& cc = cache[0][k];
    const double sk = s[0][k];
    if (sk <= 0.0) continue;
    for (int j = 0; j < dim; ++j) {
      const double g = sk * cc.e_inv_delta[j];
      prec(j, j) += g;
      rhs[j] += g * (cc.m_mu[j] + cc.mb.row(j).dot(loc.z[0].mean));
    }
  }
  loc.beta.mean = prec.llt().solve(rhs);
  loc.beta.var = prec.diagonal().cwiseInverse().cwiseMax(kVarFloor);
}

void update_z(const VariationalState& state,
              const std::vector<LayerCache>& cache, const FitContext& ctx,
              LocalFactors& loc, int l) {
  const auto& arch = state.arch;
  const int dz = arch.dims[l + 1];
  const auto s = layer_marginals(loc.resp, ctx, arch);
  const Eigen::VectorXd& x_mean = (l == 0) ? loc.beta.mean : loc.z[l - 1].mean;
  Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(dz, dz);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dz);
  for (int k = 0; k < arch.components[l]; ++k) {
    const CompCache& cc = cache[l][k];
    const double sk = s[l][k];
    if (sk <= 0.0) continue;
    prec += sk * cc.sum_ed_bbt;
    rhs += sk * cc.mb.transpose() *
           (cc.e_inv_delta.array() * (x_mean - cc.m_mu).array()).matrix();
  }
  if (l + 1 < arch.layers) {
    // z(l) is the target of the next layer's regression.
    for (int k = 0; k < arch.components[l + 1]; ++k) {
      const CompCache& cc = cache[l + 1][k];
      const double sk = s[l + 1][k];
      if (sk <= 0.0) continue;
      for (int j = 0; j < dz; ++j) {
        const double g = sk * cc.e_inv_delta[j];
        prec(j, j) += g;
        rhs[j] += g * (cc.m_mu[j] + cc.mb.row(j).dot(loc.z[l + 1].mean));
      }
    }
  } else {
    prec.diagonal().array() += 1.0;  // standard-normal top layer
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(prec);
  loc.z[l].mean = llt.solve(rhs);
  loc.z[l].cov = llt.solve(Eigen::MatrixXd::Identity(dz, dz));
  loc.z[l].cov = 0.5 * (loc.z[l].cov + loc.z[l].cov.transpose()).eval();
}

double subject_elbo(const VariationalState& state,
                    const std::vector<LayerCache>& cache, const FitContext& ctx,
                    const LongitudinalDataset& data, int i) {
  const auto& arch = state.arch;
  const auto& d = ctx.designs[i];
  const LocalFactors& loc = state.locals[i];
  const double n_i = static_cast<double>(data.subjects[i].n());

  // Gaussian likelihood under q(beta_i), q(sigma^2).
  const double r2 = d.yty - 2.0 * d.Bty.dot(loc.beta.mean) +
                    loc.beta.mean.dot(d.BtB * loc.beta.mean) +
                    d.BtB.diagonal().dot(loc.beta.var);
  double total = -0.5 * n_i * (kLog2Pi + state.sigma2.e_log()) -
                 0.5 * state.sigma2.e_inv() * r2;

  // Layer regressions weighted by responsibilities (includes E[log w]).
  const auto s = layer_marginals(loc.resp, ctx, arch);
  for (int l = 0; l < arch.layers; ++l) {
    const Eigen::VectorXd a = layer_potentials(state, cache, loc, l);
    total += s[l].dot(a);
  }

  // Top-layer prior.
  const auto& ztop = loc.z[arch.layers - 1];
  total += -0.5 * arch.dims[arch.layers] * kLog2Pi -
           0.5 * (ztop.mean.squaredNorm() + ztop.cov.trace());

  // Entropies.
  total += 0.5 * (arch.dims[0] * (1.0 + kLog2Pi) +
                  loc.beta.var.array().log().sum());
  for (int l = 0; l < arch.layers; ++l) {
    const int dz = arch.dims[l + 1];
    const Eigen::LLT<Eigen::MatrixXd> llt(loc.z[l].cov);
    const double logdet =
        2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    total += 0.5 * (dz * (1.0 + kLog2Pi) + logdet);
  }
  for (long p = 0; p < ctx.total_paths; ++p) {
    const double r = loc.resp[p];
    if (r > 0.0) total -= r * std::log(r);
  }
  return total;
}

void optimize_local_impl(VariationalState& state,
                         const LongitudinalDataset& data, const FitContext& ctx,
                         const std::vector<LayerCache>& cache,
                         const std::vector<int>& indices,
                         const FitConfig& config) {
  auto run_one = [&](int i) {
    LocalFactors& loc = state.locals[i];
    double prev = subject_elbo(state, cache, ctx, data, i);
    for (int sweep = 0; sweep < config.local_max_sweeps; ++sweep) {
      update_beta(state, cache, ctx, ctx.designs[i], loc);
      for (int l = 0; l < state.arch.layers; ++l) {
        update_z(state, cache, ctx, loc, l);
      }
      update_responsibilities(state, cache, ctx, loc);
      const double cur = subject_elbo(state, cache, ctx, data, i);
      if (cur - prev < config.local_tolerance) break;
      prev = cur;
    }
  };
  const int nthreads = std::max(1, config.threads);
  if (nthreads == 1 || indices.size() < 2) {
    for (int i : indices) run_one(i);
    return;
  }
  // Subjects are independent; chunked threads write disjoint locals.
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  for (int t = 0; t < nthreads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t at = next.fetch_add(1);
        if (at >= indices.size()) return;
        run_one(indices[at]);
      }
    });
  }
  for (auto& th : pool) th.join();
}

// ---- Global step -----------------------------------------------------------

struct CompAccum {
  double s = 0.0;
  Eigen::VectorXd a1;   // sum s * E[x]
  Eigen::VectorXd t2;   // sum s * E[x^2]
  Eigen::VectorXd z1;   // sum s * E[z]
  Eigen::MatrixXd z2;   // sum s * E[z z^T]
  Eigen::MatrixXd c1;   // sum s * E[x] E[z]^T
};

struct GlobalAccums {
  std::vector<std::vector<CompAccum>> layer;  // [l][k]
  double sn = 0.0;                            // sum n_i
  double r2 = 0.0;                            // sum expected squared residuals
};

GlobalAccums accumulate(const VariationalState& state,
                        const LongitudinalDataset& data, const FitContext& ctx,
                        const std::vector<int>& minibatch, double scale) {
  const auto& arch = state.arch;
  GlobalAccums acc;
  acc.layer.resize(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    acc.layer[l].resize(arch.components[l]);
    for (auto& ca : acc.layer[l]) {
      ca.a1 = Eigen::VectorXd::Zero(arch.dims[l]);
      ca.t2 = Eigen::VectorXd::Zero(arch.dims[l]);
      ca.z1 = Eigen::VectorXd::Zero(arch.dims[l + 1]);
      ca.z2 = Eigen::MatrixXd::Zero(arch.dims[l + 1], arch.dims[l + 1]);
      ca.c1 = Eigen::MatrixXd::Zero(arch.dims[l], arch.dims[l + 1]);
    }
  }
  for (int i : minibatch) {
    const LocalFactors& loc = state.locals[i];
    const auto s = layer_marginals(loc.resp, ctx, arch);
    const auto& d = ctx.designs[i];
    acc.sn += scale * static_cast<double>(data.subjects[i].n());
    acc.r2 += scale * (d.yty - 2.0 * d.Bty.dot(loc.beta.mean) +
                       loc.beta.mean.dot(d.BtB * loc.beta.mean) +
                       d.BtB.diagonal().dot(loc.beta.var));
    for (int l = 0; l < arch.layers; ++l) {
      const Eigen::VectorXd& x_mean =
          (l == 0) ? loc.beta.mean : loc.z[l - 1].mean;
      const Eigen::VectorXd x_var =
          (l == 0) ? loc.beta.var : loc.z[l - 1].cov.diagonal();
      const Eigen::VectorXd& z_mean = loc.z[l].mean;
      const Eigen::MatrixXd e_zzt =
          z_mean * z_mean.transpose() + loc.z[l].cov;
      for (int k = 0; k < arch.components[l]; ++k) {
        const double w = scale * s[l][k];
        if (w <= 0.0) continue;
        CompAccum& ca = acc.layer[l][k];
        ca.s += w;
        ca.a1 += w * x_mean;
        ca.t2 += w * (x_mean.array().square() + x_var.array()).matrix();
        ca.z1 += w * z_mean;
        ca.z2 += w * e_zzt;
        ca.c1 += w * x_mean * z_mean.transpose();
      }
    }
  }
  return acc;
}

void blend_ig(IgFactor& f, double shape_hat, double rate_hat, double rho) {
  f.shape = (1.0 - rho) * f.shape + rho * shape_hat;
  f.rate = std::max(kRateFloor, (1.0 - rho) * f.rate + rho * rate_hat);
}

// Natural-parameter blend of a scalar Gaussian factor.
void blend_gauss(double& mean, double& var, double prec_hat, double h_hat,
                 double rho) {
  const double prec_old = 1.0 / var;
  const double h_old = mean * prec_old;
  const double prec =
      std::min(kPrecCap, (1.0 - rho) * prec_old + rho * prec_hat);
  const double h = (1.0 - rho) * h_old + rho * h_hat;
  var = std::max(kVarFloor, 1.0 / prec);
  mean = h / prec;
}

void blend_gauss_full(FullGauss& g, const Eigen::MatrixXd& prec_hat,
                      const Eigen::VectorXd& h_hat, double rho) {
  const Eigen::MatrixXd prec_old =
      g.cov.llt().solve(Eigen::MatrixXd::Identity(g.cov.rows(), g.cov.cols()));
  const Eigen::VectorXd h_old = prec_old * g.mean;
  Eigen::MatrixXd prec = (1.0 - rho) * prec_old + rho * prec_hat;
  prec.diagonal() = prec.diagonal().cwiseMin(kPrecCap);
  const Eigen::VectorXd h = (1.0 - rho) * h_old + rho * h_hat;
  const Eigen::LLT<Eigen::MatrixXd> llt(prec);
  g.cov = llt.solve(Eigen::MatrixXd::Identity(prec.rows(), prec.cols()));
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  g.cov.diagonal() = g.cov.diagonal().cwiseMax(kVarFloor);
  g.mean = llt.solve(h);
}

void step_global_impl(VariationalState& state, const GlobalAccums& acc,
                      const FitConfig& config, double rho) {
  if (rho == 0.0) return;  // exact null step
  const auto& arch = state.arch;
  const double a2 =
      config.hyper.scale_halfcauchy_a * config.hyper.scale_halfcauchy_a;
  const double s_mu2 =
      config.hyper.mean_cauchy_scale * config.hyper.mean_cauchy_scale;
  const double hs2 = config.hyper.horseshoe_global_scale *
                     config.hyper.horseshoe_global_scale;

  for (int l = 0; l < arch.layers; ++l) {
    LayerGlobals& lay = state.layers[l];
    const int kc = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    if (kc > 1) {
      const double conc = config.hyper.dirichlet_for_layer(l, kc);
      for (int k = 0; k < kc; ++k) {
        const double alpha_hat = conc + acc.layer[l][k].s;
        lay.dir_alpha[k] = std::max(
            1e-8, (1.0 - rho) * lay.dir_alpha[k] + rho * alpha_hat);
      }
    }
    for (int k = 0; k < kc; ++k) {
      const CompAccum& ca = acc.layer[l][k];
      const double e_inv_tau = lay.tau2[k].e_inv();
      for (int j = 0; j < dprev; ++j) {
        const int nf = row_free(j, dnext);
        const double ed = lay.delta[k].at(j).e_inv();

        // Component mean coordinate.
        {
          const double prec_hat =
              lay.mean_aux[k].at(j).e_inv() + ed * ca.s;
          const Eigen::VectorXd mb_row = [&] {
            Eigen::VectorXd r = Eigen::VectorXd::Zero(dnext);
            r.head(nf) = lay.load_rows[k][j].mean;
            return r;
          }();
          const double h_hat = ed * (ca.a1[j] - mb_row.dot(ca.z1));
          blend_gauss(lay.mu[k].mean[j], lay.mu[k].var[j], prec_hat, h_hat,
                      rho);
        }

        // Loading row.
        {
          FullGauss& row = lay.load_rows[k][j];
          Eigen::MatrixXd prec_hat = ed * ca.z2.topLeftCorner(nf, nf);
          for (int f = 0; f < nf; ++f) {
            prec_hat(f, f) += lay.hs_lambda_shape[k](j, f) /
                              lay.hs_lambda_rate[k](j, f) * e_inv_tau;
          }
          const Eigen::VectorXd h_hat =
              ed * (ca.c1.row(j).head(nf).transpose() -
                    lay.mu[k].mean[j] * ca.z1.head(nf));
          blend_gauss_full(row, prec_hat, h_hat, rho);
        }

        // Noise variance and its auxiliary.
        {
          const FullGauss& row = lay.load_rows[k][j];
          Eigen::VectorXd mb_row = Eigen::VectorXd::Zero(dnext);
          mb_row.head(nf) = row.mean;
          Eigen::MatrixXd e_bbt = Eigen::MatrixXd::Zero(dnext, dnext);
          e_bbt.topLeftCorner(nf, nf) =
              row.mean * row.mean.transpose() + row.cov;
          const double m_mu = lay.mu[k].mean[j];
          const double e_mu2 =
              m_mu * m_mu + lay.mu[k].var[j];
          const double sq =
              ca.t2[j] - 2.0 * m_mu * ca.a1[j] -
              2.0 * mb_row.dot(ca.c1.row(j).transpose()) + ca.s * e_mu2 +
              2.0 * m_mu * mb_row.dot(ca.z1) + (e_bbt * ca.z2).trace();
          IgFactor deltaj = lay.delta[k].at(j);
          const double shape_hat = 0.5 + 0.5 * ca.s;
          const double rate_hat =
              lay.psi_delta[k].at(j).e_inv() + 0.5 * std::max(0.0, sq);
          blend_ig(deltaj, shape_hat, rate_hat, rho);
          lay.delta[k].shape[j] = deltaj.shape;
          lay.delta[k].rate[j] = deltaj.rate;

          IgFactor psij = lay.psi_delta[k].at(j);
          blend_ig(psij, 1.0, 1.0 / a2 + deltaj.e_inv(), rho);
          lay.psi_delta[k].shape[j] = psij.shape;
          lay.psi_delta[k].rate[j] = psij.rate;
        }

        // Cauchy mixing scale for the mean coordinate.
        {
          const double e_mu2 =
              lay.mu[k].mean[j] * lay.mu[k].mean[j] + lay.mu[k].var[j];
          IgFactor v = lay.mean_aux[k].at(j);
          blend_ig(v, 1.0, 0.5 * (s_mu2 + e_mu2), rho);
          lay.mean_aux[k].shape[j] = v.shape;
          lay.mean_aux[k].rate[j] = v.rate;
        }
      }

      // Horseshoe chain.
      double tau_quad = 0.0;
      int n_entries = 0;
      for (int j = 0; j < dprev; ++j) {
        const int nf = row_free(j, dnext);
        const FullGauss& row = lay.load_rows[k][j];
        for (int f = 0; f < nf; ++f) {
          const double eb2 =
              row.mean[f] * row.mean[f] + row.cov(f, f);
          IgFactor lam{lay.hs_lambda_shape[k](j, f),
                       lay.hs_lambda_rate[k](j, f)};
          IgFactor nu{lay.hs_nu_shape[k](j, f), lay.hs_nu_rate[k](j, f)};
          blend_ig(lam, 1.0, nu.e_inv() + 0.5 * eb2 * lay.tau2[k].e_inv(),
                   rho);
          blend_ig(nu, 1.0, 1.0 + lam.e_inv(), rho);
          lay.hs_lambda_shape[k](j, f) = lam.shape;
          lay.hs_lambda_rate[k](j, f) = lam.rate;
          lay.hs_nu_shape[k](j, f) = nu.shape;
          lay.hs_nu_rate[k](j, f) = nu.rate;
          tau_quad += eb2 * lam.e_inv();
          ++n_entries;
        }
      }
      blend_ig(lay.tau2[k], 0.5 * (1.0 + n_entries),
               lay.xi[k].e_inv() + 0.5 * tau_quad, rho);
      blend_ig(lay.xi[k], 1.0, 1.0 / hs2 + lay.tau2[k].e_inv(), rho);
    }
  }

  // Observation noise chain.
  blend_ig(state.sigma2, 0.5 + 0.5 * acc.sn,
           state.psi_sigma.e_inv() + 0.5 * acc.r2, rho);
  blend_ig(state.psi_sigma, 1.0, 1.0 / a2 + state.sigma2.e_inv(), rho);
}

double ig_cross_term(const IgFactor& x, double prior_shape,
                     double e_log_rate, double e_rate) {
  // E[log IG(x; prior_shape, rate)] with a possibly random prior rate.
  return prior_shape * e_log_rate - std::lgamma(prior_shape) -
         (prior_shape + 1.0) * x.e_log() - e_rate * x.e_inv();
}

double global_elbo_terms(const VariationalState& state,
                         const FitConfig& config) {
  const auto& arch = state.arch;
  const double a2 =
      config.hyper.scale_halfcauchy_a * config.hyper.scale_halfcauchy_a;
  const double s_mu2 =
      config.hyper.mean_cauchy_scale * config.hyper.mean_cauchy_scale;
  const double hs2 = config.hyper.horseshoe_global_scale *
                     config.hyper.horseshoe_global_scale;
  double total = 0.0;
  for (int l = 0; l < arch.layers; ++l) {
    const LayerGlobals& lay = state.layers[l];
    const int kc = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    if (kc > 1) {
      const double conc = config.hyper.dirichlet_for_layer(l, kc);
      const double alpha0 = lay.dir_alpha.sum();
      // H[Dir(alpha)] = log B(alpha) - sum_k (alpha_k - 1)(psi(alpha_k) -
      // psi(alpha_0)).
      double e_log_w_sum = 0.0, entropy = -std::lgamma(alpha0);
      for (int k = 0; k < kc; ++k) {
        const double elw = digamma(lay.dir_alpha[k]) - digamma(alpha0);
        e_log_w_sum += elw;
        entropy += std::lgamma(lay.dir_alpha[k]);
        entropy -= (lay.dir_alpha[k] - 1.0) * elw;
      }
      total += std::lgamma(conc * kc) - kc * std::lgamma(conc) +
               (conc - 1.0) * e_log_w_sum + entropy;
    }
    for (int k = 0; k < kc; ++k) {
      for (int j = 0; j < dprev; ++j) {
        const double m = lay.mu[k].mean[j];
        const double v = lay.mu[k].var[j];
        const IgFactor vf = lay.mean_aux[k].at(j);
        total += -0.5 * (kLog2Pi + vf.e_log()) -
                 0.5 * vf.e_inv() * (m * m + v);
        total += 0.5 * std::log(0.5 * s_mu2) - std::lgamma(0.5) -
                 1.5 * vf.e_log() - 0.5 * s_mu2 * vf.e_inv();
        total += 0.5 * (1.0 + kLog2Pi + std::log(v));
        total += vf.entropy();

        const IgFactor del = lay.delta[k].at(j);
        const IgFactor psi = lay.psi_delta[k].at(j);
        total += ig_cross_term(del, 0.5, -psi.e_log(), psi.e_inv());
        total += ig_cross_term(psi, 0.5, std::log(1.0 / a2), 1.0 / a2);
        total += del.entropy() + psi.entropy();
      }
      const IgFactor& tau = lay.tau2[k];
      const IgFactor& xi = lay.xi[k];
      total += ig_cross_term(tau, 0.5, -xi.e_log(), xi.e_inv());
      total += ig_cross_term(xi, 0.5, std::log(1.0 / hs2), 1.0 / hs2);
      total += tau.entropy() + xi.entropy();
      for (int j = 0; j < dprev; ++j) {
        const int nf = row_free(j, dnext);
        const FullGauss& row = lay.load_rows[k][j];
        const Eigen::LLT<Eigen::MatrixXd> llt(row.cov);
        total += 0.5 * (nf * (1.0 + kLog2Pi) +
                        2.0 * Eigen::MatrixXd(llt.matrixL())
                                  .diagonal()
                                  .array()
                                  .log()
                                  .sum());
        for (int f = 0; f < nf; ++f) {
          const double eb2 = row.mean[f] * row.mean[f] + row.cov(f, f);
          const IgFactor lam{lay.hs_lambda_shape[k](j, f),
                             lay.hs_lambda_rate[k](j, f)};
          const IgFactor nu{lay.hs_nu_shape[k](j, f),
                            lay.hs_nu_rate[k](j, f)};
          total += -0.5 * (kLog2Pi + lam.e_log() + tau.e_log()) -
                   0.5 * eb2 * lam.e_inv() * tau.e_inv();
          total += ig_cross_term(lam, 0.5, -nu.e_log(), nu.e_inv());
          total += ig_cross_term(nu, 0.5, 0.0, 1.0);
          total += lam.entropy() + nu.entropy();
        }
      }
    }
  }
  total += ig_cross_term(state.sigma2, 0.5, -state.psi_sigma.e_log(),
                         state.psi_sigma.e_inv());
  total += ig_cross_term(state.psi_sigma, 0.5, std::log(1.0 / a2), 1.0 / a2);
  total += state.sigma2.entropy() + state.psi_sigma.entropy();
  return total;
}

double elbo_impl(const VariationalState& state, const LongitudinalDataset& data,
                 const FitContext& ctx, const std::vector<LayerCache>& cache,
                 const FitConfig& config,
                 const std::optional<std::vector<int>>& subset) {
  double total = global_elbo_terms(state, config);
  if (!std::isfinite(total)) {
    throw NumericalError("elbo: non-finite global prior/entropy term");
  }
  auto add_subject = [&](int i, double scale) {
    const double v = subject_elbo(state, cache, ctx, data, i);
    if (!std::isfinite(v)) {
      throw NumericalError("elbo: non-finite local term for subject " +
                           data.subjects[i].id);
    }
    total += scale * v;
  };
  if (!subset) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      add_subject(static_cast<int>(i), 1.0);
    }
  } else {
    if (subset->empty()) throw ContractViolation("elbo: empty subset");
    const double scale =
        static_cast<double>(data.size()) / static_cast<double>(subset->size());
    for (int i : *subset) add_subject(i, scale);
  }
  return total;
}

// ---- Initialization --------------------------------------------------------

struct KmeansResult {
  Eigen::MatrixXd centers;
  std::vector<int> assign;
};

KmeansResult kmeans(const Eigen::MatrixXd& x, int k, std::uint64_t seed) {
  const long n = x.rows();
  const long d = x.cols();
  Rng rng(seed);
  KmeansResult res;
  res.centers.resize(k, d);
  res.assign.assign(n, 0);
  // k-means++ seeding.
  std::vector<long> chosen;
  chosen.push_back(rng.uniform_int(0, n - 1));
  res.centers.row(0) = x.row(chosen[0]);
  Eigen::VectorXd dist2 =
      (x.rowwise() - x.row(chosen[0])).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = dist2.sum();
    long pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (long i = 0; i < n; ++i) {
        u -= dist2[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(0, n - 1);
    }
    res.centers.row(c) = x.row(pick);
    dist2 = dist2.cwiseMin(
        (x.rowwise() - x.row(pick)).rowwise().squaredNorm());
  }
  for (int iter = 0; iter < 60; ++iter) {
    bool changed = false;
    for (long i = 0; i < n; ++i) {
      int best = 0;
      double bd = (x.row(i) - res.centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double dd = (x.row(i) - res.centers.row(c)).squaredNorm();
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (res.assign[i] != best) {
        res.assign[i] = best;
        changed = true;
      }
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (long i = 0; i < n; ++i) {
      sums.row(res.assign[i]) += x.row(i);
      counts[res.assign[i]] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0.0) {
        res.centers.row(c) = sums.row(c) / counts[c];
      } else {
        res.centers.row(c) = x.row(rng.uniform_int(0, n - 1));
        changed = true;
      }
    }
    if (!changed) break;
  }
  return res;
}

// Lower-trapezoidal factor with the same outer product as b (via QR of b^T).
Eigen::MatrixXd lower_factor(const Eigen::MatrixXd& b) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(b.transpose());
  Eigen::MatrixXd r = qr.matrixQR()
                          .topRows(std::min(b.rows(), b.cols()))
                          .triangularView<Eigen::Upper>();
  Eigen::MatrixXd lt = Eigen::MatrixXd::Zero(b.rows(), b.cols());
  lt.leftCols(r.rows()) = r.transpose();
  return lower_triangular(lt);
}

}  // namespace

VariationalState init_state(const LongitudinalDataset& data,
                            const DmfaArchitecture& arch,
                            const FitConfig& config) {
  require_valid(arch);
  validate_dataset(data);
  for (const auto& s : data.subjects) {
    if (s.n() < 1) {
      throw ContractViolation("init_state: subject " + s.id +
                              " has no observed rows");
    }
  }
  const BasisSpec basis = resolved_basis(config.basis, data);
  if (basis.dimension != arch.dims[0]) {
    throw ContractViolation("init_state: basis dimension != architecture d");
  }
  const long n = static_cast<long>(data.size());
  const int d = arch.dims[0];

  VariationalState state;
  state.arch = arch;
  state.locals.resize(n);
  const long total_paths = static_cast<long>(arch.total_paths());

  // Ridge estimates seed the local means.
  Eigen::MatrixXd beta_hat(n, d);
  double rss = 0.0;
  double nobs = 0.0;
  std::vector<Eigen::VectorXd> ridge_var(n);
  for (long i = 0; i < n; ++i) {
    const auto& s = data.subjects[i];
    const Eigen::MatrixXd b = evaluate_basis(basis, s.times).values;
    Eigen::MatrixXd btb = b.transpose() * b;
    const double tau = 0.01 * btb.trace() / d + 1e-8;
    btb.diagonal().array() += tau;
    const Eigen::LLT<Eigen::MatrixXd> llt(btb);
    const Eigen::VectorXd bh = llt.solve(b.transpose() * s.values);
    beta_hat.row(i) = bh.transpose();
    rss += (s.values - b * bh).squaredNorm();
    nobs += static_cast<double>(s.n());
    ridge_var[i] = llt.solve(Eigen::MatrixXd::Identity(d, d)).diagonal();
  }
  double sig2_init = std::max(rss / std::max(1.0, nobs), 1e-4);

  state.sigma2 = {3.0, 2.0 * sig2_init};
  const double a2 =
      config.hyper.scale_halfcauchy_a * config.hyper.scale_halfcauchy_a;
  state.psi_sigma = {1.0, 1.0 / a2 + 1.0 / sig2_init};

  // Layerwise clustering of the current latent scores.
  Eigen::MatrixXd scores = beta_hat;
  state.layers.resize(arch.layers);
  std::vector<std::vector<int>> layer_assign(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    const int kc = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    const KmeansResult km =
        kmeans(scores, kc, derive_seed(config.seed, 1000 + l));
    layer_assign[l] = km.assign;

    LayerGlobals& lay = state.layers[l];
    const double conc = config.hyper.dirichlet_for_layer(l, kc);
    lay.dir_alpha.resize(kc);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(kc);
    for (int a : km.assign) counts[a] += 1.0;
    for (int k = 0; k < kc; ++k) lay.dir_alpha[k] = conc + counts[k];

    Eigen::MatrixXd next_scores(scores.rows(), dnext);
    lay.mu.resize(kc);
    lay.load_rows.resize(kc);
    lay.delta.resize(kc);
    lay.psi_delta.resize(kc);
    lay.mean_aux.resize(kc);
    lay.hs_lambda_shape.resize(kc);
    lay.hs_lambda_rate.resize(kc);
    lay.hs_nu_shape.resize(kc);
    lay.hs_nu_rate.resize(kc);
    lay.tau2.resize(kc);
    lay.xi.resize(kc);
    std::vector<Eigen::MatrixXd> loadings(kc);
    for (int k = 0; k < kc; ++k) {
      // Cluster covariance (ridge-regularized).
      Eigen::VectorXd center = km.centers.row(k).transpose();
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dprev, dprev);
      double cnt = 0.0;
      for (long i = 0; i < scores.rows(); ++i) {
        if (km.assign[i] != k) continue;
        const Eigen::VectorXd r = scores.row(i).transpose() - center;
        cov += r * r.transpose();
        cnt += 1.0;
      }
      if (cnt > 1.0) cov /= cnt;
      const double scale = std::max(cov.trace() / dprev, 1e-3);
      cov.diagonal().array() += 0.05 * scale;

      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
      Eigen::MatrixXd b_full(dprev, dnext);
      for (int c = 0; c < dnext; ++c) {
        const int idx = dprev - 1 - c;  // eigenvalues ascend
        b_full.col(c) = es.eigenvectors().col(idx) *
                        std::sqrt(std::max(es.eigenvalues()[idx], 1e-6));
      }
      loadings[k] = lower_factor(b_full);
      Eigen::VectorXd delta_init =
          (cov - loadings[k] * loadings[k].transpose()).diagonal();
      delta_init = delta_init.cwiseMax(0.05 * scale);

      lay.mu[k].mean = center;
      lay.mu[k].var = Eigen::VectorXd::Constant(dprev, 0.1 * scale);
      lay.load_rows[k].resize(dprev);
      for (int j = 0; j < dprev; ++j) {
        const int nf = row_free(j, dnext);
        lay.load_rows[k][j].mean = loadings[k].row(j).head(nf).transpose();
        lay.load_rows[k][j].cov =
            0.01 * scale * Eigen::MatrixXd::Identity(nf, nf);
      }
      lay.delta[k].shape = Eigen::VectorXd::Constant(dprev, 3.0);
      lay.delta[k].rate = 2.0 * delta_init;
      lay.psi_delta[k].shape = Eigen::VectorXd::Constant(dprev, 1.0);
      lay.psi_delta[k].rate =
          (1.0 / a2 + delta_init.cwiseInverse().array()).matrix();
      lay.mean_aux[k].shape = Eigen::VectorXd::Constant(dprev, 1.0);
      lay.mean_aux[k].rate =
          0.5 * (config.hyper.mean_cauchy_scale * config.hyper.mean_cauchy_scale +
                 center.array().square())
                    .matrix();
      lay.hs_lambda_shape[k] = Eigen::MatrixXd::Ones(dprev, dnext);
      lay.hs_lambda_rate[k] = Eigen::MatrixXd::Ones(dprev, dnext);
      lay.hs_nu_shape[k] = Eigen::MatrixXd::Ones(dprev, dnext);
      lay.hs_nu_rate[k] = 2.0 * Eigen::MatrixXd::Ones(dprev, dnext);
      lay.tau2[k] = {1.0, 1.0};
      lay.xi[k] = {1.0, 1.0 / (config.hyper.horseshoe_global_scale *
                               config.hyper.horseshoe_global_scale) +
                            1.0};
    }
    // Factor scores for the next layer.
    for (long i = 0; i < scores.rows(); ++i) {
      const int k = km.assign[i];
      const Eigen::MatrixXd& b = loadings[k];
      Eigen::MatrixXd btb = b.transpose() * b;
      btb.diagonal().array() += 1e-6;
      next_scores.row(i) =
          btb.llt()
              .solve(b.transpose() *
                     (scores.row(i).transpose() - km.centers.row(k).transpose()))
              .transpose();
    }
    scores = next_scores;
  }

  // Local factors.
  for (long i = 0; i < n; ++i) {
    LocalFactors& loc = state.locals[i];
    loc.beta.mean = beta_hat.row(i).transpose();
    loc.beta.var = (sig2_init * ridge_var[i]).cwiseMax(kVarFloor);
    loc.z.resize(arch.layers);
    for (int l = 0; l < arch.layers; ++l) {
      const int dz = arch.dims[l + 1];
      loc.z[l].mean = Eigen::VectorXd::Zero(dz);
      loc.z[l].cov = 0.5 * Eigen::MatrixXd::Identity(dz, dz);
    }
    loc.resp = Eigen::VectorXd::Constant(total_paths, 1.0 / total_paths);
  }
  return state;
}

// ---- Public wrappers -------------------------------------------------------

double elbo(const VariationalState& state, const LongitudinalDataset& data,
            const FitConfig& config,
            const std::optional<std::vector<int>>& subset) {
  const BasisSpec basis = resolved_basis(config.basis, data);
  const FitContext ctx = make_context(data, basis, state.arch);
  const auto cache = build_cache(state);
  return elbo_impl(state, data, ctx, cache, config, subset);
}

void optimize_local(VariationalState& state, const LongitudinalDataset& data,
                    const std::vector<int>& subject_indices,
                    const FitConfig& config) {
  for (int i : subject_indices) {
    if (i < 0 || i >= static_cast<int>(data.size())) {
      throw ContractViolation("optimize_local: subject index out of range");
    }
  }
  const BasisSpec basis = resolved_basis(config.basis, data);
  const FitContext ctx = make_context(data, basis, state.arch);
  const auto cache = build_cache(state);
  optimize_local_impl(state, data, ctx, cache, subject_indices, config);
}

void step_global(VariationalState& state, const LongitudinalDataset& data,
                 const std::vector<int>& minibatch, const FitConfig& config,
                 int iteration) {
  const BasisSpec basis = resolved_basis(config.basis, data);
  const FitContext ctx = make_context(data, basis, state.arch);
  const double scale =
      static_cast<double>(data.size()) / static_cast<double>(minibatch.size());
  const GlobalAccums acc = accumulate(state, data, ctx, minibatch, scale);
  step_global_impl(state, acc, config, config.step_size(iteration));
}

Eigen::VectorXd responsibility_mass(const VariationalState& state) {
  if (state.locals.empty()) {
    throw ContractViolation("responsibility_mass: no local factors");
  }
  Eigen::VectorXd mass =
      Eigen::VectorXd::Zero(state.locals.front().resp.size());
  for (const auto& loc : state.locals) mass += loc.resp;
  return mass;
}

DmfaParams posterior_mean_params(const VariationalState& state) {
  const auto& arch = state.arch;
  DmfaParams params;
  params.arch = arch;
  params.layers.resize(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    const LayerGlobals& lay = state.layers[l];
    const int kc = arch.components[l];
    const int dprev = arch.dims[l];
    const int dnext = arch.dims[l + 1];
    DmfaLayerParams& out = params.layers[l];
    out.weights = lay.dir_alpha / lay.dir_alpha.sum();
    out.means.resize(kc);
    out.loadings.resize(kc);
    out.noise.resize(kc);
    for (int k = 0; k < kc; ++k) {
      out.means[k] = lay.mu[k].mean;
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(dprev, dnext);
      for (int j = 0; j < dprev; ++j) {
        b.row(j).head(row_free(j, dnext)) = lay.load_rows[k][j].mean.transpose();
      }
      out.loadings[k] = lower_triangular(std::move(b));
      out.noise[k].resize(dprev);
      for (int j = 0; j < dprev; ++j) {
        out.noise[k][j] = std::max(kVarFloor, lay.delta[k].at(j).mean());
      }
    }
  }
  return params;
}

std::pair<PluginParams, PruneReport> prune_and_plugin(
    const VariationalState& state, const FitConfig& config) {
  const DmfaParams params = posterior_mean_params(state);
  const GaussianMixture full = collapse(params);
  const Eigen::VectorXd mass = responsibility_mass(state);
  if (mass.size() != full.components()) {
    throw ContractViolation("prune_and_plugin: responsibility length mismatch");
  }
  PruneReport report;
  std::vector<bool> keep(full.components());
  for (int k = 0; k < full.components(); ++k) {
    const bool ok =
        full.weights[k] >= config.prune_threshold && mass[k] >= 1.0;
    keep[k] = ok;
    report.entries.push_back({k, full.weights[k], mass[k], ok});
    if (ok) ++report.kept;
  }
  if (report.kept == 0) {
    throw ContractViolation(
        "prune_and_plugin: every component pruned; threshold too aggressive");
  }
  PluginParams plugin;
  plugin.beta_prior = renormalize(full, keep);
  plugin.sigma2 = state.sigma2.mean();
  plugin.basis = config.basis;
  return {std::move(plugin), std::move(report)};
}

FitResult fit(const LongitudinalDataset& data, const DmfaArchitecture& arch,
              const FitConfig& config_in, const VariationalState* resume_from) {
  const auto t0 = std::chrono::steady_clock::now();
  require_valid(arch);
  validate_dataset(data);
  FitConfig config = config_in;
  config.basis = resolved_basis(config.basis, data);
  config.minibatch_size = std::min<int>(static_cast<int>(data.size()),
                                        std::max(1, config.minibatch_size));

  FitResult result;
  if (resume_from) {
    if (resume_from->locals.size() != data.size()) {
      throw ContractViolation("fit: resume state subject count mismatch");
    }
    result.state = *resume_from;
  } else {
    result.state = init_state(data, arch, config);
  }
  const FitContext ctx = make_context(data, config.basis, arch);
  Rng rng(derive_seed(config.seed, 0xf17));

  const long n = static_cast<long>(data.size());
  std::vector<int> all(n);
  for (long i = 0; i < n; ++i) all[i] = static_cast<int>(i);

  for (int m = 1; m <= config.max_iterations; ++m) {
    // Sample a minibatch without replacement, kept in index order so that
    // accumulation order is deterministic.
    std::vector<int> batch;
    if (config.minibatch_size >= n) {
      batch = all;
    } else {
      std::vector<int> pool = all;
      for (int j = 0; j < config.minibatch_size; ++j) {
        const long pick = rng.uniform_int(j, n - 1);
        std::swap(pool[j], pool[pick]);
      }
      batch.assign(pool.begin(), pool.begin() + config.minibatch_size);
      std::sort(batch.begin(), batch.end());
    }

    auto cache = build_cache(result.state);
    optimize_local_impl(result.state, data, ctx, cache, batch, config);
    const double scale =
        static_cast<double>(n) / static_cast<double>(batch.size());
    const GlobalAccums acc =
        accumulate(result.state, data, ctx, batch, scale);
    step_global_impl(result.state, acc, config, config.step_size(m));

    cache = build_cache(result.state);
    std::optional<std::vector<int>> subset;
    if (static_cast<long>(batch.size()) < n) subset = batch;
    double e;
    try {
      e = elbo_impl(result.state, data, ctx, cache, config, subset);
    } catch (const NumericalError& err) {
      throw NumericalError("fit: aborted at iteration " + std::to_string(m) +
                           ": " + err.what());
    }
    result.elbo_trace.push_back(e);
    result.iterations = m;
  }

  // Final full local pass so responsibilities and pruning are coherent.
  const auto cache = build_cache(result.state);
  optimize_local_impl(result.state, data, ctx, cache, all, config);
  auto pruned = prune_and_plugin(result.state, config);
  result.plugin = std::move(pruned.first);
  result.pruning = std::move(pruned.second);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return result;
}

int select_architecture(const LongitudinalDataset& data,
                        const std::vector<DmfaArchitecture>& candidates,
                        int short_iters, const FitConfig& config) {
  if (candidates.empty()) {
    throw ContractViolation("select_architecture: no candidates");
  }
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  std::string last_error = "no candidate could be fitted";
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const ArchValidation v = validate(candidates[c]);
    if (!v.ok) {
      last_error = "candidate " + std::to_string(c) + " invalid";
      continue;
    }
    FitConfig short_config = config;
    short_config.max_iterations = short_iters;
    try {
      const FitResult r = fit(data, candidates[c], short_config);
      const std::size_t m = r.elbo_trace.size();
      const std::size_t tail = std::max<std::size_t>(1, m / 10);
      double score = 0.0;
      for (std::size_t i = m - tail; i < m; ++i) score += r.elbo_trace[i];
      score /= static_cast<double>(tail);
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(c);
      }
    } catch (const std::exception& e) {
      last_error = e.what();
    }
  }
  if (best < 0) {
    throw NumericalError("select_architecture: all candidates failed: " +
                         last_error);
  }
  return best;
}

// ---- Serialization ---------------------------------------------------------

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.begin(), v.end());
}

Eigen::VectorXd vec_from_json(const nlohmann::json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

nlohmann::json mat_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& j) {
  const std::size_t rows = j.size();
  const std::size_t cols = rows == 0 ? 0 : j[0].size();
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

nlohmann::json ig_json(const IgFactor& f) {
  return nlohmann::json{{"shape", f.shape}, {"rate", f.rate}};
}

IgFactor ig_from_json(const nlohmann::json& j) {
  return {j.at("shape").get<double>(), j.at("rate").get<double>()};
}

}  // namespace

nlohmann::json to_json(const VariationalState& state) {
  nlohmann::json j;
  j["architecture"] = to_json(state.arch);
  j["sigma2"] = ig_json(state.sigma2);
  j["psi_sigma"] = ig_json(state.psi_sigma);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& lay : state.layers) {
    nlohmann::json jl;
    jl["dir_alpha"] = vec_json(lay.dir_alpha);
    nlohmann::json comps = nlohmann::json::array();
    for (std::size_t k = 0; k < lay.mu.size(); ++k) {
      nlohmann::json jc;
      jc["mu_mean"] = vec_json(lay.mu[k].mean);
      jc["mu_var"] = vec_json(lay.mu[k].var);
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& row : lay.load_rows[k]) {
        rows.push_back(nlohmann::json{{"mean", vec_json(row.mean)},
                                      {"cov", mat_json(row.cov)}});
      }
      jc["load_rows"] = rows;
      jc["delta_shape"] = vec_json(lay.delta[k].shape);
      jc["delta_rate"] = vec_json(lay.delta[k].rate);
      jc["psi_delta_shape"] = vec_json(lay.psi_delta[k].shape);
      jc["psi_delta_rate"] = vec_json(lay.psi_delta[k].rate);
      jc["mean_aux_shape"] = vec_json(lay.mean_aux[k].shape);
      jc["mean_aux_rate"] = vec_json(lay.mean_aux[k].rate);
      jc["hs_lambda_shape"] = mat_json(lay.hs_lambda_shape[k]);
      jc["hs_lambda_rate"] = mat_json(lay.hs_lambda_rate[k]);
      jc["hs_nu_shape"] = mat_json(lay.hs_nu_shape[k]);
      jc["hs_nu_rate"] = mat_json(lay.hs_nu_rate[k]);
      jc["tau2"] = ig_json(lay.tau2[k]);
      jc["xi"] = ig_json(lay.xi[k]);
      comps.push_back(jc);
    }
    jl["components"] = comps;
    layers.push_back(jl);
  }
  j["layers"] = layers;
  nlohmann::json locals = nlohmann::json::array();
  for (const auto& loc : state.locals) {
    nlohmann::json jo;
    jo["beta_mean"] = vec_json(loc.beta.mean);
    jo["beta_var"] = vec_json(loc.beta.var);
    nlohmann::json zs = nlohmann::json::array();
    for (const auto& z : loc.z) {
      zs.push_back(
          nlohmann::json{{"mean", vec_json(z.mean)}, {"cov", mat_json(z.cov)}});
    }
    jo["z"] = zs;
    jo["resp"] = vec_json(loc.resp);
    locals.push_back(jo);
  }
  j["locals"] = locals;
  return j;
}

VariationalState state_from_json(const nlohmann::json& j) {
  VariationalState state;
  state.arch = arch_from_json(j.at("architecture"));
  state.sigma2 = ig_from_json(j.at("sigma2"));
  state.psi_sigma = ig_from_json(j.at("psi_sigma"));
  for (const auto& jl : j.at("layers")) {
    LayerGlobals lay;
    lay.dir_alpha = vec_from_json(jl.at("dir_alpha"));
    for (const auto& jc : jl.at("components")) {
      lay.mu.push_back({vec_from_json(jc.at("mu_mean")),
                        vec_from_json(jc.at("mu_var"))});
      std::vector<FullGauss> rows;
      for (const auto& jr : jc.at("load_rows")) {
        rows.push_back({vec_from_json(jr.at("mean")),
                        mat_from_json(jr.at("cov"))});
      }
      lay.load_rows.push_back(std::move(rows));
      lay.delta.push_back({vec_from_json(jc.at("delta_shape")),
                           vec_from_json(jc.at("delta_rate"))});
      lay.psi_delta.push_back({vec_from_json(jc.at("psi_delta_shape")),
                               vec_from_json(jc.at("psi_delta_rate"))});
      lay.mean_aux.push_back({vec_from_json(jc.at("mean_aux_shape")),
                              vec_from_json(jc.at("mean_aux_rate"))});
      lay.hs_lambda_shape.push_back(mat_from_json(jc.at("hs_lambda_shape")));
      lay.hs_lambda_rate.push_back(mat_from_json(jc.at("hs_lambda_rate")));
      lay.hs_nu_shape.push_back(mat_from_json(jc.at("hs_nu_shape")));
      lay.hs_nu_rate.push_back(mat_from_json(jc.at("hs_nu_rate")));
      lay.tau2.push_back(ig_from_json(jc.at("tau2")));
      lay.xi.push_back(ig_from_json(jc.at("xi")));
    }
    state.layers.push_back(std::move(lay));
  }
  for (const auto& jo : j.at("locals")) {
    LocalFactors loc;
    loc.beta = {vec_from_json(jo.at("beta_mean")),
                vec_from_json(jo.at("beta_var"))};
    for (const auto& jz : jo.at("z")) {
      loc.z.push_back(
          {vec_from_json(jz.at("mean")), mat_from_json(jz.at("cov"))});
    }
    loc.resp = vec_from_json(jo.at("resp"));
    state.locals.push_back(std::move(loc));
  }
  return state;
}

}  // namespace dmlmm
