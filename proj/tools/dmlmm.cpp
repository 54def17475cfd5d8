// Command-line surface: fit, predict, simulate, evaluate, conflict,
// select-arch. All randomness flows from --seed / config; repeated runs with
// the same inputs produce byte-identical outputs in single-threaded mode.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dmlmm/common.hpp"
#include "dmlmm/config.hpp"
#include "dmlmm/dataset.hpp"
#include "dmlmm/predict.hpp"
#include "dmlmm/simlab.hpp"
#include "dmlmm/vi.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<long> seed;
  std::optional<int> threads;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Configuration file");
  cmd->add_option("--set", args.overrides, "Override a config key (key=value)");
  cmd->add_option("--seed", args.seed, "Random seed (overrides config)");
  cmd->add_option("--threads", args.threads, "Worker threads (default 1)");
  cmd->add_option("--out", args.out_dir, "Output directory");
}

dmlmm::RunConfig load_config(const CommonArgs& args) {
  dmlmm::ConfigTable table;
  if (!args.config_path.empty()) {
    table = dmlmm::parse_config_file(args.config_path);
  }
  dmlmm::apply_overrides(table, args.overrides);
  dmlmm::RunConfig cfg = dmlmm::make_run_config(table);
  if (args.seed) {
    cfg.seed = static_cast<std::uint64_t>(*args.seed);
    cfg.fit.seed = cfg.seed;
  }
  if (args.threads) {
    cfg.threads = *args.threads;
    cfg.fit.threads = *args.threads;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  fs::create_directories(cfg.out_dir);
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw dmlmm::ContractViolation("cannot open for writing: " + path);
  out << text;
}

void write_json(const std::string& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

// Default architecture for dimension d when the config does not pin one:
// two layers with the largest admissible dimensions.
dmlmm::DmfaArchitecture default_arch(int d, const dmlmm::DmfaArchitecture& cfg) {
  dmlmm::DmfaArchitecture arch = cfg;
  if (arch.layers == 0) {
    arch.layers = 2;
    arch.components = {6, 2};
  }
  if (arch.dims.empty()) {
    arch.dims.resize(arch.layers + 1);
    arch.dims[0] = d;
    for (int l = 0; l < arch.layers; ++l) {
      arch.dims[l + 1] = std::max(1, (arch.dims[l] - 1) / 2);
    }
  }
  return arch;
}

dmlmm::LongitudinalDataset load_data(const dmlmm::RunConfig& cfg,
                                     const std::string& flag_path) {
  const std::string path = flag_path.empty() ? cfg.data_path : flag_path;
  if (path.empty()) {
    throw dmlmm::ContractViolation("no dataset given (use --data or data.path)");
  }
  return dmlmm::read_csv(path);
}

json bundle_json(const dmlmm::FitResult& result,
                 const dmlmm::DmfaArchitecture& arch,
                 const dmlmm::RunConfig& cfg) {
  json pruning = json::array();
  for (const auto& e : result.pruning.entries) {
    pruning.push_back({{"path", e.path},
                       {"weight", e.weight},
                       {"responsibility_mass", e.responsibility_mass},
                       {"kept", e.kept}});
  }
  json j;
  j["plugin"] = dmlmm::to_json(result.plugin);
  j["pruning"] = {{"entries", pruning}, {"kept", result.pruning.kept}};
  j["iterations"] = result.iterations;
  j["architecture"] = dmlmm::to_json(arch);
  j["seed"] = cfg.seed;
  j["state"] = dmlmm::to_json(result.state);
  return j;
}

void write_trace_csv(const std::vector<double>& trace, const std::string& path) {
  std::string text = "iteration,elbo\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    text += std::to_string(i + 1) + "," + dmlmm::format_double(trace[i]) + "\n";
  }
  write_text(path, text);
}

int cmd_fit(const CommonArgs& common, const std::string& data_flag,
            const std::string& resume_path) {
  const dmlmm::RunConfig cfg = load_config(common);
  const dmlmm::LongitudinalDataset data = load_data(cfg, data_flag);
  const dmlmm::DmfaArchitecture arch =
      default_arch(cfg.basis.dimension, cfg.arch);
  dmlmm::FitResult result;
  if (!resume_path.empty()) {
    std::ifstream in(resume_path);
    if (!in) {
      throw dmlmm::ContractViolation("cannot open bundle: " + resume_path);
    }
    json j = json::parse(in);
    const dmlmm::VariationalState state =
        dmlmm::state_from_json(j.at("state"));
    result = dmlmm::fit(data, arch, cfg.fit, &state);
  } else {
    result = dmlmm::fit(data, arch, cfg.fit);
  }
  write_json(cfg.out_dir + "/bundle.json", bundle_json(result, arch, cfg));
  write_trace_csv(result.elbo_trace, cfg.out_dir + "/elbo_trace.csv");
  std::cout << "fit: " << result.iterations << " iterations, "
            << result.pruning.kept << " components kept\n";
  return 0;
}

dmlmm::PluginParams load_plugin(const std::string& bundle_path) {
  std::ifstream in(bundle_path);
  if (!in) throw dmlmm::ContractViolation("cannot open bundle: " + bundle_path);
  json j = json::parse(in);
  return dmlmm::plugin_from_json(j.at("plugin"));
}

// First subject of a long CSV, observed rows sorted by time.
void load_series(const std::string& path, Eigen::VectorXd* t,
                 Eigen::VectorXd* y) {
  const dmlmm::LongitudinalDataset d = dmlmm::read_csv(path);
  const dmlmm::Subject& s = d.subjects.front();
  std::vector<std::pair<double, double>> rows(s.times.size());
  for (Eigen::Index i = 0; i < s.times.size(); ++i) {
    rows[i] = {s.times[i], s.values[i]};
  }
  std::stable_sort(rows.begin(), rows.end());
  t->resize(rows.size());
  y->resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    (*t)[i] = rows[i].first;
    (*y)[i] = rows[i].second;
  }
}

int cmd_predict(const CommonArgs& common, const std::string& bundle_path,
                const std::string& data_flag) {
  const dmlmm::RunConfig cfg = load_config(common);
  const dmlmm::PluginParams plugin = load_plugin(bundle_path);

  Eigen::VectorXd t_obs(0), y_obs(0);
  std::string provenance = "marginal";
  if (!cfg.predict_series.empty()) {
    load_series(cfg.predict_series, &t_obs, &y_obs);
    provenance = "series";
  } else if (!cfg.predict_subject.empty()) {
    const dmlmm::LongitudinalDataset data = load_data(cfg, data_flag);
    const auto it = std::find_if(
        data.subjects.begin(), data.subjects.end(),
        [&](const dmlmm::Subject& s) { return s.id == cfg.predict_subject; });
    if (it == data.subjects.end()) {
      throw dmlmm::ContractViolation("unknown subject id: " +
                                     cfg.predict_subject);
    }
    t_obs = it->times;
    y_obs = it->values;
    // A subject with no retained observations gets the marginal.
    provenance = t_obs.size() > 0 ? it->id : "marginal";
  }

  double start = cfg.grid_start, stop = cfg.grid_stop;
  if (!std::isfinite(start)) start = plugin.basis.t_min;
  if (!std::isfinite(stop)) stop = plugin.basis.t_max;
  Eigen::VectorXd grid(cfg.grid_count);
  for (int i = 0; i < cfg.grid_count; ++i) {
    grid[i] = start + (stop - start) * i / std::max(1, cfg.grid_count - 1);
  }

  const dmlmm::PredictiveResult result =
      dmlmm::predictive(plugin, t_obs, y_obs, grid, provenance);
  const dmlmm::Moments mom = dmlmm::moments(result.mixture);

  std::string csv = "t,mean";
  for (double level : cfg.levels) {
    csv += ",lower_" + dmlmm::format_double(level) + ",upper_" +
           dmlmm::format_double(level);
  }
  if (cfg.risk_threshold) csv += ",risk";
  csv += "\n";
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> bands;
  for (double level : cfg.levels) {
    bands.push_back(dmlmm::pointwise_band(result, level));
  }
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    csv += dmlmm::format_double(grid[i]) + "," +
           dmlmm::format_double(mom.mean[i]);
    for (const auto& band : bands) {
      csv += "," + dmlmm::format_double(band.first[i]) + "," +
             dmlmm::format_double(band.second[i]);
    }
    if (cfg.risk_threshold) {
      csv += "," + dmlmm::format_double(
                       dmlmm::threshold_risk(result, i, *cfg.risk_threshold));
    }
    csv += "\n";
  }
  write_text(cfg.out_dir + "/prediction.csv", csv);
  write_json(cfg.out_dir + "/prediction.json", dmlmm::to_json(result));
  std::cout << "predict: " << result.provenance << ", " << grid.size()
            << " grid points\n";
  return 0;
}

int cmd_simulate(const CommonArgs& common) {
  const dmlmm::RunConfig cfg = load_config(common);
  json meta;
  meta["seed"] = cfg.seed;
  meta["dgp"] = cfg.simulate_dgp;
  if (cfg.simulate_dgp == "blackbox") {
    const long n = cfg.simulate_n > 0 ? cfg.simulate_n : 7500;
    const auto samples = dmlmm::simulate_blackbox(
        dmlmm::toy_seasonal_generator(), n, cfg.seed,
        dmlmm::min_count_rejection(100.0));
    std::string csv;
    json params = json::array();
    for (const auto& s : samples) {
      for (Eigen::Index j = 0; j < s.series.size(); ++j) {
        if (j) csv += ",";
        csv += dmlmm::format_double(s.series[j]);
      }
      csv += "\n";
      params.push_back(s.params);
    }
    write_text(cfg.out_dir + "/series.csv", csv);
    meta["count"] = n;
    meta["params"] = params;
    write_json(cfg.out_dir + "/data_meta.json", meta);
    std::cout << "simulate: " << n << " series\n";
    return 0;
  }

  dmlmm::LongitudinalDataset data;
  if (cfg.simulate_dgp == "dgp1") {
    dmlmm::Dgp1Options opts;
    if (cfg.simulate_n > 0) opts.n_subjects = cfg.simulate_n;
    opts.n_holdout = cfg.simulate_holdout;
    data = dmlmm::gen_dgp1(opts, cfg.seed);
    meta["n_subjects"] = opts.n_subjects;
  } else if (cfg.simulate_dgp == "dgp2") {
    dmlmm::Dgp2Options opts;
    if (cfg.simulate_n > 0) opts.n_subjects = cfg.simulate_n;
    opts.n_holdout = cfg.simulate_holdout;
    int resampled = 0;
    opts.resampled_out = &resampled;
    data = dmlmm::gen_dgp2(opts, cfg.seed);
    meta["n_subjects"] = opts.n_subjects;
    meta["resampled"] = resampled;
  } else if (cfg.simulate_dgp == "dgp3") {
    dmlmm::Dgp3Options opts;
    if (cfg.simulate_n > 0) opts.n_rows = cfg.simulate_n;
    data = dmlmm::gen_dgp3(opts, cfg.seed);
    meta["n_rows"] = opts.n_rows;
  } else {
    throw dmlmm::ContractViolation("unknown generator: " + cfg.simulate_dgp);
  }
  dmlmm::write_csv(data, cfg.out_dir + "/data.csv");
  if (!data.labels.empty()) meta["labels"] = data.labels;
  write_json(cfg.out_dir + "/data_meta.json", meta);
  std::cout << "simulate: " << data.size() << " subjects\n";
  return 0;
}

dmlmm::ReplicateMetrics evaluate_one(const dmlmm::PluginParams& plugin,
                                     const dmlmm::LongitudinalDataset& data,
                                     const std::vector<double>& levels) {
  std::vector<dmlmm::SubjectEval> evals;
  for (const auto& subject : data.subjects) {
    if (subject.holdout_times.size() == 0 || subject.n() == 0) continue;
    // Predictive grids are increasing; sort the held-out pairs so metrics do
    // not depend on CSV row order.
    dmlmm::Subject s = subject;
    std::vector<std::pair<double, double>> rows(s.holdout_times.size());
    for (Eigen::Index i = 0; i < s.holdout_times.size(); ++i) {
      rows[i] = {s.holdout_times[i], s.holdout_values[i]};
    }
    std::stable_sort(rows.begin(), rows.end());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s.holdout_times[i] = rows[i].first;
      s.holdout_values[i] = rows[i].second;
    }
    dmlmm::SubjectEval e;
    const dmlmm::PredictiveResult pred =
        dmlmm::predictive(plugin, s.times, s.values, s.holdout_times, s.id);
    e.truth = s.holdout_values;
    e.predictive_mean = dmlmm::moments(pred.mixture).mean;
    e.predictive = pred.mixture;
    for (double level : levels) {
      e.bands[level] = dmlmm::pointwise_band(pred, level);
    }
    evals.push_back(std::move(e));
  }
  if (evals.empty()) {
    throw dmlmm::ContractViolation("evaluate: dataset has no held-out points");
  }
  return dmlmm::evaluate(evals, levels);
}

int cmd_evaluate(const CommonArgs& common, const std::string& bundle_path,
                 const std::string& data_flag) {
  const dmlmm::RunConfig cfg = load_config(common);
  const dmlmm::PluginParams plugin = load_plugin(bundle_path);
  const std::string path = data_flag.empty() ? cfg.data_path : data_flag;
  if (path.empty()) {
    throw dmlmm::ContractViolation("no dataset given (use --data or data.path)");
  }
  dmlmm::MetricsReport report;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.path().extension() == ".csv") {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw dmlmm::ContractViolation("no .csv replicates in " + path);
    }
    for (const auto& f : files) {
      report.replicates.push_back(
          evaluate_one(plugin, dmlmm::read_csv(f), cfg.levels));
    }
  } else {
    report.replicates.push_back(
        evaluate_one(plugin, dmlmm::read_csv(path), cfg.levels));
  }
  write_json(cfg.out_dir + "/metrics.json", dmlmm::to_json(report));
  dmlmm::write_metrics_csv(report, cfg.out_dir + "/metrics.csv");
  std::cout << "evaluate: " << report.replicates.size()
            << " replicate(s), mean log-RMSE "
            << dmlmm::format_double(report.mean_log_rmse()) << "\n";
  return 0;
}

int cmd_conflict(const CommonArgs& common, const std::string& bundle_path,
                 const std::string& series_path) {
  const dmlmm::RunConfig cfg = load_config(common);
  const dmlmm::PluginParams plugin = load_plugin(bundle_path);
  const std::string path =
      series_path.empty() ? cfg.predict_series : series_path;
  if (path.empty()) {
    throw dmlmm::ContractViolation("no series given (use --series)");
  }
  Eigen::VectorXd t, y;
  load_series(path, &t, &y);
  const dmlmm::ConflictResult res = dmlmm::conflict_tail_probability(
      plugin, t, y, cfg.conflict_split, cfg.conflict_prior_draws,
      cfg.conflict_kl_samples, cfg.seed);
  json j;
  j["p"] = res.p;
  j["G_observed"] = res.g_observed;
  j["n_prior_draws"] = res.n_prior_draws;
  j["kl_se"] = res.kl_se;
  write_json(cfg.out_dir + "/conflict.json", j);
  std::cout << "conflict: p = " << dmlmm::format_double(res.p) << "\n";
  return 0;
}

int cmd_select_arch(const CommonArgs& common, const std::string& data_flag,
                    int short_iters) {
  const dmlmm::RunConfig cfg = load_config(common);
  const dmlmm::LongitudinalDataset data = load_data(cfg, data_flag);
  std::vector<dmlmm::DmfaArchitecture> candidates = cfg.candidates;
  if (candidates.empty()) {
    throw dmlmm::ContractViolation("select-arch: arch.candidates not set");
  }
  for (auto& c : candidates) {
    c = default_arch(cfg.basis.dimension, c);
  }
  const int best =
      dmlmm::select_architecture(data, candidates, short_iters, cfg.fit);
  json j;
  j["selected_index"] = best;
  j["architecture"] = dmlmm::to_json(candidates[best]);
  write_json(cfg.out_dir + "/selection.json", j);
  std::cout << "select-arch: candidate " << best << "\n";
  return 0;
}

void emit_error(const std::string& code, const std::string& message) {
  json j;
  j["error"] = {{"code", code}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep mixtures of linear mixed models for longitudinal data"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string data_flag, bundle_flag, series_flag, resume_flag;
  int short_iters = 100;

  CLI::App* fit = app.add_subcommand("fit", "Fit the model to a dataset");
  add_common(fit, common);
  fit->add_option("--data", data_flag, "Dataset CSV");
  fit->add_option("--resume", resume_flag, "Resume from a bundle");

  CLI::App* predict = app.add_subcommand("predict", "Predictive distribution");
  add_common(predict, common);
  predict->add_option("--bundle", bundle_flag, "Fitted bundle JSON")->required();
  predict->add_option("--data", data_flag, "Dataset CSV (for --set predict.subject=...)");

  CLI::App* simulate = app.add_subcommand("simulate", "Generate synthetic data");
  add_common(simulate, common);

  CLI::App* evaluate = app.add_subcommand("evaluate", "Held-out metrics");
  add_common(evaluate, common);
  evaluate->add_option("--bundle", bundle_flag, "Fitted bundle JSON")->required();
  evaluate->add_option("--data", data_flag, "Dataset CSV or directory of replicates");

  CLI::App* conflict = app.add_subcommand("conflict", "Prior-data conflict check");
  add_common(conflict, common);
  conflict->add_option("--bundle", bundle_flag, "Fitted bundle JSON")->required();
  conflict->add_option("--series", series_flag, "Series CSV");

  CLI::App* select = app.add_subcommand("select-arch", "Short-run architecture selection");
  add_common(select, common);
  select->add_option("--data", data_flag, "Dataset CSV");
  select->add_option("--short-iters", short_iters, "Iterations per candidate");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(fit)) return cmd_fit(common, data_flag, resume_flag);
    if (app.got_subcommand(predict)) {
      return cmd_predict(common, bundle_flag, data_flag);
    }
    if (app.got_subcommand(simulate)) return cmd_simulate(common);
    if (app.got_subcommand(evaluate)) {
      return cmd_evaluate(common, bundle_flag, data_flag);
    }
    if (app.got_subcommand(conflict)) {
      return cmd_conflict(common, bundle_flag, series_flag);
    }
    if (app.got_subcommand(select)) {
      return cmd_select_arch(common, data_flag, short_iters);
    }
  } catch (const dmlmm::ContractViolation& e) {
    emit_error("contract_violation", e.what());
    return 2;
  } catch (const dmlmm::NumericalError& e) {
    emit_error("numerical_failure", e.what());
    return 3;
  } catch (const nlohmann::json::exception& e) {
    emit_error("contract_violation", e.what());
    return 2;
  } catch (const std::exception& e) {
    emit_error("io_error", e.what());
    return 2;
  }
  return 0;
}
