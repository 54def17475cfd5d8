#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmlmm/basis.hpp"
#include "dmlmm/dmfa.hpp"
#include "dmlmm/vi.hpp"

namespace dmlmm {

// Flat "key = value" configuration table ('#' comments). Keys are dotted
// paths (basis.family, fit.iterations, ...); command-line --set key=value
// entries override file values.
using ConfigTable = std::map<std::string, std::string>;

ConfigTable parse_config_file(const std::string& path);
void apply_overrides(ConfigTable& table,
                     const std::vector<std::string>& assignments);

struct RunConfig {
  ConfigTable raw;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir = ".";
  std::string data_path;

  BasisSpec basis;
  DmfaArchitecture arch;
  std::vector<DmfaArchitecture> candidates;  // select-arch
  FitConfig fit;

  // Command-specific options with defaults.
  std::string predict_subject;
  std::string predict_series;  // external series CSV for predict/conflict
  double grid_start = std::numeric_limits<double>::quiet_NaN();
  double grid_stop = std::numeric_limits<double>::quiet_NaN();
  int grid_count = 100;
  std::vector<double> levels{0.95, 0.5};
  std::optional<double> risk_threshold;
  std::string simulate_dgp = "dgp1";
  int simulate_n = 0;  // 0 keeps each generator's default
  int simulate_holdout = 0;
  int conflict_split = 1;
  long conflict_prior_draws = 200;
  long conflict_kl_samples = 5000;
};

// Build a RunConfig from a parsed table; unknown keys raise a contract
// violation so typos fail loudly.
RunConfig make_run_config(const ConfigTable& table);

// Helpers shared with the CLI.
std::vector<double> parse_double_list(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

}  // namespace dmlmm
