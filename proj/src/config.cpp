#include "dmlmm/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dmlmm/common.hpp"

namespace dmlmm {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') {
    throw ContractViolation("config: key '" + key + "' expects a number, got '" +
                            v + "'");
  }
  return x;
}

long to_long(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long x = std::strtol(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') {
    throw ContractViolation("config: key '" + key + "' expects an integer, got '" +
                            v + "'");
  }
  return x;
}

// Block grammar for composite bases: "family:dim[:period]" entries joined
// with '+', e.g. "seasonal_bspline:6:12 + bspline:14".
BasisSpec parse_block(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(trim(item));
  if (parts.size() < 2) {
    throw ContractViolation("config: basis block '" + text +
                            "' must be family:dim[:period]");
  }
  BasisSpec b;
  b.family = family_from_name(parts[0]);
  b.dimension = static_cast<int>(to_long("basis.blocks", parts[1]));
  if (parts.size() > 2) b.period = to_double("basis.blocks", parts[2]);
  return b;
}

}  // namespace

ConfigTable parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot open config file: " + path);
  ConfigTable table;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": empty key");
    }
    table[key] = value;
  }
  return table;
}

void apply_overrides(ConfigTable& table,
                     const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const std::size_t eq = a.find('=');
    if (eq == std::string::npos) {
      throw ContractViolation("override '" + a + "' must be key=value");
    }
    table[trim(a.substr(0, eq))] = trim(a.substr(eq + 1));
  }
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_double("list", item));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<int>(to_long("list", item)));
  }
  return out;
}

RunConfig make_run_config(const ConfigTable& table) {
  RunConfig cfg;
  cfg.raw = table;
  // Defaults chosen once here; every key is optional.
  cfg.basis.family = BasisFamily::bspline;
  cfg.basis.dimension = 10;

  bool have_k = false;
  std::vector<int> arch_k, arch_d;

  for (const auto& [key, value] : table) {
    if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(to_long(key, value));
    } else if (key == "threads") {
      cfg.threads = static_cast<int>(to_long(key, value));
    } else if (key == "out") {
      cfg.out_dir = value;
    } else if (key == "data.path") {
      cfg.data_path = value;
    } else if (key == "basis.family") {
      cfg.basis.family = family_from_name(value);
    } else if (key == "basis.dimension") {
      cfg.basis.dimension = static_cast<int>(to_long(key, value));
    } else if (key == "basis.degree") {
      cfg.basis.degree = static_cast<int>(to_long(key, value));
    } else if (key == "basis.t_min") {
      cfg.basis.t_min = to_double(key, value);
    } else if (key == "basis.t_max") {
      cfg.basis.t_max = to_double(key, value);
    } else if (key == "basis.period") {
      cfg.basis.period = to_double(key, value);
    } else if (key == "basis.knots") {
      cfg.basis.knots = parse_double_list(value);
    } else if (key == "basis.blocks") {
      std::stringstream ss(value);
      std::string block;
      while (std::getline(ss, block, '+')) {
        block = trim(block);
        if (!block.empty()) cfg.basis.blocks.push_back(parse_block(block));
      }
    } else if (key == "arch.K") {
      arch_k = parse_int_list(value);
      have_k = true;
    } else if (key == "arch.D") {
      arch_d = parse_int_list(value);
    } else if (key == "arch.candidates") {
      // "K=6,2;D=10,4,1 | K=4,2;D=10,4,1"
      std::stringstream ss(value);
      std::string cand;
      while (std::getline(ss, cand, '|')) {
        cand = trim(cand);
        if (cand.empty()) continue;
        DmfaArchitecture a;
        std::stringstream fs(cand);
        std::string field;
        while (std::getline(fs, field, ';')) {
          field = trim(field);
          if (field.rfind("K=", 0) == 0) {
            a.components = parse_int_list(field.substr(2));
          } else if (field.rfind("D=", 0) == 0) {
            a.dims = parse_int_list(field.substr(2));
          } else {
            throw ContractViolation("config: candidate field '" + field +
                                    "' must be K=... or D=...");
          }
        }
        a.layers = static_cast<int>(a.components.size());
        cfg.candidates.push_back(std::move(a));
      }
    } else if (key == "fit.iterations") {
      cfg.fit.max_iterations = static_cast<int>(to_long(key, value));
    } else if (key == "fit.minibatch") {
      cfg.fit.minibatch_size = static_cast<int>(to_long(key, value));
    } else if (key == "fit.step_s") {
      cfg.fit.step_s = to_double(key, value);
    } else if (key == "fit.step_tau") {
      cfg.fit.step_tau = to_double(key, value);
    } else if (key == "fit.step_kappa") {
      cfg.fit.step_kappa = to_double(key, value);
    } else if (key == "fit.local_tolerance") {
      cfg.fit.local_tolerance = to_double(key, value);
    } else if (key == "fit.local_max_sweeps") {
      cfg.fit.local_max_sweeps = static_cast<int>(to_long(key, value));
    } else if (key == "fit.prune_threshold") {
      cfg.fit.prune_threshold = to_double(key, value);
    } else if (key == "hyper.mean_cauchy_scale") {
      cfg.fit.hyper.mean_cauchy_scale = to_double(key, value);
    } else if (key == "hyper.halfcauchy_a") {
      cfg.fit.hyper.scale_halfcauchy_a = to_double(key, value);
    } else if (key == "hyper.horseshoe_scale") {
      cfg.fit.hyper.horseshoe_global_scale = to_double(key, value);
    } else if (key == "hyper.dirichlet") {
      if (value != "auto") {
        cfg.fit.hyper.dirichlet_concentration = parse_double_list(value);
      }
    } else if (key == "predict.subject") {
      cfg.predict_subject = value;
    } else if (key == "predict.series") {
      cfg.predict_series = value;
    } else if (key == "predict.grid") {
      // start:stop:count
      const auto parts = [&] {
        std::vector<std::string> p;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ':')) p.push_back(trim(item));
        return p;
      }();
      if (parts.size() != 3) {
        throw ContractViolation("config: predict.grid must be start:stop:count");
      }
      cfg.grid_start = to_double(key, parts[0]);
      cfg.grid_stop = to_double(key, parts[1]);
      cfg.grid_count = static_cast<int>(to_long(key, parts[2]));
    } else if (key == "predict.levels" || key == "evaluate.levels") {
      cfg.levels = parse_double_list(value);
    } else if (key == "predict.threshold") {
      cfg.risk_threshold = to_double(key, value);
    } else if (key == "simulate.dgp") {
      cfg.simulate_dgp = value;
    } else if (key == "simulate.n") {
      cfg.simulate_n = static_cast<int>(to_long(key, value));
    } else if (key == "simulate.holdout") {
      cfg.simulate_holdout = static_cast<int>(to_long(key, value));
    } else if (key == "conflict.split") {
      cfg.conflict_split = static_cast<int>(to_long(key, value));
    } else if (key == "conflict.prior_draws") {
      cfg.conflict_prior_draws = to_long(key, value);
    } else if (key == "conflict.kl_samples") {
      cfg.conflict_kl_samples = to_long(key, value);
    } else {
      throw ContractViolation("config: unknown key '" + key + "'");
    }
  }

  if (have_k) {
    cfg.arch.components = arch_k;
    cfg.arch.layers = static_cast<int>(arch_k.size());
    if (!arch_d.empty()) {
      cfg.arch.dims = arch_d;
    }
  }
  cfg.fit.basis = cfg.basis;
  cfg.fit.seed = cfg.seed;
  cfg.fit.threads = cfg.threads;
  return cfg;
}

}  // namespace dmlmm
