#include "dmlmm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "dmlmm/common.hpp"

namespace dmlmm {

void LongitudinalDataset::time_range(double* lo, double* hi) const {
  double a = std::numeric_limits<double>::infinity();
  double b = -a;
  for (const auto& s : subjects) {
    for (Eigen::Index i = 0; i < s.times.size(); ++i) {
      a = std::min(a, s.times[i]);
      b = std::max(b, s.times[i]);
    }
    for (Eigen::Index i = 0; i < s.holdout_times.size(); ++i) {
      a = std::min(a, s.holdout_times[i]);
      b = std::max(b, s.holdout_times[i]);
    }
  }
  *lo = a;
  *hi = b;
}

void validate_dataset(const LongitudinalDataset& data) {
  if (data.subjects.empty()) {
    throw ContractViolation("dataset: no subjects");
  }
  if (!data.labels.empty() && data.labels.size() != data.subjects.size()) {
    throw ContractViolation("dataset: label count != subject count");
  }
  for (const auto& s : data.subjects) {
    // Holdout-only subjects are allowed (prediction falls back to the
    // marginal); fitting separately requires observed rows.
    if (s.times.size() + s.holdout_times.size() < 1) {
      throw ContractViolation("dataset: subject " + s.id + " has no rows");
    }
    if (s.times.size() != s.values.size() ||
        s.holdout_times.size() != s.holdout_values.size()) {
      throw ContractViolation("dataset: subject " + s.id + " has ragged columns");
    }
    if (!s.times.allFinite() || !s.values.allFinite() ||
        !s.holdout_times.allFinite() || !s.holdout_values.allFinite()) {
      throw ContractViolation("dataset: subject " + s.id + " has non-finite entries");
    }
    for (Eigen::Index i = 0; i < s.holdout_times.size(); ++i) {
      for (Eigen::Index j = 0; j < s.times.size(); ++j) {
        if (s.holdout_times[i] == s.times[j]) {
          throw ContractViolation("dataset: subject " + s.id +
                                  " has a held-out time equal to an observed time");
        }
      }
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  // Shortest form that round-trips: try increasing precision.
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_csv(const LongitudinalDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ContractViolation("cannot open for writing: " + path);
  out << "subject_id,t,y,holdout_flag\n";
  for (const auto& s : data.subjects) {
    for (Eigen::Index i = 0; i < s.times.size(); ++i) {
      out << s.id << ',' << format_double(s.times[i]) << ','
          << format_double(s.values[i]) << ",0\n";
    }
    for (Eigen::Index i = 0; i < s.holdout_times.size(); ++i) {
      out << s.id << ',' << format_double(s.holdout_times[i]) << ','
          << format_double(s.holdout_values[i]) << ",1\n";
    }
  }
}

LongitudinalDataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ContractViolation(path + ": empty file");
  // Tolerate \r\n line endings.
  auto strip = [](std::string& s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  };
  strip(line);
  if (line != "subject_id,t,y,holdout_flag") {
    throw ContractViolation(path + ": line 1: expected header subject_id,t,y,holdout_flag");
  }

  struct Rows {
    std::vector<double> t, y, ht, hy;
  };
  std::vector<std::string> order;
  std::map<std::string, Rows> by_id;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    strip(line);
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, ts, ys, hs;
    if (!std::getline(ss, id, ',') || !std::getline(ss, ts, ',') ||
        !std::getline(ss, ys, ',') || !std::getline(ss, hs)) {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": expected 4 comma-separated fields");
    }
    char* end = nullptr;
    const double t = std::strtod(ts.c_str(), &end);
    if (end == ts.c_str() || *end != '\0' || !std::isfinite(t)) {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": bad time value '" + ts + "'");
    }
    const double y = std::strtod(ys.c_str(), &end);
    if (end == ys.c_str() || *end != '\0' || !std::isfinite(y)) {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": bad observation value '" + ys + "'");
    }
    if (hs != "0" && hs != "1") {
      throw ContractViolation(path + ": line " + std::to_string(lineno) +
                              ": holdout_flag must be 0 or 1");
    }
    if (by_id.find(id) == by_id.end()) order.push_back(id);
    Rows& r = by_id[id];
    if (hs == "0") {
      r.t.push_back(t);
      r.y.push_back(y);
    } else {
      r.ht.push_back(t);
      r.hy.push_back(y);
    }
  }

  LongitudinalDataset data;
  for (const auto& id : order) {
    const Rows& r = by_id[id];
    Subject s;
    s.id = id;
    s.times = Eigen::Map<const Eigen::VectorXd>(r.t.data(), r.t.size());
    s.values = Eigen::Map<const Eigen::VectorXd>(r.y.data(), r.y.size());
    s.holdout_times = Eigen::Map<const Eigen::VectorXd>(r.ht.data(), r.ht.size());
    s.holdout_values = Eigen::Map<const Eigen::VectorXd>(r.hy.data(), r.hy.size());
    data.subjects.push_back(std::move(s));
  }
  validate_dataset(data);
  return data;
}

}  // namespace dmlmm
