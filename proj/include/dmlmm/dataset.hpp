#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace dmlmm {

// One subject's irregular observations, plus optional held-out pairs used
// for predictive evaluation. Held-out times must be disjoint from observed
// times.
struct Subject {
  std::string id;
  Eigen::VectorXd times;
  Eigen::VectorXd values;
  Eigen::VectorXd holdout_times;
  Eigen::VectorXd holdout_values;

  Eigen::Index n() const { return times.size(); }
};

struct LongitudinalDataset {
  std::vector<Subject> subjects;
  // Optional true cluster labels (empty, or one per subject).
  std::vector<int> labels;

  std::size_t size() const { return subjects.size(); }
  Eigen::Index total_observations() const {
    Eigen::Index n = 0;
    for (const auto& s : subjects) n += s.n();
    return n;
  }
  void time_range(double* lo, double* hi) const;
};

void validate_dataset(const LongitudinalDataset& data);

// Long-format CSV: header "subject_id,t,y,holdout_flag", one row per
// observation, values written with 17 significant digits.
void write_csv(const LongitudinalDataset& data, const std::string& path);
LongitudinalDataset read_csv(const std::string& path);

// Format helper shared by the CSV writers: shortest representation that
// round-trips a double (up to 17 significant digits).
std::string format_double(double v);

}  // namespace dmlmm
