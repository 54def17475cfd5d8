#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>

namespace dmlmm {

// Self-contained deterministic RNG (splitmix64 core, polar method normals).
// Avoids the standard library distributions so that streams are stable
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  long uniform_int(long lo, long hi) {
    const double u = uniform();
    long v = lo + static_cast<long>(u * static_cast<double>(hi - lo + 1));
    return v > hi ? hi : v;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
    return z;
  }

  // Index draw proportional to the (nonnegative) entries of probs.
  Eigen::Index categorical(const Eigen::VectorXd& probs) {
    const double total = probs.sum();
    double u = uniform() * total;
    for (Eigen::Index k = 0; k + 1 < probs.size(); ++k) {
      u -= probs[k];
      if (u < 0.0) return k;
    }
    return probs.size() - 1;
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Documented seed-splitting function: replicate/subject streams are derived
// by hashing (base, stream) through one splitmix64 round each.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  Rng r(base ^ (0x632be59bd9b4e019ULL * (stream + 1)));
  return r.next_u64();
}

}  // namespace dmlmm
