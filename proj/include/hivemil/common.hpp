#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace hivemil {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Raised when a run/model configuration is inconsistent (bad dimensions,
// missing classes, invalid hyperparameters).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an on-disk artifact (dataset, checkpoint) cannot be read.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr double kNormEps = 1e-12;

// Unit-normalizes v; vectors with norm <= eps are returned unchanged.
inline Vec l2_normalize(const Vec& v, double eps = kNormEps) {
  double n = v.norm();
  if (n <= eps) return v;
  return v / n;
}

inline void l2_normalize_rows_inplace(Mat& m, double eps = kNormEps) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double n = m.row(i).norm();
    if (n > eps) m.row(i) /= n;
  }
}

inline Mat l2_normalize_rows(Mat m, double eps = kNormEps) {
  l2_normalize_rows_inplace(m, eps);
  return m;
}

// Running mean / population std over a stream of values (Welford).
// Welford keeps the mean of a constant column exactly equal to that constant,
// which the inclusive >= threshold comparisons rely on.
struct ColumnStats {
  double mean = 0.0;
  double m2 = 0.0;
  long long count = 0;

  void add(double x) {
    ++count;
    double d = x - mean;
    mean += d / static_cast<double>(count);
    m2 += d * (x - mean);
  }
  double pop_std() const {
    return count > 0 ? std::sqrt(m2 / static_cast<double>(count)) : 0.0;
  }
};

}  // namespace hivemil
