#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace milkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixI = Eigen::MatrixXi;

/// Bad user input (config fields, manifests, CLI flags). Maps to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Anything that goes wrong past validation (I/O, corrupt data, diverging
/// training). Maps to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

/// Collector for non-fatal conditions (fold imbalance, degenerate vectors,
/// absent metric classes). Callers pass nullptr when they don't care.
struct WarningLog {
  std::vector<std::string> entries;
  void add(std::string msg) { entries.push_back(std::move(msg)); }
  bool empty() const { return entries.empty(); }
};

inline void warn(WarningLog* log, std::string msg) {
  if (log) log->add(std::move(msg));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace milkit
